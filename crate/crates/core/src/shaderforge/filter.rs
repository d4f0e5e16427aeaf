use std::collections::HashMap;

use crate::error::{contract, Result};
use crate::gradcore::Tensor;

pub const LEVELS: u32 = 32;
/// An image whose most common colour covers more than this is `sparse`.
pub const DOMINANCE: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FilterReason {
    Constant,
    TwoColor,
    Sparse,
    None,
}

impl FilterReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FilterReason::Constant => "constant",
            FilterReason::TwoColor => "two-color",
            FilterReason::Sparse => "sparse",
            FilterReason::None => "none",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterReport {
    pub keep: bool,
    pub reason: FilterReason,
    pub unique_colors: usize,
    /// Fraction of pixels not in the most common quantised colour.
    pub foreground_fraction: f64,
}

fn quantize(x: f32) -> u32 {
    ((x * LEVELS as f32) as u32).min(LEVELS - 1)
}

/// Classify an image as degenerate (constant, two-colour or mostly one
/// colour) after quantising each channel to 32 levels.
pub fn filter_image(image: &Tensor) -> Result<FilterReport> {
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(contract(format!("filter_image expects [3,H,W], got {s:?}"))),
    };
    let d = image.data();
    if d.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(contract("filter_image: pixel outside [0,1]"));
    }
    let plane = h * w;
    let mut counts: HashMap<[u32; 3], usize> = HashMap::new();
    for i in 0..plane {
        let key = [quantize(d[i]), quantize(d[plane + i]), quantize(d[2 * plane + i])];
        *counts.entry(key).or_default() += 1;
    }
    let unique_colors = counts.len();
    let top = counts.values().copied().max().unwrap_or(0);
    let foreground_fraction = 1.0 - top as f64 / plane as f64;
    let reason = if unique_colors <= 1 {
        FilterReason::Constant
    } else if unique_colors <= 2 {
        FilterReason::TwoColor
    } else if 1.0 - foreground_fraction > DOMINANCE {
        FilterReason::Sparse
    } else {
        FilterReason::None
    };
    Ok(FilterReport {
        keep: reason == FilterReason::None,
        reason,
        unique_colors,
        foreground_fraction,
    })
}
