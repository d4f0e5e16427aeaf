//! Labelled image sets and their directory format (`labels.tsv` + PNGs).

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::gradcore::Tensor;
use crate::imageio;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSet {
    /// Each image is `[3,H,W]` in `[0,1]`.
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(contract(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Hold out `fraction` of every class for validation.
    pub fn split_per_class<R: Rng + ?Sized>(&self, fraction: f64, rng: &mut R) -> (Self, Self) {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for c in 0..self.num_classes() {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            idx.shuffle(rng);
            let k = (idx.len() as f64 * fraction).round() as usize;
            val.extend_from_slice(&idx[..k]);
            train.extend_from_slice(&idx[k..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        (self.subset(&train), self.subset(&val))
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut tsv = fs::File::create(dir.join("labels.tsv"))?;
        writeln!(tsv, "index\tlabel")?;
        for (i, (img, label)) in self.images.iter().zip(&self.labels).enumerate() {
            writeln!(tsv, "{i}\t{label}")?;
            imageio::write_png(img, &dir.join(format!("{i:06}.png")))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("labels.tsv"))?;
        let mut out = Self::default();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Parse(format!("labels.tsv line {}", n + 1));
            let (i, label) = line.split_once('\t').ok_or_else(bad)?;
            let i: usize = i.parse().map_err(|_| bad())?;
            if i != out.len() {
                return Err(bad());
            }
            out.labels.push(label.trim().parse().map_err(|_| bad())?);
            out.images.push(imageio::read_png(&dir.join(format!("{i:06}.png")))?);
        }
        Ok(out)
    }
}

/// Stack the selected images into one `[B,C,H,W]` batch.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| contract("empty batch"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(contract(format!(
                "image shape {:?} differs from {shape:?}",
                img.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(full, data)
}
