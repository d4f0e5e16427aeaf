//! Built-in benchmark task: coloured geometric shapes, solid or striped.
//!
//! Class index is `2 * shape + fill` where shape is disk, square, triangle,
//! cross or ring and fill is solid (0) or striped (1).

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::LabeledSet;
use crate::gradcore::Tensor;
use crate::par;

pub const NUM_CLASSES: usize = 10;
pub const SHAPE_NAMES: [&str; 5] = ["disk", "square", "triangle", "cross", "ring"];
const SUPERSAMPLE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            size: 32,
            train_per_class: 500,
            val_per_class: 100,
            test_per_class: 200,
            seed: 0,
        }
    }
}

pub struct Splits {
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
}

pub fn class_name(class: usize) -> String {
    let fill = if class % 2 == 0 { "solid" } else { "striped" };
    format!("{}-{fill}", SHAPE_NAMES[class / 2])
}

/// Everything needed to rasterise one sample.
#[derive(Clone, Copy, Debug)]
struct Scene {
    shape: usize,
    striped: bool,
    cx: f32,
    cy: f32,
    radius: f32,
    angle: f32,
    stripe_dir: f32,
    stripe_period: f32,
    stripe_phase: f32,
    bg: [f32; 3],
    fg: [f32; 3],
    alt: [f32; 3],
}

fn luma(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Background, fill and stripe colours. Both shape colours stand well
/// apart from the background; the stripes are a milder shade step.
fn random_colors<R: Rng>(rng: &mut R) -> [[f32; 3]; 3] {
    loop {
        let cols = [0; 3].map(|_| [0; 3].map(|_| rng.gen::<f32>()));
        let l = cols.map(luma);
        let stripe = (l[1] - l[2]).abs();
        if (l[0] - l[1]).abs() > 0.35 && (l[0] - l[2]).abs() > 0.35 && (0.2..0.35).contains(&stripe) {
            return cols;
        }
    }
}

fn sample_scene<R: Rng>(rng: &mut R, class: usize, size: usize) -> Scene {
    let s = size as f32;
    let radius = rng.gen_range(0.26..0.4) * s;
    let margin = radius * 0.9;
    let [bg, fg, alt] = random_colors(rng);
    Scene {
        shape: class / 2,
        striped: class % 2 == 1,
        cx: rng.gen_range(margin..s - margin),
        cy: rng.gen_range(margin..s - margin),
        radius,
        angle: rng.gen_range(0.0..2.0 * PI),
        stripe_dir: rng.gen_range(0.0..PI),
        stripe_period: rng.gen_range(0.25..0.32) * s,
        stripe_phase: rng.gen(),
        bg,
        fg,
        alt,
    }
}

/// Membership test in the shape's unit frame.
fn inside(shape: usize, x: f32, y: f32) -> bool {
    let r = (x * x + y * y).sqrt();
    match shape {
        0 => r <= 1.0,
        1 => x.abs().max(y.abs()) <= 0.8,
        2 => (0..3).all(|k| {
            let a = -PI / 2.0 + k as f32 * 2.0 * PI / 3.0;
            x * a.cos() + y * a.sin() <= 0.5
        }),
        3 => (x.abs() <= 0.32 && y.abs() <= 1.0) || (y.abs() <= 0.32 && x.abs() <= 1.0),
        _ => (0.48..=1.0).contains(&r),
    }
}

fn rasterise(scene: &Scene, size: usize) -> Tensor {
    let mut out = vec![0.0f32; 3 * size * size];
    let (sin, cos) = scene.angle.sin_cos();
    let (dsin, dcos) = scene.stripe_dir.sin_cos();
    let n = SUPERSAMPLE as f32;
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0f32; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f32 + (sx as f32 + 0.5) / n - scene.cx;
                    let y = py as f32 + (sy as f32 + 0.5) / n - scene.cy;
                    let lx = (cos * x + sin * y) / scene.radius;
                    let ly = (-sin * x + cos * y) / scene.radius;
                    let col = if !inside(scene.shape, lx, ly) {
                        scene.bg
                    } else if scene.striped {
                        let t = (dcos * x + dsin * y) / scene.stripe_period + scene.stripe_phase;
                        if t.rem_euclid(1.0) < 0.5 {
                            scene.fg
                        } else {
                            scene.alt
                        }
                    } else {
                        scene.fg
                    };
                    for c in 0..3 {
                        acc[c] += col[c];
                    }
                }
            }
            for c in 0..3 {
                let v = acc[c] / (n * n);
                out[(c * size + py) * size + px] = (v * 255.0).round() / 255.0;
            }
        }
    }
    Tensor::new(vec![3, size, size], out).expect("shape matches buffer")
}

fn generate_split(size: usize, per_class: usize, seed: u64) -> LabeledSet {
    // One RNG stream per image keeps the output independent of thread count.
    let n = per_class * NUM_CLASSES;
    let images = par::map_range(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let scene = sample_scene(&mut rng, i % NUM_CLASSES, size);
        rasterise(&scene, size)
    });
    let labels = (0..n).map(|i| i % NUM_CLASSES).collect();
    LabeledSet { images, labels }
}

/// Deterministically generate the train/val/test splits.
pub fn generate(spec: &TaskSpec) -> Splits {
    let mut root = ChaCha8Rng::seed_from_u64(spec.seed);
    let seeds: [u64; 3] = [root.gen(), root.gen(), root.gen()];
    Splits {
        train: generate_split(spec.size, spec.train_per_class, seeds[0]),
        val: generate_split(spec.size, spec.val_per_class, seeds[1]),
        test: generate_split(spec.size, spec.test_per_class, seeds[2]),
    }
}
