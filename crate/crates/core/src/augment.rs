//! Label-free augmentation: RandAugment-style ops, elastic warps,
//! flip/invert/crop, and mixup.
//!
//! Images are `[3,H,W]` tensors in `[0,1]`; every op returns a new image in
//! the same range.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::curate::Example;
use crate::error::{contract, Error, Result};
use crate::gradcore::Tensor;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugLevel {
    None,
    Minimal,
    Standard,
}

impl AugLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            AugLevel::None => "none",
            AugLevel::Minimal => "minimal",
            AugLevel::Standard => "standard",
        }
    }
}

impl FromStr for AugLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AugLevel::None),
            "minimal" => Ok(AugLevel::Minimal),
            "standard" => Ok(AugLevel::Standard),
            _ => Err(Error::Config(format!(
                "unknown augmentation level `{s}` (none, minimal, standard)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub level: AugLevel,
    pub rand_n: usize,
    /// Magnitude on the 0..=30 scale.
    pub rand_m: u32,
    pub pad: usize,
    pub p_flip: f64,
    pub p_invert: f64,
    /// Largest elastic displacement, in pixels.
    pub elastic_alpha: f32,
    pub elastic_sigma: f32,
    pub mixup: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            level: AugLevel::Standard,
            rand_n: 4,
            rand_m: 14,
            pad: 4,
            p_flip: 0.5,
            p_invert: 0.5,
            elastic_alpha: 2.0,
            elastic_sigma: 3.0,
            mixup: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.p_flip) || !prob(self.p_invert) {
            return Err(Error::Config("augment probabilities must lie in [0,1]".into()));
        }
        if self.rand_m > 30 {
            return Err(Error::Config("augment.rand_m must lie in [0,30]".into()));
        }
        if !(self.elastic_alpha >= 0.0) || !(self.elastic_sigma > 0.0) {
            return Err(Error::Config("elastic alpha must be >= 0 and sigma > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RandOp {
    Identity,
    AutoContrast,
    Equalize,
    Posterize,
    Solarize,
    ColorJitter,
    Sharpness,
    Rotate,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
}

pub const RAND_OPS: [RandOp; 12] = [
    RandOp::Identity,
    RandOp::AutoContrast,
    RandOp::Equalize,
    RandOp::Posterize,
    RandOp::Solarize,
    RandOp::ColorJitter,
    RandOp::Sharpness,
    RandOp::Rotate,
    RandOp::ShearX,
    RandOp::ShearY,
    RandOp::TranslateX,
    RandOp::TranslateY,
];

fn dims(img: &Tensor) -> (usize, usize) {
    let s = img.shape();
    (s[1], s[2])
}

fn clamp01(img: &mut Tensor) {
    for x in img.data_mut() {
        *x = x.clamp(0.0, 1.0);
    }
}

/// `x + mag·(y − x)` per pixel.
fn blend(x: &Tensor, y: &Tensor, mag: f32) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| a + mag * (b - a))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn map_pixels(img: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::new(img.shape().to_vec(), img.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

/// Resample with bilinear interpolation; `src(x, y)` gives the source
/// position of output pixel centre `(x, y)`. Out-of-range reads replicate
/// the border.
fn resample(img: &Tensor, src: impl Fn(f32, f32) -> (f32, f32)) -> Tensor {
    let (h, w) = dims(img);
    let d = img.data();
    let mut out = vec![0.0f32; d.len()];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = src(x as f32, y as f32);
            let sx = sx.clamp(0.0, (w - 1) as f32);
            let sy = sy.clamp(0.0, (h - 1) as f32);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
            for c in 0..3 {
                let p = |yy: usize, xx: usize| d[(c * h + yy) * w + xx];
                let top = p(y0, x0) + fx * (p(y0, x1) - p(y0, x0));
                let bot = p(y1, x0) + fx * (p(y1, x1) - p(y1, x0));
                out[(c * h + y) * w + x] = top + fy * (bot - top);
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

/// Inverse-map an affine transform about the image centre.
fn affine(img: &Tensor, m: [f32; 4], shift: (f32, f32)) -> Tensor {
    let (h, w) = dims(img);
    let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
    resample(img, |x, y| {
        let (dx, dy) = (x - cx - shift.0, y - cy - shift.1);
        (cx + m[0] * dx + m[1] * dy, cy + m[2] * dx + m[3] * dy)
    })
}

fn auto_contrast(img: &Tensor) -> Tensor {
    let (h, w) = dims(img);
    let mut out = img.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if hi - lo > 1e-6 {
            plane.iter_mut().for_each(|x| *x = (*x - lo) / (hi - lo));
        }
    }
    out
}

fn equalize(img: &Tensor) -> Tensor {
    let (h, w) = dims(img);
    let n = h * w;
    let mut out = img.clone();
    for plane in out.data_mut().chunks_mut(n) {
        let bin = |x: f32| ((x * 255.0).round() as usize).min(255);
        let mut hist = [0usize; 256];
        plane.iter().for_each(|&x| hist[bin(x)] += 1);
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for (i, &c) in hist.iter().enumerate() {
            acc += c;
            cdf[i] = acc;
        }
        let first = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
        if n == first {
            continue;
        }
        plane
            .iter_mut()
            .for_each(|x| *x = (cdf[bin(*x)] - first) as f32 / (n - first) as f32);
    }
    out
}

fn gray(img: &Tensor) -> Vec<f32> {
    let (h, w) = dims(img);
    let d = img.data();
    let n = h * w;
    (0..n)
        .map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i])
        .collect()
}

fn color_jitter(img: &Tensor, fb: f32, fc: f32, fs: f32) -> Tensor {
    let n = img.numel() / 3;
    let mut out = map_pixels(img, |x| (x * fb).clamp(0.0, 1.0));
    let mean = gray(&out).iter().sum::<f32>() / n as f32;
    out.data_mut()
        .iter_mut()
        .for_each(|x| *x = (mean + (*x - mean) * fc).clamp(0.0, 1.0));
    let g = gray(&out);
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        *x = g[i % n] + (*x - g[i % n]) * fs;
    }
    out
}

fn smooth3(img: &Tensor) -> Tensor {
    let (h, w) = dims(img);
    let d = img.data();
    let mut out = img.clone();
    let o = out.data_mut();
    // Centre weight 5, neighbours 1, border pixels untouched.
    for c in 0..3 {
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let mut s = 4.0 * d[(c * h + y) * w + x];
                for (dy, dx) in [(0, 0), (0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1), (2, 2), (1, 1)] {
                    s += d[(c * h + y + dy - 1) * w + x + dx - 1];
                }
                o[(c * h + y) * w + x] = s / 13.0;
            }
        }
    }
    out
}

fn signed<R: Rng + ?Sized>(rng: &mut R) -> f32 {
    if rng.gen_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

/// Apply one op at magnitude `mag` in `[0,1]`.
pub fn apply_op<R: Rng + ?Sized>(img: &Tensor, op: RandOp, mag: f32, rng: &mut R) -> Tensor {
    let (h, w) = dims(img);
    let mut out = match op {
        RandOp::Identity => img.clone(),
        RandOp::AutoContrast => blend(img, &auto_contrast(img), mag),
        RandOp::Equalize => blend(img, &equalize(img), mag),
        RandOp::Posterize => {
            let bits = 8 - (4.0 * mag).round() as i32;
            if bits >= 8 {
                img.clone()
            } else {
                let levels = (1 << bits) as f32;
                map_pixels(img, |x| (x * levels).floor().min(levels - 1.0) / levels)
            }
        }
        RandOp::Solarize => {
            let thr = 1.0 - mag;
            map_pixels(img, |x| if x > thr { 1.0 - x } else { x })
        }
        RandOp::ColorJitter => {
            let f = [0; 3].map(|_| 1.0 + 0.9 * mag * rng.gen_range(-1.0f32..=1.0));
            color_jitter(img, f[0], f[1], f[2])
        }
        RandOp::Sharpness => {
            let f = 1.0 + 0.9 * mag * rng.gen_range(-1.0f32..=1.0);
            let blur = smooth3(img);
            blend(&blur, img, f)
        }
        RandOp::Rotate => {
            let a = signed(rng) * mag * 30f32.to_radians();
            let (s, c) = a.sin_cos();
            affine(img, [c, s, -s, c], (0.0, 0.0))
        }
        RandOp::ShearX => affine(img, [1.0, signed(rng) * 0.3 * mag, 0.0, 1.0], (0.0, 0.0)),
        RandOp::ShearY => affine(img, [1.0, 0.0, signed(rng) * 0.3 * mag, 1.0], (0.0, 0.0)),
        RandOp::TranslateX => {
            let t = signed(rng) * 0.3 * mag * w as f32;
            affine(img, [1.0, 0.0, 0.0, 1.0], (t, 0.0))
        }
        RandOp::TranslateY => {
            let t = signed(rng) * 0.3 * mag * h as f32;
            affine(img, [1.0, 0.0, 0.0, 1.0], (0.0, t))
        }
    };
    clamp01(&mut out);
    out
}

/// `n` ops drawn uniformly with replacement, magnitude `m/30`.
pub fn rand_augment<R: Rng + ?Sized>(img: &Tensor, n: usize, m: u32, rng: &mut R) -> Tensor {
    let mag = m.min(30) as f32 / 30.0;
    let mut out = img.clone();
    for _ in 0..n {
        let op = RAND_OPS[rng.gen_range(0..RAND_OPS.len())];
        out = apply_op(&out, op, mag, rng);
    }
    out
}

fn gaussian_blur(field: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f32 = kernel.iter().sum();
    let at = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|k| kernel[(k + r) as usize] * field[y * w + at(x as isize + k, w)])
                .sum::<f32>()
                / norm;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|k| kernel[(k + r) as usize] * tmp[at(y as isize + k, h) * w + x])
                .sum::<f32>()
                / norm;
        }
    }
    out
}

/// Smoothed random displacement field `(dx, dy)`, peak magnitude `alpha`.
pub fn elastic_field<R: Rng + ?Sized>(h: usize, w: usize, alpha: f32, sigma: f32, rng: &mut R) -> (Vec<f32>, Vec<f32>) {
    let mut comp = || {
        let noise: Vec<f32> = (0..h * w).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
        let smooth = gaussian_blur(&noise, h, w, sigma.max(1e-3));
        let peak = smooth.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-12);
        smooth.into_iter().map(|v| alpha * v / peak).collect::<Vec<f32>>()
    };
    let dx = comp();
    let dy = comp();
    (dx, dy)
}

pub fn elastic<R: Rng + ?Sized>(img: &Tensor, alpha: f32, sigma: f32, rng: &mut R) -> Tensor {
    let (h, w) = dims(img);
    let (dx, dy) = elastic_field(h, w, alpha, sigma, rng);
    if alpha == 0.0 {
        return img.clone();
    }
    let mut out = resample(img, |x, y| {
        let i = y as usize * w + x as usize;
        (x + dx[i], y + dy[i])
    });
    clamp01(&mut out);
    out
}

pub fn hflip(img: &Tensor) -> Tensor {
    let (h, w) = dims(img);
    let d = img.data();
    let mut out = vec![0.0f32; d.len()];
    for row in 0..3 * h {
        for x in 0..w {
            out[row * w + x] = d[row * w + w - 1 - x];
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Reflection-pad by `pad` and cut an `H×W` window at offset `(oy, ox)`.
pub fn pad_crop(img: &Tensor, pad: usize, oy: usize, ox: usize) -> Tensor {
    let (h, w) = dims(img);
    let d = img.data();
    let mut out = vec![0.0f32; d.len()];
    for c in 0..3 {
        for y in 0..h {
            let sy = reflect(y as isize + oy as isize - pad as isize, h);
            for x in 0..w {
                let sx = reflect(x as isize + ox as isize - pad as isize, w);
                out[(c * h + y) * w + x] = d[(c * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

fn flip_crop<R: Rng + ?Sized>(img: Tensor, cfg: &AugmentConfig, rng: &mut R) -> Tensor {
    let img = if rng.gen_bool(cfg.p_flip) { hflip(&img) } else { img };
    let (oy, ox) = (rng.gen_range(0..=2 * cfg.pad), rng.gen_range(0..=2 * cfg.pad));
    if cfg.pad == 0 {
        img
    } else {
        pad_crop(&img, cfg.pad, oy, ox)
    }
}

/// Invert with `p_invert`, mirror with `p_flip`, then pad and crop.
pub fn flip_invert_crop<R: Rng + ?Sized>(img: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Tensor {
    let img = if rng.gen_bool(cfg.p_invert) {
        map_pixels(img, |x| 1.0 - x)
    } else {
        img.clone()
    };
    flip_crop(img, cfg, rng)
}

/// Apply the configured augmentation level; the target is untouched.
pub fn augment_pipeline<R: Rng + ?Sized>(ex: &Example, cfg: &AugmentConfig, rng: &mut R) -> Example {
    let image = match cfg.level {
        AugLevel::None => ex.image.clone(),
        AugLevel::Minimal => flip_crop(ex.image.clone(), cfg, rng),
        AugLevel::Standard => {
            let x = rand_augment(&ex.image, cfg.rand_n, cfg.rand_m, rng);
            let x = elastic(&x, cfg.elastic_alpha, cfg.elastic_sigma, rng);
            flip_invert_crop(&x, cfg, rng)
        }
    };
    Example { image, ..ex.clone() }
}

/// Per-example RNG stream `i` of a batch seed.
pub fn example_rng(batch_seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
    rng.set_stream(i as u64);
    rng
}

/// Augment every example with its own stream split from `batch_seed`.
pub fn augment_batch(batch: &[Example], cfg: &AugmentConfig, batch_seed: u64) -> Vec<Example> {
    par::map_range(batch.len(), |i| {
        augment_pipeline(&batch[i], cfg, &mut example_rng(batch_seed, i))
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixupDraw {
    pub lambda: f32,
    pub partner: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mixed {
    pub image: Tensor,
    pub target: usize,
    pub draw: MixupDraw,
}

/// `λ·a + (1−λ)·b`, target of the dominant side (ties go to `a`).
pub fn mix_pair(a: &Example, b: &Example, lambda: f32) -> Mixed {
    let data = a
        .image
        .data()
        .iter()
        .zip(b.image.data())
        .map(|(&x, &y)| (lambda * x + (1.0 - lambda) * y).clamp(0.0, 1.0))
        .collect();
    Mixed {
        image: Tensor::new(a.image.shape().to_vec(), data).expect("same shape"),
        target: if lambda >= 0.5 { a.target } else { b.target },
        draw: MixupDraw { lambda, partner: 0 },
    }
}

pub fn mixup_batch<R: Rng + ?Sized>(batch: &[Example], rng: &mut R) -> Result<Vec<Mixed>> {
    let n = batch.len();
    if n < 2 {
        return Err(contract("mixup needs a batch of at least 2"));
    }
    Ok((0..n)
        .map(|i| {
            let lambda: f32 = rng.gen();
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            let mut m = mix_pair(&batch[i], &batch[j], lambda);
            m.draw.partner = j;
            m
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        let n = 3 * h * w;
        Tensor::new(vec![3, h, w], (0..n).map(|i| (i * 7 % n) as f32 / n as f32).collect()).unwrap()
    }

    fn ex(img: Tensor, target: usize) -> Example {
        Example { image: img, target, provenance: 0, teacher_pred: 0 }
    }

    #[test]
    fn zero_magnitude_ops_are_identity() {
        let img = ramp(9, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for op in RAND_OPS {
            let out = apply_op(&img, op, 0.0, &mut rng);
            assert!(out.max_abs_diff(&img) <= 1e-6, "{op:?}");
        }
    }

    #[test]
    fn ops_stay_in_range() {
        let img = ramp(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for op in RAND_OPS {
            for m in [0.3, 1.0] {
                let out = apply_op(&img, op, m, &mut rng);
                assert!(out.data().iter().all(|x| (0.0..=1.0).contains(x)), "{op:?}");
            }
        }
    }

    #[test]
    fn flip_twice_and_invert() {
        let img = ramp(4, 5);
        assert_eq!(hflip(&hflip(&img)), img);
        let cfg = AugmentConfig { p_flip: 0.0, p_invert: 1.0, pad: 0, ..Default::default() };
        let one = Tensor::full(vec![3, 2, 2], 0.2);
        let out = flip_invert_crop(&one, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(out.data().iter().all(|&x| (x - 0.8).abs() < 1e-6));
    }

    #[test]
    fn reflection_crop_offsets() {
        let img = ramp(4, 4);
        assert_eq!(pad_crop(&img, 2, 2, 2), img);
        let shifted = pad_crop(&img, 1, 0, 1);
        // Row 0 of the crop reads source row 1 (reflection of -1).
        assert_eq!(shifted.data()[0], img.data()[4]);
    }

    #[test]
    fn elastic_zero_alpha_and_monotone_field() {
        let img = ramp(12, 12);
        assert_eq!(elastic(&img, 0.0, 3.0, &mut ChaCha8Rng::seed_from_u64(4)), img);
        let mean = |a: f32| {
            let (dx, dy) = elastic_field(12, 12, a, 3.0, &mut ChaCha8Rng::seed_from_u64(9));
            dx.iter().zip(&dy).map(|(x, y)| x.hypot(*y)).sum::<f32>() / dx.len() as f32
        };
        assert!(mean(1.0) < mean(2.0) && mean(2.0) < mean(4.0));
    }

    #[test]
    fn mixup_endpoints() {
        let a = ex(Tensor::full(vec![3, 2, 2], 0.2), 1);
        let b = ex(Tensor::full(vec![3, 2, 2], 0.6), 2);
        let m = mix_pair(&a, &b, 1.0);
        assert_eq!((m.image.clone(), m.target), (a.image.clone(), 1));
        let m = mix_pair(&a, &b, 0.5);
        assert!(m.image.data().iter().all(|&x| (x - 0.4).abs() < 1e-6));
        assert_eq!(m.target, 1);
        assert_eq!(mix_pair(&a, &b, 0.3).target, 2);
    }

    #[test]
    fn mixup_needs_two_and_avoids_self() {
        let a = ex(Tensor::full(vec![3, 2, 2], 0.2), 1);
        assert!(mixup_batch(&[a.clone()], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let batch: Vec<Example> = (0..5).map(|t| ex(Tensor::full(vec![3, 2, 2], t as f32 / 5.0), t)).collect();
        let out = mixup_batch(&batch, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for (i, m) in out.iter().enumerate() {
            assert_ne!(m.draw.partner, i);
            let want = if m.draw.lambda >= 0.5 { i } else { m.draw.partner };
            assert_eq!(m.target, want);
        }
    }

    #[test]
    fn levels() {
        let e = ex(ramp(8, 8), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = AugmentConfig { level: AugLevel::None, ..Default::default() };
        assert_eq!(augment_pipeline(&e, &none, &mut rng), e);
        let minimal = AugmentConfig { level: AugLevel::Minimal, pad: 0, ..Default::default() };
        let out = augment_pipeline(&e, &minimal, &mut rng);
        let mut a = out.image.data().to_vec();
        let mut b = e.image.data().to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
        assert_eq!(out.target, 3);
    }

    #[test]
    fn level_names_parse() {
        for l in [AugLevel::None, AugLevel::Minimal, AugLevel::Standard] {
            assert_eq!(l.as_str().parse::<AugLevel>().unwrap(), l);
        }
        assert!("heavy".parse::<AugLevel>().is_err());
    }
}
