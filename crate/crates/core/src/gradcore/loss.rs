//! Softmax with temperature and the two training losses.

use super::tensor::Tensor;
use crate::error::{contract, Result};

/// Floor applied inside every logarithm.
pub const LOG_FLOOR: f32 = 1e-12;

fn rows_of(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [b, r] if *b > 0 && *r > 0 => Ok((*b, *r)),
        s => Err(contract(format!("{what}: expected a non-empty [B,R] tensor, got {s:?}"))),
    }
}

/// Row-wise `softmax(logits / tau)`.
pub fn tempered_softmax(logits: &Tensor, tau: f32) -> Result<Tensor> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(contract(format!("temperature must be positive, got {tau}")));
    }
    let (_, r) = rows_of(logits, "tempered_softmax")?;
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(r) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let start = out.len();
        let mut sum = 0.0f32;
        for &z in row {
            let e = ((z - max) / tau).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|v| *v /= sum);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

fn check_distributions(p: &Tensor, what: &str, r: usize) -> Result<()> {
    for (i, row) in p.data().chunks(r).enumerate() {
        let s: f32 = row.iter().sum();
        if (s - 1.0).abs() > 1e-4 || row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(contract(format!(
                "kd_loss: row {i} of {what} is not a distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

/// Batch-mean KL divergence `Σ pt·(log pt − log ps)` between teacher and
/// student distributions.
pub fn kd_loss(p_t: &Tensor, p_s: &Tensor) -> Result<f32> {
    let (b, r) = rows_of(p_t, "kd_loss")?;
    if p_s.shape() != p_t.shape() {
        return Err(contract("kd_loss: teacher and student shapes differ"));
    }
    check_distributions(p_t, "p_t", r)?;
    check_distributions(p_s, "p_s", r)?;
    let mut total = 0.0f64;
    for (&t, &s) in p_t.data().iter().zip(p_s.data()) {
        if t > 0.0 {
            total += (t as f64) * ((t as f64).ln() - (s.max(LOG_FLOOR) as f64).ln());
        }
    }
    Ok((total / b as f64) as f32)
}

/// `(∂L/∂p_t, ∂L/∂p_s)` for [`kd_loss`].
pub(crate) fn kd_loss_grads(p_t: &Tensor, p_s: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let b = p_t.shape()[0] as f32;
    let mut dt = Vec::with_capacity(p_t.numel());
    let mut ds = Vec::with_capacity(p_t.numel());
    for (&t, &s) in p_t.data().iter().zip(p_s.data()) {
        let ls = s.max(LOG_FLOOR).ln();
        dt.push((t.max(LOG_FLOOR).ln() + 1.0 - ls) / b);
        ds.push(if s > LOG_FLOOR { -t / (s * b) } else { 0.0 });
    }
    (dt, ds)
}

/// Mean negative log-likelihood of `labels` plus the softmax used to get it.
pub(crate) fn cross_entropy_with_probs(logits: &Tensor, labels: &[usize]) -> Result<(f32, Vec<f32>)> {
    let (b, r) = rows_of(logits, "cross_entropy")?;
    if labels.len() != b {
        return Err(contract(format!("cross_entropy: {b} rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= r) {
        return Err(contract(format!("cross_entropy: label {bad} outside [0,{r})")));
    }
    let probs = tempered_softmax(logits, 1.0)?.into_data();
    let mut total = 0.0f64;
    for (row, &l) in logits.data().chunks(r).zip(labels) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + row.iter().map(|&z| (z as f64 - max).exp()).sum::<f64>().ln();
        total += lse - row[l] as f64;
    }
    Ok(((total / b as f64) as f32, probs))
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    cross_entropy_with_probs(logits, labels).map(|(l, _)| l)
}
