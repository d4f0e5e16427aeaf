use std::f32::consts::PI;

use super::model::Model;
use crate::error::{contract, Result};

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl OptimState {
    pub fn new(model: &Model, momentum: f32, weight_decay: f32) -> Self {
        let velocity = model
            .params()
            .iter()
            .map(|p| vec![0.0; p.tensor.numel()])
            .collect();
        Self {
            momentum,
            weight_decay,
            velocity,
        }
    }
}

/// `v ← μv + (g + wd·θ); θ ← θ − lr·v`, then zero the gradients.
pub fn sgd_step(model: &mut Model, opt: &mut OptimState, lr: f32) -> Result<()> {
    if opt.velocity.len() != model.params().len() {
        return Err(contract("optimizer state was built for a different model"));
    }
    if let Some(p) = model
        .params()
        .iter()
        .find(|p| p.trainable && p.tensor.grad().is_none())
    {
        return Err(contract(format!("parameter `{}` has no gradient", p.name)));
    }
    let (mu, wd) = (opt.momentum, opt.weight_decay);
    for (p, v) in model.params_mut().iter_mut().zip(&mut opt.velocity) {
        if !p.trainable {
            continue;
        }
        let g = p.tensor.take_grad().expect("checked above");
        for ((theta, vel), gi) in p.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
            *vel = mu * *vel + (gi + wd * *theta);
            *theta -= lr * *vel;
        }
        p.tensor.set_grad(vec![0.0; g.len()]);
    }
    Ok(())
}

/// Half-period cosine decay from `initial_lr` to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial_lr: f32,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> Result<f32> {
        if epoch > self.total_epochs {
            return Err(contract(format!(
                "epoch {epoch} outside [0, {}]",
                self.total_epochs
            )));
        }
        if self.total_epochs == 0 {
            return Ok(self.initial_lr);
        }
        let frac = epoch as f32 / self.total_epochs as f32;
        Ok(self.initial_lr * 0.5 * (1.0 + (PI * frac).cos()))
    }
}
