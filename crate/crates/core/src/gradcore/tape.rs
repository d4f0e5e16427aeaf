//! Reverse-mode tape. Nodes are appended in evaluation order, so walking the
//! list backwards is a valid topological order for the backward pass.

use super::kernels::{self, ConvGeom};
use super::loss;
use super::tensor::Tensor;
use crate::error::{contract, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<Vec<f32>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    WeightedSum {
        x: Var,
        coeffs: Vec<f32>,
    },
    TemperedSoftmax {
        x: Var,
        tau: f32,
    },
    KdLoss {
        pt: Var,
        ps: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batchnorm statistics measured on the current batch (train mode only).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub count: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_mut(&mut self, v: Var) -> &mut Tensor {
        &mut self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || xs[1] != ws[1] {
            return Err(contract(format!(
                "conv2d: input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        if self.shape(b) != [ws[0]] {
            return Err(contract("conv2d: bias must have one entry per output channel"));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_c: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_c: ws[0],
            kernel: ws[2],
            stride,
            pad,
        };
        if stride == 0 || geom.in_h + 2 * pad < geom.kernel || geom.in_w + 2 * pad < geom.kernel {
            return Err(contract("conv2d: kernel larger than padded input"));
        }
        let rg = self.any_grad(&[x, w, b]);
        let (out, cols) = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            rg,
        );
        let shape = vec![geom.batch, geom.out_c, geom.out_h(), geom.out_w()];
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Normalise per channel. With `running = Some((mean, var))` those
    /// statistics are used; otherwise batch statistics are computed and
    /// returned so the caller can fold them into its running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f32], &[f32])>,
        eps: f32,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(contract(format!("batch_norm: bad shapes around {xs:?}")));
        }
        let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let (mean, var, stats) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
            None => {
                let (m, v) = kernels::channel_stats(self.value(x).data(), b, c, hw);
                let stats = BatchStats {
                    mean: m.clone(),
                    var: v.clone(),
                    count: b * hw,
                };
                (m, v, Some(stats))
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0f32; xd.len()];
        let mut y = vec![0.0f32; xd.len()];
        for n in 0..b {
            for ch in 0..c {
                let off = (n * c + ch) * hw;
                for i in off..off + hw {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    y[i] = h * g[ch] + be[ch];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(xs, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: running.is_none(),
            },
            rg,
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || kernel == 0 || stride == 0 || xs[2] < kernel || xs[3] < kernel {
            return Err(contract(format!("max_pool2d: cannot pool {xs:?} with k={kernel}")));
        }
        let (y, argmax) = kernels::maxpool_forward(
            self.value(x).data(),
            xs[0] * xs[1],
            xs[2],
            xs[3],
            kernel,
            stride,
        );
        let oh = (xs[2] - kernel) / stride + 1;
        let ow = (xs[3] - kernel) / stride + 1;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![xs[0], xs[1], oh, ow], y)?,
            Op::MaxPool { x, argmax },
            rg,
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(contract("global_avg_pool expects [B,C,H,W]"));
        }
        let hw = xs[2] * xs[3];
        let y = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f32>() / hw as f32)
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![xs[0], xs[1]], y)?,
            Op::GlobalAvgPool { x },
            rg,
        ))
    }

    pub fn flatten(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        let b = t.shape()[0];
        let rest = t.numel() / b.max(1);
        let value = Tensor::new(vec![b, rest], t.into_data()).expect("same count");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Reshape { x }, rg)
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.shape(b) != [ws[0]] {
            return Err(contract(format!(
                "dense: input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        let y = kernels::dense_forward(
            batch,
            inp,
            out,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![batch, out], y)?, Op::Dense { x, w, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// `Σ xᵢ·cᵢ` against constant coefficients.
    pub fn weighted_sum(&mut self, x: Var, coeffs: Vec<f32>) -> Result<Var> {
        if coeffs.len() != self.value(x).numel() {
            return Err(contract("weighted_sum: coefficient count mismatch"));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(&coeffs)
            .map(|(a, b)| a * b)
            .sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, coeffs }, rg))
    }

    pub fn tempered_softmax(&mut self, x: Var, tau: f32) -> Result<Var> {
        let y = loss::tempered_softmax(self.value(x), tau)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(y, Op::TemperedSoftmax { x, tau }, rg))
    }

    pub fn kd_loss(&mut self, pt: Var, ps: Var) -> Result<Var> {
        let l = loss::kd_loss(self.value(pt), self.value(ps))?;
        let rg = self.any_grad(&[pt, ps]);
        Ok(self.push(Tensor::scalar(l), Op::KdLoss { pt, ps }, rg))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (l, probs) = loss::cross_entropy_with_probs(self.value(logits), labels)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(l),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Propagate d(loss)/d(node) to every node that requires a gradient.
    ///
    /// Leaf gradients accumulate across calls; interior nodes hold the
    /// gradient from the most recent call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(contract("backward: loss must be a scalar"));
        }
        if matches!(node.op, Op::Leaf) || !node.requires_grad {
            return Err(contract("backward: loss has no recorded graph"));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let inputs = self.node_backward(i, &g);
            for (v, gi) in inputs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
            let node = &mut self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                node.value.accumulate_grad(&g);
            } else {
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[i];
        let need = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (dx, dp) = kernels::conv2d_backward(
                    geom,
                    cols,
                    self.value(*w).data(),
                    g,
                    need(*x),
                    need(*w) || need(*b),
                );
                let mut out = Vec::new();
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some((dw, db)) = dp {
                    out.push((*w, dw));
                    out.push((*b, db));
                }
                out
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = node.value.shape();
                let (bsz, c, hw) = (s[0], s[1], s[2] * s[3]);
                let n = (bsz * hw) as f32;
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for nb in 0..bsz {
                    for ch in 0..c {
                        let off = (nb * c + ch) * hw;
                        for k in off..off + hw {
                            dgamma[ch] += g[k] * xhat[k];
                            dbeta[ch] += g[k];
                        }
                    }
                }
                let mut dx = vec![0.0f32; g.len()];
                for nb in 0..bsz {
                    for ch in 0..c {
                        let off = (nb * c + ch) * hw;
                        let scale = gm[ch] * inv_std[ch];
                        for k in off..off + hw {
                            dx[k] = if *batch_stats {
                                scale * (g[k] - dbeta[ch] / n - xhat[k] * dgamma[ch] / n)
                            } else {
                                scale * g[k]
                            };
                        }
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &v)| if v > 0.0 { gi } else { 0.0 })
                    .collect();
                vec![(*x, dx)]
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0f32; self.value(*x).numel()];
                for (&src, &gi) in argmax.iter().zip(g) {
                    dx[src as usize] += gi;
                }
                vec![(*x, dx)]
            }
            Op::GlobalAvgPool { x } => {
                let s = self.value(*x).shape();
                let hw = s[2] * s[3];
                let mut dx = Vec::with_capacity(self.value(*x).numel());
                for &gi in g {
                    dx.extend(std::iter::repeat(gi / hw as f32).take(hw));
                }
                vec![(*x, dx)]
            }
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::Dense { x, w, b } => {
                let xs = self.value(*x).shape();
                let (batch, inp) = (xs[0], xs[1]);
                let out = self.value(*w).shape()[0];
                let mut res = Vec::new();
                if need(*x) {
                    res.push((
                        *x,
                        kernels::dense_backward_input(batch, inp, out, self.value(*w).data(), g),
                    ));
                }
                if need(*w) || need(*b) {
                    let (dw, db) = kernels::dense_backward_params(
                        batch,
                        inp,
                        out,
                        self.value(*x).data(),
                        g,
                    );
                    res.push((*w, dw));
                    res.push((*b, db));
                }
                res
            }
            Op::Sum { x } => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::WeightedSum { x, coeffs } => {
                vec![(*x, coeffs.iter().map(|c| c * g[0]).collect())]
            }
            Op::TemperedSoftmax { x, tau } => {
                let y = node.value.data();
                let r = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0f32; y.len()];
                for ((yr, gr), dr) in y.chunks(r).zip(g.chunks(r)).zip(dx.chunks_mut(r)) {
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..r {
                        dr[k] = yr[k] * (gr[k] - dot) / tau;
                    }
                }
                vec![(*x, dx)]
            }
            Op::KdLoss { pt, ps } => {
                let t = self.value(*pt);
                let s = self.value(*ps);
                let (dpt, dps) = loss::kd_loss_grads(t, s);
                let scale = g[0];
                let mut res = Vec::new();
                if need(*ps) {
                    res.push((*ps, dps.into_iter().map(|v| v * scale).collect()));
                }
                if need(*pt) {
                    res.push((*pt, dpt.into_iter().map(|v| v * scale).collect()));
                }
                res
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let r = self.value(*logits).shape()[1];
                let bsz = labels.len() as f32;
                let mut dx = probs.clone();
                for (row, &l) in labels.iter().enumerate() {
                    dx[row * r + l] -= 1.0;
                }
                dx.iter_mut().for_each(|v| *v *= g[0] / bsz);
                vec![(*logits, dx)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_unit_input_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap(), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_on_leaf_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        assert!(tape.backward(x).is_err());
        let c = tape.leaf(Tensor::scalar(1.0), false);
        let s = tape.sum(c);
        assert!(tape.backward(s).is_err());
    }

    #[test]
    fn leaf_grads_accumulate_over_calls() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let s = tape.weighted_sum(x, vec![2.0, -1.0, 0.5]).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, -2.0, 1.0]);
    }

    #[test]
    fn one_by_one_conv_doubles() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![1, 1, 2, 2], 1.0), false);
        let w = tape.leaf(Tensor::full(vec![1, 1, 1, 1], 2.0), true);
        let b = tape.leaf(Tensor::zeros(vec![1]), true);
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0; 4]);
    }
}
