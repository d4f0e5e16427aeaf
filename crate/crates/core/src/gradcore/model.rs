use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::tape::{BatchStats, Tape, Var};
use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm2d {
        channels: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Flatten,
    Dense {
        out_features: usize,
    },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                pad,
            } => write!(f, "conv2d {out_channels} {kernel} {stride} {pad}"),
            LayerSpec::BatchNorm2d { channels } => write!(f, "batchnorm2d {channels}"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::MaxPool2d { kernel, stride } => write!(f, "maxpool2d {kernel} {stride}"),
            LayerSpec::GlobalAvgPool => f.write_str("avgpool-global"),
            LayerSpec::Flatten => f.write_str("flatten"),
            LayerSpec::Dense { out_features } => write!(f, "dense {out_features}"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut it = s.split_whitespace();
        let kind = it.next().unwrap_or("");
        let nums: Vec<usize> = it
            .map(|t| t.parse().map_err(|_| Error::Format(format!("bad number in `{s}`"))))
            .collect::<Result<_>>()?;
        let want = |n: usize| {
            if nums.len() == n {
                Ok(())
            } else {
                Err(Error::Format(format!("`{kind}` expects {n} field(s): `{s}`")))
            }
        };
        Ok(match kind {
            "conv2d" => {
                want(4)?;
                LayerSpec::Conv2d {
                    out_channels: nums[0],
                    kernel: nums[1],
                    stride: nums[2],
                    pad: nums[3],
                }
            }
            "batchnorm2d" => {
                want(1)?;
                LayerSpec::BatchNorm2d { channels: nums[0] }
            }
            "relu" => {
                want(0)?;
                LayerSpec::Relu
            }
            "maxpool2d" => {
                want(2)?;
                LayerSpec::MaxPool2d {
                    kernel: nums[0],
                    stride: nums[1],
                }
            }
            "avgpool-global" => {
                want(0)?;
                LayerSpec::GlobalAvgPool
            }
            "flatten" => {
                want(0)?;
                LayerSpec::Flatten
            }
            "dense" => {
                want(1)?;
                LayerSpec::Dense {
                    out_features: nums[0],
                }
            }
            _ => return Err(Error::Format(format!("unknown layer `{s}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Batchnorm running statistics are stored as non-trainable parameters.
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Spatial(usize, usize, usize),
    Flat(usize),
}

/// Parameter slots of one layer, as indices into `Model::params`.
#[derive(Clone, Debug, PartialEq)]
enum Slots {
    None,
    Affine { weight: usize, bias: usize },
    Norm { gamma: usize, beta: usize, mean: usize, var: usize },
}

/// A sequential classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    slots: Vec<Slots>,
    params: Vec<Param>,
    num_classes: usize,
    mode: Mode,
}

/// What a forward pass left on the tape.
pub struct ForwardPass {
    pub logits: Var,
    params: Vec<Var>,
    bn_stats: Vec<(usize, BatchStats)>,
}

impl Model {
    /// Build with He-uniform weights and zero biases drawn from `rng`.
    pub fn new<R: Rng + ?Sized>(input_shape: [usize; 3], layers: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeroed(input_shape, layers)?;
        for (layer, slots) in model.layers.iter().zip(&model.slots) {
            if let Slots::Affine { weight, .. } = slots {
                let w = &mut model.params[*weight].tensor;
                let fan_in = match layer {
                    LayerSpec::Conv2d { .. } => w.shape()[1] * w.shape()[2] * w.shape()[3],
                    _ => w.shape()[1],
                };
                let bound = (6.0 / fan_in as f32).sqrt();
                for v in w.data_mut() {
                    *v = rng.gen_range(-bound..bound);
                }
            }
        }
        Ok(model)
    }

    /// Validate the layer list and allocate parameters. Weights are zero,
    /// batchnorm scales one.
    pub fn zeroed(input_shape: [usize; 3], layers: Vec<LayerSpec>) -> Result<Self> {
        let [c, h, w] = input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(contract(format!("input shape {input_shape:?} has a zero dimension")));
        }
        let mut shape = Shape::Spatial(c, h, w);
        let mut params = Vec::new();
        let mut slots = Vec::with_capacity(layers.len());
        let bad = |layer: usize, message: String| Error::Shape { layer, message };
        for (i, layer) in layers.iter().enumerate() {
            let mut add = |suffix: &str, shape: Vec<usize>, fill: f32, trainable: bool| {
                params.push(Param {
                    name: format!("{i}.{suffix}"),
                    tensor: Tensor::full(shape, fill),
                    trainable,
                });
                params.len() - 1
            };
            let slot;
            shape = match (*layer, shape) {
                (
                    LayerSpec::Conv2d {
                        out_channels,
                        kernel,
                        stride,
                        pad,
                    },
                    Shape::Spatial(c, h, w),
                ) => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(bad(i, "conv2d fields must be positive".into()));
                    }
                    if h + 2 * pad < kernel || w + 2 * pad < kernel {
                        return Err(bad(i, format!("kernel {kernel} exceeds padded input {h}x{w}")));
                    }
                    let weight = add("weight", vec![out_channels, c, kernel, kernel], 0.0, true);
                    let bias = add("bias", vec![out_channels], 0.0, true);
                    slot = Slots::Affine { weight, bias };
                    Shape::Spatial(
                        out_channels,
                        (h + 2 * pad - kernel) / stride + 1,
                        (w + 2 * pad - kernel) / stride + 1,
                    )
                }
                (LayerSpec::BatchNorm2d { channels }, Shape::Spatial(c, h, w)) => {
                    if channels != c {
                        return Err(bad(i, format!("batchnorm2d over {channels} channels, input has {c}")));
                    }
                    let gamma = add("weight", vec![c], 1.0, true);
                    let beta = add("bias", vec![c], 0.0, true);
                    let mean = add("running_mean", vec![c], 0.0, false);
                    let var = add("running_var", vec![c], 1.0, false);
                    slot = Slots::Norm { gamma, beta, mean, var };
                    Shape::Spatial(c, h, w)
                }
                (LayerSpec::Relu, s) => {
                    slot = Slots::None;
                    s
                }
                (LayerSpec::MaxPool2d { kernel, stride }, Shape::Spatial(c, h, w)) => {
                    if kernel == 0 || stride == 0 || h < kernel || w < kernel {
                        return Err(bad(i, format!("cannot pool {h}x{w} with kernel {kernel}")));
                    }
                    slot = Slots::None;
                    Shape::Spatial(c, (h - kernel) / stride + 1, (w - kernel) / stride + 1)
                }
                (LayerSpec::GlobalAvgPool, Shape::Spatial(c, _, _)) => {
                    slot = Slots::None;
                    Shape::Flat(c)
                }
                (LayerSpec::Flatten, Shape::Spatial(c, h, w)) => {
                    slot = Slots::None;
                    Shape::Flat(c * h * w)
                }
                (LayerSpec::Dense { out_features }, Shape::Flat(n)) => {
                    if out_features == 0 {
                        return Err(bad(i, "dense needs at least one output".into()));
                    }
                    let weight = add("weight", vec![out_features, n], 0.0, true);
                    let bias = add("bias", vec![out_features], 0.0, true);
                    slot = Slots::Affine { weight, bias };
                    Shape::Flat(out_features)
                }
                (layer, s) => {
                    return Err(bad(i, format!("`{layer}` cannot follow an output of shape {s:?}")));
                }
            };
            slots.push(slot);
        }
        let num_classes = match shape {
            Shape::Flat(n) => n,
            Shape::Spatial(..) => {
                return Err(bad(
                    layers.len().saturating_sub(1),
                    "model must end in a flat [classes] output".into(),
                ))
            }
        };
        Ok(Self {
            input_shape,
            layers,
            slots,
            params,
            num_classes,
            mode: Mode::Train,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.clear_grad());
    }

    /// Record the network on `tape`. With `track_params` every trainable
    /// parameter becomes a gradient-carrying leaf.
    pub fn forward(&self, tape: &mut Tape, input: Var, track_params: bool) -> Result<ForwardPass> {
        let s = tape.value(input).shape();
        let [c, h, w] = self.input_shape;
        if s.len() != 4 || s[0] == 0 || s[1..] != [c, h, w] {
            return Err(Error::Shape {
                layer: 0,
                message: format!("input {s:?} does not match declared [B,{c},{h},{w}]"),
            });
        }
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            vars.push(tape.leaf(p.tensor.clone().without_grad(), track_params && p.trainable));
        }
        let mut bn_stats = Vec::new();
        let mut x = input;
        let at = |i: usize| move |e: Error| match e {
            Error::Contract(message) => Error::Shape { layer: i, message },
            other => other,
        };
        for (i, (layer, slots)) in self.layers.iter().zip(&self.slots).enumerate() {
            x = match (*layer, slots) {
                (LayerSpec::Conv2d { stride, pad, .. }, Slots::Affine { weight, bias }) => {
                    tape.conv2d(x, vars[*weight], vars[*bias], stride, pad).map_err(at(i))?
                }
                (LayerSpec::BatchNorm2d { .. }, Slots::Norm { gamma, beta, mean, var }) => {
                    let running = match self.mode {
                        Mode::Eval => Some((
                            self.params[*mean].tensor.data(),
                            self.params[*var].tensor.data(),
                        )),
                        Mode::Train => None,
                    };
                    let (y, stats) = tape
                        .batch_norm(x, vars[*gamma], vars[*beta], running, BN_EPS)
                        .map_err(at(i))?;
                    if let Some(st) = stats {
                        bn_stats.push((i, st));
                    }
                    y
                }
                (LayerSpec::Relu, _) => tape.relu(x),
                (LayerSpec::MaxPool2d { kernel, stride }, _) => {
                    tape.max_pool2d(x, kernel, stride).map_err(at(i))?
                }
                (LayerSpec::GlobalAvgPool, _) => tape.global_avg_pool(x).map_err(at(i))?,
                (LayerSpec::Flatten, _) => tape.flatten(x),
                (LayerSpec::Dense { .. }, Slots::Affine { weight, bias }) => {
                    tape.dense(x, vars[*weight], vars[*bias]).map_err(at(i))?
                }
                _ => unreachable!("slots are built alongside layers"),
            };
        }
        Ok(ForwardPass {
            logits: x,
            params: vars,
            bn_stats,
        })
    }

    /// Logits for a `[B,C,H,W]` batch without keeping a graph.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone(), false);
        let pass = self.forward(&mut tape, x, false)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Move parameter-leaf gradients from `tape` into the parameters,
    /// accumulating onto whatever is already there.
    pub fn absorb_grads(&mut self, tape: &mut Tape, pass: &ForwardPass) {
        for (p, &v) in self.params.iter_mut().zip(&pass.params) {
            if let Some(g) = tape.value_mut(v).take_grad() {
                p.tensor.accumulate_grad(&g);
            }
        }
    }

    /// Backpropagate `loss` and accumulate the parameter gradients.
    pub fn backward(&mut self, tape: &mut Tape, loss: Var, pass: &ForwardPass) -> Result<()> {
        tape.backward(loss)?;
        self.absorb_grads(tape, pass);
        Ok(())
    }

    /// Fold train-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        if self.mode != Mode::Train {
            return;
        }
        for (layer, stats) in &pass.bn_stats {
            let Slots::Norm { mean, var, .. } = self.slots[*layer] else {
                continue;
            };
            let n = stats.count as f32;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for (r, b) in self.params[mean].tensor.data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in self.params[var].tensor.data_mut().iter_mut().zip(&stats.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * unbias;
            }
        }
    }

    /// Text manifest used by checkpoints: an `input` line then one line per layer.
    pub fn manifest(&self) -> String {
        let [c, h, w] = self.input_shape;
        let mut s = format!("input {c} {h} {w}\n");
        for l in &self.layers {
            s.push_str(&l.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines
            .next()
            .ok_or_else(|| Error::Format("empty manifest".into()))?;
        let dims: Vec<usize> = head
            .strip_prefix("input ")
            .ok_or_else(|| Error::Format(format!("manifest must start with `input`, got `{head}`")))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Format(format!("bad input line `{head}`"))))
            .collect::<Result<_>>()?;
        let input: [usize; 3] = dims
            .try_into()
            .map_err(|_| Error::Format(format!("bad input line `{head}`")))?;
        let layers = lines.map(str::parse).collect::<Result<Vec<_>>>()?;
        Self::zeroed(input, layers).map_err(|e| Error::Format(e.to_string()))
    }
}

impl Tensor {
    fn without_grad(mut self) -> Self {
        self.clear_grad();
        self
    }
}

/// Conv blocks (conv3x3 → batchnorm → relu → maxpool2) then global pooling
/// and one dense classifier.
pub fn small_cnn(channels: &[usize], classes: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for (i, &c) in channels.iter().enumerate() {
        layers.push(LayerSpec::Conv2d {
            out_channels: c,
            kernel: 3,
            stride: 1,
            pad: 1,
        });
        layers.push(LayerSpec::BatchNorm2d { channels: c });
        layers.push(LayerSpec::Relu);
        if i + 1 < channels.len() {
            layers.push(LayerSpec::MaxPool2d { kernel: 2, stride: 2 });
        }
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::Dense { out_features: classes });
    layers
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_incompatible_layers() {
        let err = Model::zeroed([3, 8, 8], vec![LayerSpec::Dense { out_features: 2 }]).unwrap_err();
        assert!(matches!(err, Error::Shape { layer: 0, .. }));
        let err = Model::zeroed(
            [3, 8, 8],
            vec![
                LayerSpec::Flatten,
                LayerSpec::BatchNorm2d { channels: 3 },
            ],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shape { layer: 1, .. }));
        assert!(Model::zeroed([3, 8, 8], vec![LayerSpec::Relu]).is_err());
    }

    #[test]
    fn zero_dense_gives_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Model::new([3, 6, 6], small_cnn(&[4, 4], 5), &mut rng).unwrap();
        for p in m.params_mut() {
            if p.name.starts_with(&format!("{}.", m_last_dense())) {
                p.tensor.data_mut().fill(0.0);
            }
        }
        let x = Tensor::full(vec![2, 3, 6, 6], 0.3);
        let y = m.infer(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    fn m_last_dense() -> usize {
        small_cnn(&[4, 4], 5).len() - 1
    }

    #[test]
    fn eval_mode_is_deterministic_and_batch_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = Model::new([3, 8, 8], small_cnn(&[4, 8], 3), &mut rng).unwrap();
        m.set_mode(Mode::Eval);
        let one: Vec<f32> = (0..3 * 64).map(|i| (i as f32 * 0.37).sin() * 0.5 + 0.5).collect();
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&one);
        }
        let x = Tensor::new(vec![4, 3, 8, 8], data).unwrap();
        let a = m.infer(&x).unwrap();
        let b = m.infer(&x).unwrap();
        assert_eq!(a, b);
        let rows: Vec<&[f32]> = a.rows().collect();
        assert!(rows.iter().all(|r| *r == rows[0]));
    }

    #[test]
    fn input_mismatch_names_layer_zero() {
        let m = Model::zeroed([3, 8, 8], small_cnn(&[2], 2)).unwrap();
        let err = m.infer(&Tensor::zeros(vec![1, 1, 8, 8])).unwrap_err();
        assert!(matches!(err, Error::Shape { layer: 0, .. }));
    }

    #[test]
    fn manifest_round_trip() {
        let m = Model::zeroed([3, 16, 16], small_cnn(&[8, 16, 32], 10)).unwrap();
        let back = Model::from_manifest(&m.manifest()).unwrap();
        assert_eq!(back.layers(), m.layers());
        assert_eq!(back.input_shape(), m.input_shape());
    }

    #[test]
    fn running_stats_move_only_in_train_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Model::new([1, 4, 4], small_cnn(&[2], 2), &mut rng).unwrap();
        let x = Tensor::new(vec![2, 1, 4, 4], (0..32).map(|i| i as f32 / 8.0).collect()).unwrap();
        m.set_mode(Mode::Eval);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let pass = m.forward(&mut tape, xv, false).unwrap();
        m.update_running_stats(&pass);
        assert_eq!(m.param("1.running_mean").unwrap().tensor.data(), &[0.0, 0.0]);
        m.set_mode(Mode::Train);
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let pass = m.forward(&mut tape, xv, false).unwrap();
        m.update_running_stats(&pass);
        assert_ne!(m.param("1.running_mean").unwrap().tensor.data(), &[0.0, 0.0]);
    }
}
