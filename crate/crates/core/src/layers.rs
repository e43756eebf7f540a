//! Deterministic layers and their assumed-density-filtering counterparts.
//!
//! Each layer has two forward rules recorded on a [`Tape`]: the ordinary one
//! on activations, and a moment-matching one that maps a factorized Gaussian
//! `(mean, variance)` to the next layer's factorized Gaussian. Off-diagonal
//! covariance is dropped after every layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{channel_dims, Tensor};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

/// Per-element Gaussian over a layer's activations.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianActivation {
    pub mean: Tensor,
    pub variance: Tensor,
}

impl GaussianActivation {
    pub fn new(mean: Tensor, variance: Tensor) -> Result<Self> {
        mean.expect_same_shape(&variance, "gaussian activation")?;
        if let Some(v) = variance.data().iter().find(|v| !(**v >= 0.0)) {
            return Err(contract(format!("variance must be non-negative, found {v}")));
        }
        Ok(Self { mean, variance })
    }

    /// A point mass at `mean`.
    pub fn deterministic(mean: Tensor) -> Self {
        let variance = Tensor::zeros(mean.shape());
        Self { mean, variance }
    }
}

/// How a forward pass treats batch normalization and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and active dropout masks.
    Train,
    /// Running statistics, dropout disabled.
    Eval,
    /// Running statistics with active dropout masks (MC-dropout passes).
    McDropout,
}

impl Mode {
    fn dropout_active(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear { inputs: usize, outputs: usize },
    Conv1d { in_channels: usize, out_channels: usize, width: usize, stride: usize },
    BatchNorm { channels: usize },
    Relu,
    Dropout { p: f64 },
    Flatten,
}

/// A layer with its parameters. Linear weights are stored `[inputs, outputs]`.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Linear {
        weight: Tensor,
        bias: Tensor,
    },
    Conv1d {
        kernels: Tensor,
        bias: Tensor,
        stride: usize,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
    },
    Relu,
    Dropout {
        p: f64,
    },
    Flatten,
}

/// Batch statistics observed by a batch-norm layer during a training pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

impl Layer {
    /// Kaiming-uniform weights scaled by fan-in, zero biases.
    pub fn init(spec: &LayerSpec, rng: &mut impl Rng) -> Result<Self> {
        Ok(match *spec {
            LayerSpec::Linear { inputs, outputs } => Layer::Linear {
                weight: kaiming(&[inputs, outputs], inputs, rng),
                bias: Tensor::zeros(&[outputs]),
            },
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                width,
                stride,
            } => {
                if stride == 0 {
                    return Err(contract("conv1d stride must be at least 1"));
                }
                Layer::Conv1d {
                    kernels: kaiming(&[out_channels, in_channels, width], in_channels * width, rng),
                    bias: Tensor::zeros(&[out_channels]),
                    stride,
                }
            }
            LayerSpec::BatchNorm { channels } => Layer::BatchNorm {
                gamma: Tensor::filled(&[channels], 1.0),
                beta: Tensor::zeros(&[channels]),
                running_mean: Tensor::zeros(&[channels]),
                running_var: Tensor::filled(&[channels], 1.0),
            },
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(contract(format!("dropout probability {p} outside [0, 1)")));
                }
                Layer::Dropout { p }
            }
            LayerSpec::Flatten => Layer::Flatten,
        })
    }

    /// Linear layer with all-zero parameters.
    pub fn zero_linear(inputs: usize, outputs: usize) -> Self {
        Layer::Linear {
            weight: Tensor::zeros(&[inputs, outputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Linear { weight, .. } => LayerSpec::Linear {
                inputs: weight.shape()[0],
                outputs: weight.shape()[1],
            },
            Layer::Conv1d { kernels, stride, .. } => LayerSpec::Conv1d {
                in_channels: kernels.shape()[1],
                out_channels: kernels.shape()[0],
                width: kernels.shape()[2],
                stride: *stride,
            },
            Layer::BatchNorm { gamma, .. } => LayerSpec::BatchNorm { channels: gamma.len() },
            Layer::Relu => LayerSpec::Relu,
            Layer::Dropout { p } => LayerSpec::Dropout { p: *p },
            Layer::Flatten => LayerSpec::Flatten,
        }
    }

    /// Trainable parameters in declaration order.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Linear { weight, bias } => vec![weight, bias],
            Layer::Conv1d { kernels, bias, .. } => vec![kernels, bias],
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Linear { weight, bias } => vec![weight, bias],
            Layer::Conv1d { kernels, bias, .. } => vec![kernels, bias],
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => vec![],
        }
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<&Tensor> {
        match self {
            Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            } => vec![running_mean, running_var],
            _ => vec![],
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            } => vec![running_mean, running_var],
            _ => vec![],
        }
    }

    /// Output shape (without the batch axis) for an input of shape `input`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = || Error::Config(format!("layer {:?} cannot accept input of shape {input:?}", self.spec()));
        match (self, input) {
            (Layer::Linear { weight, .. }, [n]) if *n == weight.shape()[0] => Ok(vec![weight.shape()[1]]),
            (Layer::Conv1d { kernels, stride, .. }, [c, n]) if *c == kernels.shape()[1] => {
                let w = kernels.shape()[2];
                if *n < w {
                    return Err(Error::Window { width: w, len: *n });
                }
                Ok(vec![kernels.shape()[0], (n - w) / stride + 1])
            }
            (Layer::BatchNorm { gamma, .. }, [c] | [c, _]) if *c == gamma.len() => Ok(input.to_vec()),
            (Layer::Relu | Layer::Dropout { .. }, _) => Ok(input.to_vec()),
            (Layer::Flatten, _) => Ok(vec![input.iter().product()]),
            _ => Err(mismatch()),
        }
    }
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Parameter handles of one layer on the current tape.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub a: Option<Var>,
    pub b: Option<Var>,
}

impl LayerVars {
    pub const NONE: LayerVars = LayerVars { a: None, b: None };

    fn pair(&self) -> (Var, Var) {
        (self.a.expect("layer parameter bound"), self.b.expect("layer parameter bound"))
    }
}

/// Registers a layer's trainable parameters on `tape`.
pub fn bind_layer(tape: &mut Tape, layer: &Layer, trainable: bool) -> LayerVars {
    let mut vars = layer.params().into_iter().map(|p| tape.leaf(p.clone(), trainable));
    LayerVars {
        a: vars.next(),
        b: vars.next(),
    }
}

/// Draws a scaled Bernoulli keep-mask: `1/(1-p)` with probability `1-p`, else 0.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - p);
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Deterministic forward of one layer.
pub fn forward_layer(
    tape: &mut Tape,
    idx: usize,
    layer: &Layer,
    vars: LayerVars,
    x: Var,
    mode: Mode,
    rng: &mut impl Rng,
    stats: &mut Vec<BatchStats>,
) -> Result<Var> {
    match layer {
        Layer::Linear { .. } => {
            let (w, b) = vars.pair();
            let y = tape.matmul(x, w)?;
            tape.add_bias(y, b)
        }
        Layer::Conv1d { stride, .. } => {
            let (k, b) = vars.pair();
            let y = tape.conv1d(x, k, *stride)?;
            tape.add_bias(y, b)
        }
        Layer::BatchNorm { .. } => {
            let (scale, centered) = batchnorm_scale(tape, idx, layer, vars, x, mode, stats)?;
            let y = tape.channel_mul(centered, scale)?;
            tape.add_bias(y, vars.b.expect("beta bound"))
        }
        Layer::Relu => Ok(tape.relu(x)),
        Layer::Dropout { p } => {
            if !mode.dropout_active() || *p == 0.0 {
                return Ok(x);
            }
            let mask = dropout_mask(tape.value(x).shape(), *p, rng);
            let m = tape.constant(mask);
            tape.mul(x, m)
        }
        Layer::Flatten => flatten(tape, x),
    }
}

/// Moment-matching forward of one layer on `(mean, variance)`.
#[allow(clippy::too_many_arguments)]
pub fn forward_layer_adf(
    tape: &mut Tape,
    idx: usize,
    layer: &Layer,
    vars: LayerVars,
    mean: Var,
    var: Var,
    mode: Mode,
    rng: &mut impl Rng,
    stats: &mut Vec<BatchStats>,
) -> Result<(Var, Var)> {
    match layer {
        Layer::Linear { .. } => {
            let (w, b) = vars.pair();
            let m = tape.matmul(mean, w)?;
            let m = tape.add_bias(m, b)?;
            let w2 = tape.square(w);
            let v = tape.matmul(var, w2)?;
            Ok((m, tape.flush(v)))
        }
        Layer::Conv1d { stride, .. } => {
            let (k, b) = vars.pair();
            let m = tape.conv1d(mean, k, *stride)?;
            let m = tape.add_bias(m, b)?;
            let k2 = tape.square(k);
            let v = tape.conv1d(var, k2, *stride)?;
            Ok((m, tape.flush(v)))
        }
        Layer::BatchNorm { .. } => {
            let (scale, centered) = batchnorm_scale(tape, idx, layer, vars, mean, mode, stats)?;
            let m = tape.channel_mul(centered, scale)?;
            let m = tape.add_bias(m, vars.b.expect("beta bound"))?;
            let scale2 = tape.square(scale);
            let v = tape.channel_mul(var, scale2)?;
            Ok((m, tape.flush(v)))
        }
        Layer::Relu => {
            let (m, v) = tape.relu_adf(mean, var)?;
            Ok((m, tape.flush(v)))
        }
        Layer::Dropout { p } => {
            if !mode.dropout_active() || *p == 0.0 {
                return Ok((mean, var));
            }
            let mask = dropout_mask(tape.value(mean).shape(), *p, rng);
            let mask2 = mask.map(|k| k * k);
            let (mk, mk2) = (tape.constant(mask), tape.constant(mask2));
            Ok((tape.mul(mean, mk)?, tape.mul(var, mk2)?))
        }
        Layer::Flatten => Ok((flatten(tape, mean)?, flatten(tape, var)?)),
    }
}

fn flatten(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let batch = shape[0];
    let rest: usize = shape[1..].iter().product();
    tape.reshape(x, vec![batch, rest])
}

/// Returns the per-channel scale `gamma / sqrt(var + eps)` and the centered
/// input. Training passes use batch statistics of `x`; other passes use the
/// frozen running statistics.
fn batchnorm_scale(
    tape: &mut Tape,
    idx: usize,
    layer: &Layer,
    vars: LayerVars,
    x: Var,
    mode: Mode,
    stats: &mut Vec<BatchStats>,
) -> Result<(Var, Var)> {
    let Layer::BatchNorm {
        running_mean,
        running_var,
        ..
    } = layer
    else {
        unreachable!("batchnorm_scale called on {layer:?}");
    };
    let gamma = vars.a.expect("gamma bound");
    if mode == Mode::Train {
        let mean = tape.channel_mean(x)?;
        let centered = tape.channel_sub(x, mean)?;
        let sq = tape.square(centered);
        let var = tape.channel_mean(sq)?;
        let (outer, _, inner) = channel_dims(tape.value(x).shape())?;
        stats.push(BatchStats {
            layer: idx,
            mean: tape.value(mean).data().to_vec(),
            var: tape.value(var).data().to_vec(),
            count: outer * inner,
        });
        let shifted = tape.add_scalar(var, BATCHNORM_EPS);
        let std = tape.sqrt(shifted);
        let inv = tape.recip(std);
        Ok((tape.mul(gamma, inv)?, centered))
    } else {
        if running_var.data().iter().any(|&v| !(v > 0.0)) {
            return Err(contract("batch-norm running variance must be positive"));
        }
        let inv = running_var.map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt());
        let inv = tape.constant(inv);
        let rm = tape.constant(running_mean.clone());
        let centered = tape.channel_sub(x, rm)?;
        Ok((tape.mul(gamma, inv)?, centered))
    }
}

/// Folds observed batch statistics into a batch-norm layer's running state.
pub fn update_running_stats(layer: &mut Layer, stats: &BatchStats) {
    if let Layer::BatchNorm {
        running_mean,
        running_var,
        ..
    } = layer
    {
        let unbias = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for (r, &m) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - BATCHNORM_MOMENTUM) * *r + BATCHNORM_MOMENTUM * m;
        }
        for (r, &v) in running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - BATCHNORM_MOMENTUM) * *r + BATCHNORM_MOMENTUM * v * unbias;
        }
    }
}

/// An ordered stack of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn from_specs(specs: &[LayerSpec], rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            layers: specs.iter().map(|s| Layer::init(s, rng)).collect::<Result<_>>()?,
        })
    }

    /// Verifies the dimension chain for a per-sample input shape and returns
    /// the output shape.
    pub fn check_chain(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers.iter().try_fold(input.to_vec(), |shape, l| l.output_shape(&shape))
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<LayerVars> {
        self.layers.iter().map(|l| bind_layer(tape, l, trainable)).collect()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[LayerVars],
        x: Var,
        mode: Mode,
        rng: &mut impl Rng,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        self.layers
            .iter()
            .zip(vars)
            .enumerate()
            .try_fold(x, |h, (i, (l, v))| forward_layer(tape, i, l, *v, h, mode, rng, stats))
    }

    pub fn forward_adf(
        &self,
        tape: &mut Tape,
        vars: &[LayerVars],
        mean: Var,
        var: Var,
        mode: Mode,
        rng: &mut impl Rng,
        stats: &mut Vec<BatchStats>,
    ) -> Result<(Var, Var)> {
        self.layers
            .iter()
            .zip(vars)
            .enumerate()
            .try_fold((mean, var), |(m, v), (i, (l, lv))| {
                forward_layer_adf(tape, i, l, *lv, m, v, mode, rng, stats)
            })
    }

    /// Deterministic forward on a batch without recording gradients.
    pub fn predict(&self, x: &Tensor, mode: Mode, rng: &mut impl Rng) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, xv, mode, rng, &mut Vec::new())?;
        Ok(tape.value(out).clone())
    }

    /// Moment-matching forward on a batch without recording gradients.
    pub fn predict_adf(&self, input: &GaussianActivation, mode: Mode, rng: &mut impl Rng) -> Result<GaussianActivation> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let m = tape.constant(input.mean.clone());
        let v = tape.constant(input.variance.clone());
        let (om, ov) = self.forward_adf(&mut tape, &vars, m, v, mode, rng, &mut Vec::new())?;
        Ok(GaussianActivation {
            mean: tape.value(om).clone(),
            variance: tape.value(ov).clone(),
        })
    }
}

fn single_layer_adf(layer: Layer, input: &GaussianActivation) -> Result<GaussianActivation> {
    GaussianActivation::new(input.mean.clone(), input.variance.clone())?;
    let net = Sequential::new(vec![layer]);
    net.predict_adf(input, Mode::Eval, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))
}

/// Gaussian through `x W + b`: mean `W mean + b`, variance `(W*W) variance`.
/// Inputs are `[B, inputs]`; `weight` is `[inputs, outputs]`.
pub fn linear_adf(input: &GaussianActivation, weight: &Tensor, bias: &Tensor) -> Result<GaussianActivation> {
    single_layer_adf(
        Layer::Linear {
            weight: weight.clone(),
            bias: bias.clone(),
        },
        input,
    )
}

pub fn relu_adf(input: &GaussianActivation) -> Result<GaussianActivation> {
    single_layer_adf(Layer::Relu, input)
}

/// Channel-wise conv on `[B, C_in, N]` means; the variance path uses squared
/// kernels and no bias.
pub fn conv1d_adf(input: &GaussianActivation, kernels: &Tensor, bias: &Tensor, stride: usize) -> Result<GaussianActivation> {
    single_layer_adf(
        Layer::Conv1d {
            kernels: kernels.clone(),
            bias: bias.clone(),
            stride,
        },
        input,
    )
}

/// Batch norm as the frozen affine map given by its running statistics.
pub fn batchnorm_adf(
    input: &GaussianActivation,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
) -> Result<GaussianActivation> {
    single_layer_adf(
        Layer::BatchNorm {
            gamma: gamma.clone(),
            beta: beta.clone(),
            running_mean: running_mean.clone(),
            running_var: running_var.clone(),
        },
        input,
    )
}

/// Applies dropout to both moments: means by the scaled mask, variances by its square.
pub fn dropout_apply(input: &GaussianActivation, p: f64, rng: &mut impl Rng, active: bool) -> Result<GaussianActivation> {
    if !(0.0..1.0).contains(&p) {
        return Err(contract(format!("dropout probability {p} outside [0, 1)")));
    }
    let net = Sequential::new(vec![Layer::Dropout { p }]);
    let mode = if active { Mode::McDropout } else { Mode::Eval };
    net.predict_adf(input, mode, rng)
}
