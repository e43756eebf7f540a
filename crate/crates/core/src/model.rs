//! Fully connected and 1-D convolutional classifiers in plain, ADF and
//! heteroscedastic (HET) flavours.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{bind_layer, BatchStats, GaussianActivation, Layer, LayerSpec, LayerVars, Mode, Sequential};
use crate::rng::{stream, tag};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Deterministic network trained with cross-entropy.
    Plain,
    /// Explicit propagation of input mean/variance through every layer.
    Adf,
    /// Implicit prediction of a per-logit variance.
    Het,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Fc,
    Conv1d,
}

macro_rules! string_enum {
    ($ty:ty { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok(Self::$variant),)+
                    other => Err(Error::Config(format!("unknown {} `{other}`", stringify!($ty)))),
                }
            }
        }
    };
}

string_enum!(ModelKind { Plain => "plain", Adf => "adf", Het => "het" });
string_enum!(Architecture { Fc => "fc", Conv1d => "conv1d" });

/// Layer sizes for the two supported architectures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub architecture: Architecture,
    pub input_len: usize,
    pub classes: usize,
    pub fc_hidden: usize,
    pub conv_filters: Vec<usize>,
    pub kernel_width: usize,
    pub conv_stride: usize,
    pub conv_hidden: usize,
    pub dropout: f64,
}

impl ArchConfig {
    pub fn new(architecture: Architecture, input_len: usize, classes: usize) -> Self {
        Self {
            architecture,
            input_len,
            classes,
            fc_hidden: 50,
            conv_filters: vec![4, 2, 2, 2],
            kernel_width: 15,
            conv_stride: 1,
            conv_hidden: 100,
            dropout: 0.2,
        }
    }

    /// Per-sample input shape seen by the first layer.
    pub fn input_shape(&self) -> Vec<usize> {
        match self.architecture {
            Architecture::Fc => vec![self.input_len],
            Architecture::Conv1d => vec![1, self.input_len],
        }
    }

    /// Hidden layers; every block is followed by batch norm, ReLU and dropout.
    pub fn trunk_specs(&self) -> Vec<LayerSpec> {
        let block = |specs: &mut Vec<LayerSpec>, channels: usize| {
            specs.push(LayerSpec::BatchNorm { channels });
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::Dropout { p: self.dropout });
        };
        let mut specs = Vec::new();
        match self.architecture {
            Architecture::Fc => {
                specs.push(LayerSpec::Linear {
                    inputs: self.input_len,
                    outputs: self.fc_hidden,
                });
                block(&mut specs, self.fc_hidden);
            }
            Architecture::Conv1d => {
                let mut channels = 1;
                let mut len = self.input_len;
                for &filters in &self.conv_filters {
                    specs.push(LayerSpec::Conv1d {
                        in_channels: channels,
                        out_channels: filters,
                        width: self.kernel_width,
                        stride: self.conv_stride,
                    });
                    block(&mut specs, filters);
                    channels = filters;
                    len = if len >= self.kernel_width {
                        (len - self.kernel_width) / self.conv_stride + 1
                    } else {
                        0
                    };
                }
                specs.push(LayerSpec::Flatten);
                specs.push(LayerSpec::Linear {
                    inputs: channels * len,
                    outputs: self.conv_hidden,
                });
                block(&mut specs, self.conv_hidden);
            }
        }
        specs
    }

    /// Rejects configurations whose window is too short for the conv stack.
    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 || self.classes < 2 {
            return Err(Error::Config("need a non-empty window and at least two classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout probability {} outside [0, 1)", self.dropout)));
        }
        if self.architecture == Architecture::Conv1d {
            if self.conv_stride == 0 {
                return Err(Error::Config("conv stride must be at least 1".into()));
            }
            let mut len = self.input_len;
            for _ in &self.conv_filters {
                if len < self.kernel_width {
                    return Err(Error::Window {
                        width: self.kernel_width,
                        len,
                    });
                }
                len = (len - self.kernel_width) / self.conv_stride + 1;
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        match self.architecture {
            Architecture::Fc => self.fc_hidden,
            Architecture::Conv1d => self.conv_hidden,
        }
    }
}

/// A batch of network inputs: means `[B, n]` and, for ADF models, variances.
#[derive(Clone, Debug)]
pub struct Batch {
    pub mean: Tensor,
    pub variance: Option<Tensor>,
}

/// Output of one forward pass, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct NetOutput {
    /// Logits (plain) or logit means (ADF, HET), `[B, classes]`.
    pub logits: Var,
    /// Logit variance propagated by ADF.
    pub variance: Option<Var>,
    /// Predicted logit log-variance of the HET head.
    pub log_variance: Option<Var>,
}

/// Parameter handles of a whole network on one tape, in declaration order.
#[derive(Clone, Debug)]
pub struct BoundNetwork {
    trunk: Vec<LayerVars>,
    head: LayerVars,
    log_var_head: Option<LayerVars>,
}

impl BoundNetwork {
    /// Trainable parameter handles in declaration order.
    pub fn vars(&self) -> Vec<Var> {
        self.trunk
            .iter()
            .chain(std::iter::once(&self.head))
            .chain(self.log_var_head.iter())
            .flat_map(|lv| [lv.a, lv.b])
            .flatten()
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: ArchConfig,
    pub kind: ModelKind,
    pub trunk: Sequential,
    pub head: Layer,
    pub log_var_head: Option<Layer>,
}

impl Network {
    /// Builds a freshly initialized network; the dimension chain is checked here.
    pub fn new(config: ArchConfig, kind: ModelKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[tag::INIT]);
        let trunk = Sequential::from_specs(&config.trunk_specs(), &mut rng)?;
        let features = trunk.check_chain(&config.input_shape())?;
        if features != [config.feature_dim()] {
            return Err(Error::Config(format!(
                "trunk produces {features:?}, expected [{}]",
                config.feature_dim()
            )));
        }
        let head = Layer::init(
            &LayerSpec::Linear {
                inputs: config.feature_dim(),
                outputs: config.classes,
            },
            &mut rng,
        )?;
        // Zero log-variance map: every logit starts with unit variance.
        let log_var_head = (kind == ModelKind::Het).then(|| Layer::zero_linear(config.feature_dim(), config.classes));
        Ok(Self {
            config,
            kind,
            trunk,
            head,
            log_var_head,
        })
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.trunk
            .layers
            .iter()
            .chain(std::iter::once(&self.head))
            .chain(self.log_var_head.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.trunk
            .layers
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
            .chain(self.log_var_head.iter_mut())
    }

    /// Trainable parameters in declaration order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn buffers(&self) -> Vec<&Tensor> {
        self.layers().flat_map(|l| l.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut().flat_map(|l| l.buffers_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Names for every parameter and buffer, in declaration order.
    pub fn tensor_names(&self) -> (Vec<String>, Vec<String>) {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let named = self
            .trunk
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("trunk.{i}"), l))
            .chain(std::iter::once(("head".to_string(), &self.head)))
            .chain(self.log_var_head.iter().map(|l| ("log_var_head".to_string(), l)));
        for (prefix, layer) in named {
            let (pn, bn): (&[&str], &[&str]) = match layer {
                Layer::Linear { .. } => (&["weight", "bias"], &[]),
                Layer::Conv1d { .. } => (&["kernels", "bias"], &[]),
                Layer::BatchNorm { .. } => (&["gamma", "beta"], &["running_mean", "running_var"]),
                _ => (&[], &[]),
            };
            params.extend(pn.iter().map(|n| format!("{prefix}.{n}")));
            buffers.extend(bn.iter().map(|n| format!("{prefix}.{n}")));
        }
        (params, buffers)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundNetwork {
        BoundNetwork {
            trunk: self.trunk.bind(tape, trainable),
            head: bind_layer(tape, &self.head, trainable),
            log_var_head: self.log_var_head.as_ref().map(|l| bind_layer(tape, l, trainable)),
        }
    }

    fn shape_input(&self, tape: &mut Tape, x: &Tensor) -> Result<Var> {
        let [batch, len] = *x.shape() else {
            return Err(Error::Shape {
                op: "network input",
                lhs: x.shape().to_vec(),
                rhs: vec![self.config.input_len],
            });
        };
        if len != self.config.input_len {
            return Err(Error::Shape {
                op: "network input",
                lhs: x.shape().to_vec(),
                rhs: vec![self.config.input_len],
            });
        }
        let shaped = match self.config.architecture {
            Architecture::Fc => x.clone(),
            Architecture::Conv1d => x.reshape(vec![batch, 1, len])?,
        };
        Ok(tape.constant(shaped))
    }

    /// Records a forward pass. ADF networks require input variances.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundNetwork,
        batch: &Batch,
        mode: Mode,
        rng: &mut impl Rng,
        stats: &mut Vec<BatchStats>,
    ) -> Result<NetOutput> {
        let x = self.shape_input(tape, &batch.mean)?;
        match self.kind {
            ModelKind::Adf => {
                let var = batch
                    .variance
                    .as_ref()
                    .ok_or_else(|| Error::Config("ADF model requires input variances".into()))?;
                batch.mean.expect_same_shape(var, "adf input")?;
                let v = self.shape_input(tape, var)?;
                let (m, v) = self.trunk.forward_adf(tape, &bound.trunk, x, v, mode, rng, stats)?;
                let (m, v) = crate::layers::forward_layer_adf(
                    tape,
                    self.trunk.layers.len(),
                    &self.head,
                    bound.head,
                    m,
                    v,
                    mode,
                    rng,
                    stats,
                )?;
                Ok(NetOutput {
                    logits: m,
                    variance: Some(v),
                    log_variance: None,
                })
            }
            ModelKind::Plain | ModelKind::Het => {
                let h = self.trunk.forward(tape, &bound.trunk, x, mode, rng, stats)?;
                let idx = self.trunk.layers.len();
                let logits = crate::layers::forward_layer(tape, idx, &self.head, bound.head, h, mode, rng, stats)?;
                let log_variance = match (&self.log_var_head, bound.log_var_head) {
                    (Some(l), Some(lv)) => {
                        Some(crate::layers::forward_layer(tape, idx + 1, l, lv, h, mode, rng, stats)?)
                    }
                    _ => None,
                };
                Ok(NetOutput {
                    logits,
                    variance: None,
                    log_variance,
                })
            }
        }
    }

    /// Forward pass without gradients; returns logit means and, when the
    /// model has one, the per-logit variance.
    pub fn predict(&self, batch: &Batch, mode: Mode, rng: &mut impl Rng) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, batch, mode, rng, &mut Vec::new())?;
        let variance = match (out.variance, out.log_variance) {
            (Some(v), _) => Some(tape.value(v).clone()),
            (None, Some(s)) => Some(tape.value(s).map(f64::exp)),
            _ => None,
        };
        Ok(Prediction {
            logits: tape.value(out.logits).clone(),
            variance,
        })
    }

    /// Deterministic logits for a plain forward of `x` (dropout off).
    pub fn forward_deterministic(&self, x: &Tensor) -> Result<Tensor> {
        let mut rng = stream(0, &[]);
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = self.shape_input(&mut tape, x)?;
        let h = self.trunk.forward(&mut tape, &bound.trunk, xv, Mode::Eval, &mut rng, &mut Vec::new())?;
        let idx = self.trunk.layers.len();
        let out = crate::layers::forward_layer(&mut tape, idx, &self.head, bound.head, h, Mode::Eval, &mut rng, &mut Vec::new())?;
        Ok(tape.value(out).clone())
    }

    /// Logit moments from the ADF forward (dropout off).
    pub fn forward_adf(&self, input: &GaussianActivation) -> Result<GaussianActivation> {
        if self.kind != ModelKind::Adf {
            return Err(Error::Config(format!("forward_adf on a {} model", self.kind)));
        }
        let batch = Batch {
            mean: input.mean.clone(),
            variance: Some(input.variance.clone()),
        };
        let p = self.predict(&batch, Mode::Eval, &mut stream(0, &[]))?;
        Ok(GaussianActivation {
            mean: p.logits,
            variance: p.variance.expect("adf output has variance"),
        })
    }

    /// Applies observed batch statistics to the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        let trunk_len = self.trunk.layers.len();
        for s in stats {
            if s.layer < trunk_len {
                crate::layers::update_running_stats(&mut self.trunk.layers[s.layer], s);
            }
        }
    }

    /// Rounds every parameter and buffer to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for t in self.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        for t in self.buffers_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Logit means `[B, classes]` and optional per-logit variances.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Tensor,
    pub variance: Option<Tensor>,
}
