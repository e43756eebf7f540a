//! MC-dropout epistemic estimates, per-pass aleatoric variances and the
//! total-variance report.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::layers::Mode;
use crate::losses::standard_normal_draws;
use crate::model::{Batch, ModelKind, Network, Prediction};
use crate::rng::{stream, tag};
use crate::tape::softmax;

/// Default number of MC-dropout passes.
pub const DEFAULT_PASSES: usize = 50;

/// Sample mean and unbiased variance of per-pass outputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PassStatistics {
    pub mean: f64,
    pub variance: f64,
    /// Set when only one pass was available and the variance is reported as 0.
    pub single_pass: bool,
}

/// Mean and `1/(K-1)` variance of `K` pass outputs.
pub fn epistemic_variance(outputs: &[f64]) -> Result<PassStatistics> {
    let k = outputs.len();
    if k == 0 {
        return Err(contract("at least one forward pass is required"));
    }
    let mean = outputs.iter().sum::<f64>() / k as f64;
    if k == 1 {
        return Ok(PassStatistics {
            mean,
            variance: 0.0,
            single_pass: true,
        });
    }
    // Shifted by the first output so identical passes give exactly 0.
    let (s1, s2) = outputs.iter().fold((0.0, 0.0), |(s1, s2), y| {
        let d = y - outputs[0];
        (s1 + d, s2 + d * d)
    });
    Ok(PassStatistics {
        mean,
        variance: ((s2 - s1 * s1 / k as f64) / (k - 1) as f64).max(0.0),
        single_pass: false,
    })
}

/// Unbiased variance across draws of the softmax probability of `class`
/// under logits `mu + sigma * eps_t`. A single draw gives 0.
pub fn implicit_pass_variance(mu: &[f64], sigma: &[f64], class: usize, draws: usize, rng: &mut impl Rng) -> Result<f64> {
    if class >= mu.len() || mu.len() != sigma.len() {
        return Err(contract("class index or logit dimensions invalid"));
    }
    let eps = standard_normal_draws(draws, 1, mu.len(), rng)?;
    let probs: Vec<f64> = eps
        .data()
        .chunks(mu.len())
        .map(|e| {
            let logits: Vec<f64> = mu.iter().zip(sigma).zip(e).map(|((m, s), e)| m + s * e).collect();
            softmax(&logits)[class]
        })
        .collect();
    Ok(epistemic_variance(&probs)?.variance)
}

/// Aleatoric variance of one pass for the predicted class: the logit
/// variance for ADF models, the spread of softmax draws for HET models.
pub fn aleatoric_per_pass(
    kind: ModelKind,
    logits: &[f64],
    variance: Option<&[f64]>,
    class: usize,
    draws: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let variance = match (kind, variance) {
        (ModelKind::Plain, _) | (_, None) => return Err(Error::NoAleatoricChannel),
        (_, Some(v)) => v,
    };
    if class >= logits.len() || variance.len() != logits.len() {
        return Err(contract("class index or logit dimensions invalid"));
    }
    match kind {
        ModelKind::Adf => Ok(variance[class]),
        _ => {
            let sigma: Vec<f64> = variance.iter().map(|v| v.sqrt()).collect();
            implicit_pass_variance(logits, &sigma, class, draws, rng)
        }
    }
}

/// Mean of per-pass aleatoric variances.
pub fn aleatoric_aggregate(per_pass: &[f64]) -> Result<f64> {
    if per_pass.is_empty() {
        return Err(contract("no per-pass aleatoric variances"));
    }
    Ok(per_pass.iter().sum::<f64>() / per_pass.len() as f64)
}

pub fn total_variance(aleatoric: f64, epistemic: f64) -> Result<f64> {
    if !(aleatoric >= 0.0) || !(epistemic >= 0.0) {
        return Err(contract(format!("variances must be non-negative, got {aleatoric} and {epistemic}")));
    }
    Ok(aleatoric + epistemic)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub predicted_class: usize,
    pub class_probabilities: Vec<f64>,
    pub sigma2_al: f64,
    pub sigma2_ep: f64,
    pub sigma2_total: f64,
    /// Epistemic variance of every class probability.
    pub epistemic_per_class: Vec<f64>,
    pub k: usize,
    pub t: usize,
    pub single_pass: bool,
    /// False for plain models, whose aleatoric variance is reported as 0.
    pub has_aleatoric: bool,
}

impl UncertaintyReport {
    /// Predicted-class probability.
    pub fn confidence(&self) -> f64 {
        self.class_probabilities[self.predicted_class]
    }
}

/// Settings for [`analyze`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McSettings {
    pub passes: usize,
    pub draws: usize,
    pub seed: u64,
}

impl Default for McSettings {
    fn default() -> Self {
        Self {
            passes: DEFAULT_PASSES,
            draws: crate::losses::EVAL_DRAWS,
            seed: 0,
        }
    }
}

/// Runs `K` dropout-masked passes over a batch (one deterministic pass when
/// `K = 1`) and assembles a report per sample.
pub fn analyze(net: &Network, batch: &Batch, settings: McSettings) -> Result<Vec<UncertaintyReport>> {
    let k = settings.passes;
    if k == 0 {
        return Err(contract("at least one forward pass is required"));
    }
    if net.kind != ModelKind::Plain && settings.draws == 0 {
        return Err(contract("at least one logit sample is required"));
    }
    let mode = if k == 1 { Mode::Eval } else { Mode::McDropout };
    let passes: Vec<Prediction> = (0..k)
        .into_par_iter()
        .map(|p| net.predict(batch, mode, &mut stream(settings.seed, &[tag::MC_PASS, p as u64])))
        .collect::<Result<_>>()?;
    let rows = batch.mean.shape()[0];
    let classes = net.config.classes;
    let row = |t: &crate::tensor::Tensor, i: usize| t.data()[i * classes..(i + 1) * classes].to_vec();
    (0..rows)
        .map(|i| {
            let probs: Vec<Vec<f64>> = passes.iter().map(|p| softmax(&row(&p.logits, i))).collect();
            let per_class: Vec<PassStatistics> = (0..classes)
                .map(|c| epistemic_variance(&probs.iter().map(|p| p[c]).collect::<Vec<_>>()))
                .collect::<Result<_>>()?;
            let class_probabilities: Vec<f64> = per_class.iter().map(|s| s.mean).collect();
            let predicted_class = argmax(&class_probabilities);
            let sigma2_ep = per_class[predicted_class].variance;
            let has_aleatoric = net.kind != ModelKind::Plain;
            let sigma2_al = if has_aleatoric {
                let per_pass: Vec<f64> = passes
                    .iter()
                    .enumerate()
                    .map(|(p, pred)| {
                        let var = pred.variance.as_ref().map(|v| row(v, i));
                        let mut rng = stream(settings.seed, &[tag::ALEATORIC, p as u64, i as u64]);
                        aleatoric_per_pass(net.kind, &row(&pred.logits, i), var.as_deref(), predicted_class, settings.draws, &mut rng)
                    })
                    .collect::<Result<_>>()?;
                aleatoric_aggregate(&per_pass)?
            } else {
                0.0
            };
            Ok(UncertaintyReport {
                predicted_class,
                class_probabilities,
                sigma2_al,
                sigma2_ep,
                sigma2_total: total_variance(sigma2_al, sigma2_ep)?,
                epistemic_per_class: per_class.iter().map(|s| s.variance).collect(),
                k,
                t: settings.draws,
                single_pass: k == 1,
                has_aleatoric,
            })
        })
        .collect()
}

/// Per-output predictive moments of a regression model from `K` passes,
/// each giving a mean and an aleatoric variance vector.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionUncertainty {
    pub mean: Vec<f64>,
    pub aleatoric: Vec<f64>,
    pub epistemic: Vec<f64>,
    pub total: Vec<f64>,
}

pub fn regression_uncertainty(pass_means: &[Vec<f64>], pass_variances: &[Vec<f64>]) -> Result<RegressionUncertainty> {
    if pass_means.is_empty() || pass_means.len() != pass_variances.len() {
        return Err(contract("need matching, non-empty per-pass means and variances"));
    }
    let dim = pass_means[0].len();
    if pass_means.iter().chain(pass_variances).any(|v| v.len() != dim) {
        return Err(contract("per-pass outputs differ in length"));
    }
    let mut out = RegressionUncertainty {
        mean: Vec::with_capacity(dim),
        aleatoric: Vec::with_capacity(dim),
        epistemic: Vec::with_capacity(dim),
        total: Vec::with_capacity(dim),
    };
    for j in 0..dim {
        let ep = epistemic_variance(&pass_means.iter().map(|m| m[j]).collect::<Vec<_>>())?;
        let al = aleatoric_aggregate(&pass_variances.iter().map(|v| v[j]).collect::<Vec<_>>())?;
        out.mean.push(ep.mean);
        out.aleatoric.push(al);
        out.epistemic.push(ep.variance);
        out.total.push(total_variance(al, ep.variance)?);
    }
    Ok(out)
}
