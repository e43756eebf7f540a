//! Accuracy, reliability diagrams, variance analyses and cross-twin protocols.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SampleSet};
use crate::error::{contract, Result};
use crate::layers::Mode;
use crate::model::{ModelKind, Network};
use crate::rng::{derive_seed, stream};
use crate::training::EVAL_CHUNK;
use crate::uncertainty::{analyze, argmax, McSettings, UncertaintyReport};

/// Logit means for every sample, dropout off.
pub fn predict_logits(net: &Network, set: &SampleSet) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let c = net.config.classes;
    let mut out = Vec::with_capacity(set.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let p = net.predict(&set.batch(chunk)?, Mode::Eval, &mut stream(0, &[]))?;
        out.extend(p.logits.data().chunks(c).map(|r| r.to_vec()));
    }
    Ok(out)
}

/// Fraction of predictions equal to their labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(contract("accuracy needs equally many non-zero predictions and labels"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Argmax accuracy of the mean logits (ties go to the lowest class).
pub fn evaluate_accuracy(net: &Network, set: &SampleSet) -> Result<f64> {
    if set.is_empty() {
        return Err(contract("cannot evaluate an empty set"));
    }
    let preds: Vec<usize> = predict_logits(net, set)?.iter().map(|l| argmax(l)).collect();
    accuracy(&preds, &set.labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub low: f64,
    pub high: f64,
    /// Mean confidence; `None` for empty bins.
    pub confidence: Option<f64>,
    pub accuracy: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<ReliabilityBin>,
    pub ece: f64,
    /// At least 70% of populated bins have accuracy above confidence.
    pub under_confident: bool,
}

/// Equal-width, right-closed bins over `[0, 1]`; confidence 0 falls in the first bin.
pub fn reliability_diagram(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<ReliabilityBins> {
    if n_bins == 0 || confidences.len() != correct.len() {
        return Err(contract("need at least one bin and one flag per confidence"));
    }
    if confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(contract("confidences must lie in [0, 1]"));
    }
    let edge = |b: usize| b as f64 / n_bins as f64;
    let mut sums = vec![(0.0, 0usize, 0usize); n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = (0..n_bins).find(|&b| c <= edge(b + 1)).unwrap_or(n_bins - 1);
        sums[b].0 += c;
        sums[b].1 += ok as usize;
        sums[b].2 += 1;
    }
    let n = confidences.len() as f64;
    let mut ece = 0.0;
    let mut populated = 0;
    let mut under = 0;
    let bins = sums
        .iter()
        .enumerate()
        .map(|(b, &(conf, hits, count))| {
            let (confidence, acc) = if count > 0 {
                let conf = conf / count as f64;
                let acc = hits as f64 / count as f64;
                ece += count as f64 / n * (acc - conf).abs();
                populated += 1;
                under += (acc > conf) as usize;
                (Some(conf), Some(acc))
            } else {
                (None, None)
            };
            ReliabilityBin {
                low: edge(b),
                high: edge(b + 1),
                confidence,
                accuracy: acc,
                count,
            }
        })
        .collect();
    Ok(ReliabilityBins {
        bins,
        ece,
        under_confident: populated > 0 && under as f64 >= 0.7 * populated as f64,
    })
}

pub const KAPPA_BUCKET: f64 = 0.5;
pub const KAPPA_MIN: f64 = 0.8;
pub const KAPPA_MAX: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceKappaRow {
    pub kappa_low: f64,
    pub kappa_high: f64,
    pub mean_al: Option<f64>,
    pub mean_ep: Option<f64>,
    pub count_correct: usize,
    pub count_incorrect: usize,
}

/// Mean variances per scaling-factor bucket of width 0.5 over `[0.8, 10]`;
/// buckets are half-open except the last.
pub fn variance_vs_kappa(reports: &[UncertaintyReport], kappa: &[f64], labels: &[usize]) -> Result<Vec<VarianceKappaRow>> {
    if reports.len() != kappa.len() || reports.len() != labels.len() {
        return Err(contract("one scaling factor and label per report"));
    }
    let buckets = ((KAPPA_MAX - KAPPA_MIN) / KAPPA_BUCKET).ceil() as usize;
    let mut acc = vec![(0.0, 0.0, 0usize, 0usize); buckets];
    for ((r, &k), &l) in reports.iter().zip(kappa).zip(labels) {
        if !(KAPPA_MIN..=KAPPA_MAX).contains(&k) {
            continue;
        }
        let b = (((k - KAPPA_MIN) / KAPPA_BUCKET).floor() as usize).min(buckets - 1);
        acc[b].0 += r.sigma2_al;
        acc[b].1 += r.sigma2_ep;
        if r.predicted_class == l {
            acc[b].2 += 1;
        } else {
            acc[b].3 += 1;
        }
    }
    Ok(acc
        .iter()
        .enumerate()
        .map(|(b, &(al, ep, ok, bad))| {
            let n = ok + bad;
            let mean = |s: f64| (n > 0).then(|| s / n as f64);
            VarianceKappaRow {
                kappa_low: KAPPA_MIN + b as f64 * KAPPA_BUCKET,
                kappa_high: (KAPPA_MIN + (b + 1) as f64 * KAPPA_BUCKET).min(KAPPA_MAX),
                mean_al: mean(al),
                mean_ep: mean(ep),
                count_correct: ok,
                count_incorrect: bad,
            }
        })
        .collect())
}

/// Mean aleatoric variance of healthy (`kappa < 2`) and faulty (`kappa > 2`) samples.
pub fn healthy_faulty_aleatoric(reports: &[UncertaintyReport], kappa: &[f64]) -> (Option<f64>, Option<f64>) {
    let mean = |keep: &dyn Fn(f64) -> bool| {
        let v: Vec<f64> = reports.iter().zip(kappa).filter(|(_, k)| keep(**k)).map(|(r, _)| r.sigma2_al).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    (mean(&|k| k < 2.0), mean(&|k| k > 2.0))
}

/// MC-dropout reports for every sample, processed in fixed chunks.
pub fn analyze_set(net: &Network, set: &SampleSet, settings: McSettings) -> Result<Vec<UncertaintyReport>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for (c, chunk) in idx.chunks(EVAL_CHUNK).enumerate() {
        let s = McSettings {
            seed: derive_seed(settings.seed, &[c as u64]),
            ..settings
        };
        out.extend(analyze(net, &set.batch(chunk)?, s)?);
    }
    Ok(out)
}

/// Per-sample record of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub pred: usize,
    pub label: usize,
    pub confidence: f64,
    pub sigma2_al: f64,
    pub sigma2_ep: f64,
    pub sigma2_total: f64,
    pub kappa: f64,
    pub twin_id: u16,
}

pub fn sample_records(reports: &[UncertaintyReport], set: &SampleSet) -> Vec<SampleRecord> {
    reports
        .iter()
        .enumerate()
        .map(|(i, r)| SampleRecord {
            pred: r.predicted_class,
            label: set.labels[i],
            confidence: r.confidence(),
            sigma2_al: r.sigma2_al,
            sigma2_ep: r.sigma2_ep,
            sigma2_total: r.sigma2_total,
            kappa: set.kappa[i],
            twin_id: set.twin_ids[i],
        })
        .collect()
}

/// Evaluation inputs for the given twins: multi-twin statistics for ADF
/// models on two or more twins; otherwise individual windows, with the
/// constant `single_twin_variance` attached for ADF models.
pub fn eval_set(
    net: &Network,
    data: &Dataset,
    twins: &[u16],
    conditions: &[usize],
    single_twin_variance: f64,
) -> Result<SampleSet> {
    match net.kind {
        ModelKind::Adf if twins.len() >= 2 => data.multi_twin_set(twins, conditions),
        ModelKind::Adf => data.single_twin_set(twins, conditions)?.with_fixed_variance(single_twin_variance),
        _ => data.single_twin_set(twins, conditions),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinAccuracy {
    pub twin_id: u16,
    pub accuracy: f64,
}

/// Accuracy on each held-out twin separately.
pub fn cross_twin_eval(
    net: &Network,
    class_map: &[String],
    data: &Dataset,
    held_out: &[u16],
    conditions: &[usize],
    single_twin_variance: f64,
) -> Result<Vec<TwinAccuracy>> {
    if class_map != data.manifest.class_map.as_slice() {
        return Err(contract("checkpoint and dataset class maps differ"));
    }
    if net.config.input_len != data.manifest.window_len {
        return Err(contract("checkpoint and dataset window lengths differ"));
    }
    held_out
        .iter()
        .map(|&id| {
            let set = eval_set(net, data, &[id], conditions, single_twin_variance)?;
            Ok(TwinAccuracy {
                twin_id: id,
                accuracy: evaluate_accuracy(net, &set)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedVarianceResult {
    pub fixed_variance: f64,
    pub accuracy_per_sample: f64,
    pub accuracy_fixed: f64,
}

/// Re-evaluates an ADF model with every input variance replaced by `value`.
pub fn fixed_variance_eval(net: &Network, set: &SampleSet, value: f64) -> Result<FixedVarianceResult> {
    if net.kind != ModelKind::Adf {
        return Err(contract("fixed-variance evaluation needs an ADF model"));
    }
    Ok(FixedVarianceResult {
        fixed_variance: value,
        accuracy_per_sample: evaluate_accuracy(net, set)?,
        accuracy_fixed: evaluate_accuracy(net, &set.with_fixed_variance(value)?)?,
    })
}
