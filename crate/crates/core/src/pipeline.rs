//! Generation, training and evaluation of whole runs on a dataset.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::dataset::{class_map, Dataset, DatasetManifest, SampleSet, DATASET_SCHEMA};
use crate::error::{Error, Result};
use crate::eval::{
    analyze_set, eval_set, evaluate_accuracy, healthy_faulty_aleatoric, reliability_diagram, sample_records,
    variance_vs_kappa, ReliabilityBins, SampleRecord, TwinAccuracy, VarianceKappaRow,
};
use crate::model::{ArchConfig, ModelKind, Network};
use crate::training::{split_dataset, train, Split, TrainConfig};
use crate::twin::{calibrate_twin_instances, generate_dataset, NominalLine, DEFAULT_DIVERGENCE, DEFAULT_NOISE_STD};
use crate::uncertainty::McSettings;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub twins: usize,
    pub segments: usize,
    pub samples_per_twin: usize,
    pub divergence: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            twins: 3,
            segments: 6,
            samples_per_twin: 700,
            divergence: DEFAULT_DIVERGENCE,
            noise_std: DEFAULT_NOISE_STD,
            seed: 0,
        }
    }
}

pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    if cfg.segments == 0 || cfg.segments >= u16::MAX as usize {
        return Err(Error::Config("segment count must be between 1 and 65534".into()));
    }
    let nominal = NominalLine::standard(cfg.segments, cfg.noise_std);
    let twins = calibrate_twin_instances(&nominal, cfg.twins, cfg.divergence, cfg.seed)?;
    let windows = generate_dataset(&twins, cfg.samples_per_twin, cfg.seed)?;
    Ok(Dataset {
        manifest: DatasetManifest {
            schema_version: DATASET_SCHEMA,
            segments: cfg.segments,
            sample_rate: nominal.sample_rate,
            window_len: twins[0].window_len(),
            class_map: class_map(cfg.segments),
            windows_per_twin: cfg.samples_per_twin,
            divergence: cfg.divergence,
            seed: cfg.seed,
            nominal,
            twins,
        },
        windows,
    })
}

/// Train/validation/test partition of the shared conditions, seeded by the dataset.
pub fn condition_split(data: &Dataset, fractions: [f64; 3]) -> Result<Split> {
    split_dataset(&data.condition_labels(), fractions, data.manifest.seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub config: TrainConfig,
    pub train_twins: Vec<u16>,
    /// Train plain or HET models on means across the training twins.
    pub fuse: bool,
}

/// Training and validation inputs appropriate for the model kind.
pub fn training_sets(data: &Dataset, req: &TrainRequest, split: &Split) -> Result<(SampleSet, SampleSet)> {
    let twins = &req.train_twins;
    if twins.is_empty() {
        return Err(Error::Config("no training twins given".into()));
    }
    let build = |conds: &[usize]| match (req.config.kind, req.fuse) {
        (ModelKind::Adf, _) => data.multi_twin_set(twins, conds),
        (_, true) => data.fused_mean_set(twins, conds),
        (_, false) => data.single_twin_set(twins, conds),
    };
    Ok((build(&split.train)?, build(&split.val)?))
}

pub fn train_on_dataset(data: &Dataset, req: &TrainRequest) -> Result<Checkpoint> {
    req.config.validate()?;
    if req.config.kind == ModelKind::Adf && req.train_twins.len() < 2 {
        return Err(Error::Config(
            "ADF training needs at least two twins to estimate input variance".into(),
        ));
    }
    let split = condition_split(data, req.config.split)?;
    let (train_set, val_set) = training_sets(data, req, &split)?;
    let arch = ArchConfig::new(req.config.architecture, data.manifest.window_len, data.manifest.classes());
    let net = Network::new(arch.clone(), req.config.kind, req.config.seed)?;
    let outcome = train(net, &train_set, &val_set, &req.config)?;
    let header = CheckpointHeader {
        schema_version: 0,
        kind: req.config.kind,
        arch,
        train_config: req.config.clone(),
        class_map: data.manifest.class_map.clone(),
        train_twins: req.train_twins.clone(),
        input_variance_mean: train_set.mean_variance(),
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        best_val_accuracy: outcome.best_val_accuracy,
        param_count: 0,
        params: Vec::new(),
        buffers: Vec::new(),
    };
    Ok(Checkpoint::new(header, outcome.network))
}

/// Input variance used when evaluating an ADF model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedVariance {
    /// Average input variance of the evaluation set (or of the training set
    /// when the evaluation set has no variances).
    Auto,
    Value(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub eval_twins: Vec<u16>,
    pub passes: usize,
    pub draws: usize,
    pub seed: u64,
    pub fixed_variance: Option<FixedVariance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: ModelKind,
    pub eval_twins: Vec<u16>,
    pub samples_evaluated: usize,
    /// Argmax accuracy of the dropout-free mean logits.
    pub accuracy: f64,
    /// Accuracy of the MC-averaged class probabilities.
    pub mc_accuracy: f64,
    pub ece: f64,
    pub under_confident: bool,
    pub k_passes: usize,
    pub t_samples: usize,
    /// Set when a single pass was used and epistemic variances are 0.
    pub single_pass_warning: bool,
    pub fixed_variance: Option<f64>,
    pub per_twin_accuracy: Vec<TwinAccuracy>,
    pub mean_sigma2_al_healthy: Option<f64>,
    pub mean_sigma2_al_faulty: Option<f64>,
    pub samples: Vec<SampleRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub reliability: ReliabilityBins,
    pub variance_kappa: Vec<VarianceKappaRow>,
}

/// Test-split inputs for `twins`, with any fixed variance applied.
pub fn evaluation_set(ck: &Checkpoint, data: &Dataset, twins: &[u16], fixed: Option<FixedVariance>) -> Result<(SampleSet, Option<f64>)> {
    let split = condition_split(data, ck.header.train_config.split)?;
    let set = eval_set(&ck.network, data, twins, &split.test, ck.header.input_variance_mean)?;
    match (ck.network.kind, fixed) {
        (ModelKind::Adf, Some(f)) => {
            let v = match f {
                FixedVariance::Value(v) => v,
                FixedVariance::Auto if twins.len() >= 2 => set.mean_variance(),
                FixedVariance::Auto => ck.header.input_variance_mean,
            };
            Ok((set.with_fixed_variance(v)?, Some(v)))
        }
        (_, Some(_)) => Err(Error::Config("a fixed input variance applies to ADF models only".into())),
        (_, None) => Ok((set, None)),
    }
}

pub fn evaluate_checkpoint(ck: &Checkpoint, data: &Dataset, req: &EvalRequest) -> Result<EvalOutput> {
    if ck.header.class_map != data.manifest.class_map || ck.network.config.input_len != data.manifest.window_len {
        return Err(crate::error::contract("checkpoint and dataset disagree on classes or window length"));
    }
    let (set, fixed_variance) = evaluation_set(ck, data, &req.eval_twins, req.fixed_variance)?;
    let accuracy = evaluate_accuracy(&ck.network, &set)?;
    let settings = McSettings {
        passes: req.passes,
        draws: req.draws,
        seed: req.seed,
    };
    let reports = analyze_set(&ck.network, &set, settings)?;
    let records = sample_records(&reports, &set);
    let confidences: Vec<f64> = records.iter().map(|r| r.confidence.clamp(0.0, 1.0)).collect();
    let correct: Vec<bool> = records.iter().map(|r| r.pred == r.label).collect();
    let mc_accuracy = correct.iter().filter(|c| **c).count() as f64 / correct.len() as f64;
    let reliability = reliability_diagram(&confidences, &correct, 10)?;
    let variance_kappa = variance_vs_kappa(&reports, &set.kappa, &set.labels)?;
    let (healthy, faulty) = healthy_faulty_aleatoric(&reports, &set.kappa);
    let per_twin_accuracy = if req.eval_twins.len() > 1 && ck.network.kind != ModelKind::Adf {
        req.eval_twins
            .iter()
            .map(|&id| {
                let single = evaluation_set(ck, data, &[id], req.fixed_variance)?.0;
                Ok(TwinAccuracy {
                    twin_id: id,
                    accuracy: evaluate_accuracy(&ck.network, &single)?,
                })
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(EvalOutput {
        report: EvalReport {
            model: ck.network.kind,
            eval_twins: req.eval_twins.clone(),
            samples_evaluated: set.len(),
            accuracy,
            mc_accuracy,
            ece: reliability.ece,
            under_confident: reliability.under_confident,
            k_passes: req.passes,
            t_samples: req.draws,
            single_pass_warning: req.passes == 1,
            fixed_variance,
            per_twin_accuracy,
            mean_sigma2_al_healthy: healthy,
            mean_sigma2_al_faulty: faulty,
            samples: records,
        },
        reliability,
        variance_kappa,
    })
}
