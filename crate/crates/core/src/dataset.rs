//! On-disk datasets and the sample sets built from them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, io_err, Error, Result};
use crate::model::Batch;
use crate::tensor::Tensor;
use crate::twin::{pointwise_stats, LabeledWindow, NominalLine, TwinParams};

pub const DATASET_SCHEMA: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "windows.bin";
const RECORD_HEADER: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub segments: usize,
    pub sample_rate: f64,
    pub window_len: usize,
    /// Class index to name: `healthy`, then `segment_1`...
    pub class_map: Vec<String>,
    pub windows_per_twin: usize,
    pub divergence: f64,
    pub seed: u64,
    pub nominal: NominalLine,
    pub twins: Vec<TwinParams>,
}

impl DatasetManifest {
    pub fn classes(&self) -> usize {
        self.class_map.len()
    }
}

pub fn class_map(segments: usize) -> Vec<String> {
    std::iter::once("healthy".to_string())
        .chain((1..=segments).map(|s| format!("segment_{s}")))
        .collect()
}

/// Windows in twin-major order: all conditions of twin 1, then twin 2...
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub windows: Vec<LabeledWindow>,
}

impl Dataset {
    pub fn twin_ids(&self) -> Vec<u16> {
        self.manifest.twins.iter().map(|t| t.twin_id).collect()
    }

    /// Class of every shared condition.
    pub fn condition_labels(&self) -> Vec<usize> {
        self.windows[..self.manifest.windows_per_twin]
            .iter()
            .map(|w| w.class as usize)
            .collect()
    }

    fn twin_windows(&self, id: u16) -> Result<&[LabeledWindow]> {
        let pos = self
            .manifest
            .twins
            .iter()
            .position(|t| t.twin_id == id)
            .ok_or_else(|| Error::Config(format!("twin {id} is not in the dataset (twins {:?})", self.twin_ids())))?;
        let n = self.manifest.windows_per_twin;
        Ok(&self.windows[pos * n..(pos + 1) * n])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;
        let n = self.manifest.window_len;
        let mut bytes = Vec::with_capacity(self.windows.len() * (RECORD_HEADER + 4 * n));
        for w in &self.windows {
            if w.samples.len() != n {
                return Err(contract("window length disagrees with the manifest"));
            }
            bytes.extend_from_slice(&w.class.to_le_bytes());
            bytes.extend_from_slice(&w.twin_id.to_le_bytes());
            bytes.extend_from_slice(&w.kappa.to_le_bytes());
            for s in &w.samples {
                bytes.extend_from_slice(&s.to_le_bytes());
            }
        }
        let records = dir.join(RECORDS_FILE);
        fs::write(&records, bytes).map_err(io_err(&records))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.schema_version != DATASET_SCHEMA {
            return Err(Error::Format(format!(
                "{}: dataset schema {} is not supported",
                manifest_path.display(),
                manifest.schema_version
            )));
        }
        let records = dir.join(RECORDS_FILE);
        let bytes = fs::read(&records).map_err(io_err(&records))?;
        let record = RECORD_HEADER + 4 * manifest.window_len;
        let expected = manifest.twins.len() * manifest.windows_per_twin;
        if bytes.len() != expected * record {
            return Err(Error::Format(format!(
                "{}: {} bytes, expected {} records of {record} bytes",
                records.display(),
                bytes.len(),
                expected
            )));
        }
        let f32_at = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        let windows = bytes
            .chunks_exact(record)
            .enumerate()
            .map(|(i, r)| LabeledWindow {
                class: u16::from_le_bytes([r[0], r[1]]),
                twin_id: u16::from_le_bytes([r[2], r[3]]),
                kappa: f32_at(&r[4..8]),
                samples: r[RECORD_HEADER..].chunks_exact(4).map(f32_at).collect(),
                condition: (i % manifest.windows_per_twin) as u32,
            })
            .collect();
        Ok(Self { manifest, windows })
    }

    /// Individual windows of the given twins at the given conditions.
    pub fn single_twin_set(&self, twins: &[u16], conditions: &[usize]) -> Result<SampleSet> {
        let mut set = SampleSet::empty(self.manifest.window_len);
        for &id in twins {
            let windows = self.twin_windows(id)?;
            for &c in conditions {
                let w = &windows[c];
                set.push(w.samples.iter().map(|v| *v as f64), None, w, id);
            }
        }
        Ok(set)
    }

    /// Point-wise mean and variance across twins for each condition.
    pub fn multi_twin_set(&self, twins: &[u16], conditions: &[usize]) -> Result<SampleSet> {
        if twins.len() < 2 {
            return Err(Error::Config(
                "input variance across twins needs at least two twins".into(),
            ));
        }
        let per_twin: Vec<&[LabeledWindow]> = twins.iter().map(|&id| self.twin_windows(id)).collect::<Result<_>>()?;
        let mut set = SampleSet::empty(self.manifest.window_len);
        set.variance = Some(Vec::new());
        for &c in conditions {
            let series: Vec<Vec<f64>> = per_twin
                .iter()
                .map(|w| w[c].samples.iter().map(|v| *v as f64).collect())
                .collect();
            let refs: Vec<&[f64]> = series.iter().map(|s| s.as_slice()).collect();
            let (mean, var) = pointwise_stats(&refs)?;
            set.push(mean.into_iter(), Some(var), &per_twin[0][c], 0);
        }
        Ok(set)
    }

    /// Means across twins only, for plain and HET models.
    pub fn fused_mean_set(&self, twins: &[u16], conditions: &[usize]) -> Result<SampleSet> {
        let mut set = self.multi_twin_set(twins, conditions)?;
        set.variance = None;
        Ok(set)
    }
}

/// Model inputs with labels and provenance. `twin_id` 0 marks samples
/// fused across several twins.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub window_len: usize,
    pub mean: Vec<f64>,
    pub variance: Option<Vec<f64>>,
    pub labels: Vec<usize>,
    pub kappa: Vec<f64>,
    pub twin_ids: Vec<u16>,
}

impl SampleSet {
    pub fn empty(window_len: usize) -> Self {
        Self {
            window_len,
            mean: Vec::new(),
            variance: None,
            labels: Vec::new(),
            kappa: Vec::new(),
            twin_ids: Vec::new(),
        }
    }

    fn push(&mut self, mean: impl Iterator<Item = f64>, var: Option<Vec<f64>>, w: &LabeledWindow, twin: u16) {
        self.mean.extend(mean);
        if let (Some(v), Some(acc)) = (var, self.variance.as_mut()) {
            acc.extend(v);
        }
        self.labels.push(w.class as usize);
        self.kappa.push(w.kappa as f64);
        self.twin_ids.push(twin);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn rows(&self, data: &[f64], idx: &[usize]) -> Result<Tensor> {
        let n = self.window_len;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&data[i * n..(i + 1) * n]);
        }
        Tensor::new(vec![idx.len(), n], out)
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        Ok(Batch {
            mean: self.rows(&self.mean, idx)?,
            variance: self.variance.as_ref().map(|v| self.rows(v, idx)).transpose()?,
        })
    }

    /// Average input variance over all samples and points; 0 without variances.
    pub fn mean_variance(&self) -> f64 {
        match &self.variance {
            Some(v) if !v.is_empty() => v.iter().sum::<f64>() / v.len() as f64,
            _ => 0.0,
        }
    }

    /// Replaces every input variance with `value`.
    pub fn with_fixed_variance(&self, value: f64) -> Result<Self> {
        if !(value >= 0.0) {
            return Err(contract(format!("fixed variance must be non-negative, got {value}")));
        }
        Ok(Self {
            variance: Some(vec![value; self.mean.len()]),
            ..self.clone()
        })
    }
}
