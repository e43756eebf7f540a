//! Parametric leakage-current simulator with perturbed twin instances.

use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::layers::GaussianActivation;
use crate::rng::{stream, tag};
use crate::tensor::Tensor;

pub const FUNDAMENTAL_HZ: f64 = 50.0;
pub const DEFAULT_SAMPLE_RATE: f64 = 1280.0;
pub const WINDOW_SECONDS: f64 = 0.2;
pub const DEFAULT_HARMONIC: f64 = 0.1;
pub const DEFAULT_DIVERGENCE: f64 = 0.15;
pub const DEFAULT_NOISE_STD: f64 = 0.05;
/// Upper end (exclusive) of the healthy scaling range and start of the faulty one.
pub const FAULT_THRESHOLD: f64 = 2.0;
pub const HEALTHY_KAPPA_MIN: f64 = 0.8;
pub const FAULTY_KAPPA_MAX: f64 = 10.0;

/// Electrical parameters of one twin instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinParams {
    pub twin_id: u16,
    pub capacitance: Vec<f64>,
    pub phase: Vec<f64>,
    pub frequency: f64,
    pub sample_rate: f64,
    pub noise_std: f64,
    pub harmonic: f64,
}

impl TwinParams {
    pub fn segments(&self) -> usize {
        self.capacitance.len()
    }

    pub fn window_len(&self) -> usize {
        (WINDOW_SECONDS * self.sample_rate).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacitance.is_empty() || self.capacitance.len() != self.phase.len() {
            return Err(contract("a twin needs at least one segment with a capacitance and a phase"));
        }
        if self.capacitance.iter().any(|c| !(*c > 0.0)) {
            return Err(contract("capacitances must be positive"));
        }
        if !(self.sample_rate > 2.0 * self.frequency) {
            return Err(contract(format!(
                "sample rate {} does not exceed twice the frequency {}",
                self.sample_rate, self.frequency
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(contract("noise standard deviation must be non-negative"));
        }
        Ok(())
    }
}

/// Fault class (0 healthy, `s` for a fault on segment `s`) and scaling factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaultSpec {
    pub class: u16,
    pub kappa: f64,
}

impl FaultSpec {
    pub fn new(class: u16, kappa: f64, segments: usize) -> Result<Self> {
        if class as usize > segments {
            return Err(contract(format!("class {class} exceeds segment count {segments}")));
        }
        let ok = if class == 0 {
            (HEALTHY_KAPPA_MIN..FAULT_THRESHOLD).contains(&kappa)
        } else {
            (FAULT_THRESHOLD..=FAULTY_KAPPA_MAX).contains(&kappa)
        };
        if !ok {
            return Err(contract(format!("scaling factor {kappa} is outside the range of class {class}")));
        }
        Ok(Self { class, kappa })
    }

    /// Draws a scaling factor uniformly from the class range.
    pub fn draw(class: u16, segments: usize, rng: &mut impl Rng) -> Result<Self> {
        let kappa = if class == 0 {
            rng.random_range(HEALTHY_KAPPA_MIN..FAULT_THRESHOLD)
        } else {
            rng.random_range(FAULT_THRESHOLD..=FAULTY_KAPPA_MAX)
        };
        Self::new(class, kappa, segments)
    }
}

/// One simulated window with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledWindow {
    pub samples: Vec<f32>,
    pub class: u16,
    pub kappa: f32,
    pub twin_id: u16,
    /// Index of the shared operating condition within its twin.
    pub condition: u32,
}

/// Nominal line parameters that twin instances perturb.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NominalLine {
    pub capacitance: Vec<f64>,
    pub phase: Vec<f64>,
    pub frequency: f64,
    pub sample_rate: f64,
    pub noise_std: f64,
    pub harmonic: f64,
}

impl NominalLine {
    /// Segments of slowly varying capacitance whose phases advance by a
    /// fixed step along the line.
    pub fn standard(segments: usize, noise_std: f64) -> Self {
        let capacitance = (0..segments).map(|s| 1.0 + 0.2 * (s as f64 * 0.9).sin()).collect();
        let phase = (0..segments).map(|s| PHASE_STEP * s as f64).collect();
        Self {
            capacitance,
            phase,
            frequency: FUNDAMENTAL_HZ,
            sample_rate: DEFAULT_SAMPLE_RATE,
            noise_std,
            harmonic: DEFAULT_HARMONIC,
        }
    }

    pub fn segments(&self) -> usize {
        self.capacitance.len()
    }

    fn instance(&self, twin_id: u16) -> TwinParams {
        TwinParams {
            twin_id,
            capacitance: self.capacitance.clone(),
            phase: self.phase.clone(),
            frequency: self.frequency,
            sample_rate: self.sample_rate,
            noise_std: self.noise_std,
            harmonic: self.harmonic,
        }
    }
}

/// Phase advance between neighbouring segments, in radians.
pub const PHASE_STEP: f64 = 0.5;

/// `n_twins` instances with capacitances scaled by `1 + delta u` and phases
/// shifted by `delta u`, `u ~ U(-1, 1)`. Twin ids start at 1.
pub fn calibrate_twin_instances(nominal: &NominalLine, n_twins: usize, delta: f64, seed: u64) -> Result<Vec<TwinParams>> {
    if !(delta >= 0.0) {
        return Err(contract(format!("divergence must be non-negative, got {delta}")));
    }
    if n_twins == 0 || n_twins > u16::MAX as usize {
        return Err(contract("twin count must be between 1 and 65535"));
    }
    (1..=n_twins as u16)
        .map(|id| {
            let mut twin = nominal.instance(id);
            let mut rng = stream(seed, &[tag::TWINS, id as u64]);
            for c in &mut twin.capacitance {
                *c *= 1.0 + delta * rng.random_range(-1.0..1.0);
            }
            for p in &mut twin.phase {
                *p += delta * rng.random_range(-1.0..1.0);
            }
            twin.validate()?;
            Ok(twin)
        })
        .collect()
}

/// Segment amplitudes for a fault condition.
fn amplitudes(twin: &TwinParams, fault: FaultSpec) -> Vec<f64> {
    twin.capacitance
        .iter()
        .enumerate()
        .map(|(s, c)| match fault.class {
            0 => c * fault.kappa,
            f if f as usize == s + 1 => c * fault.kappa,
            _ => *c,
        })
        .collect()
}

/// The window without sensor noise.
pub fn noiseless_window(twin: &TwinParams, fault: FaultSpec) -> Vec<f64> {
    let amps = amplitudes(twin, fault);
    let w = 2.0 * std::f64::consts::PI * twin.frequency / twin.sample_rate;
    (0..twin.window_len())
        .map(|t| {
            let t = t as f64;
            let mut fundamental = 0.0;
            let mut third = 0.0;
            for (a, phi) in amps.iter().zip(&twin.phase) {
                fundamental += a * (w * t + phi).sin();
                third += a * (3.0 * w * t + 3.0 * phi).sin();
            }
            fundamental + twin.harmonic * third
        })
        .collect()
}

/// Noiseless window plus `N(0, noise_std^2)` sensor noise drawn from `rng`.
pub fn simulate_window_f64(twin: &TwinParams, fault: FaultSpec, rng: &mut impl Rng) -> Vec<f64> {
    let mut x = noiseless_window(twin, fault);
    for v in &mut x {
        let e: f64 = rng.sample(StandardNormal);
        *v += twin.noise_std * e;
    }
    x
}

pub fn simulate_window(twin: &TwinParams, fault: FaultSpec, rng: &mut impl Rng) -> LabeledWindow {
    LabeledWindow {
        samples: simulate_window_f64(twin, fault, rng).into_iter().map(|v| v as f32).collect(),
        class: fault.class,
        kappa: fault.kappa as f32,
        twin_id: twin.twin_id,
        condition: 0,
    }
}

/// The operating conditions shared by every twin: a balanced, shuffled class
/// sequence and a scaling factor per condition.
pub fn conditions(segments: usize, count: usize, seed: u64) -> Result<Vec<FaultSpec>> {
    let classes = segments + 1;
    if count < classes {
        return Err(contract(format!("{count} windows per twin cannot cover {classes} classes")));
    }
    let mut labels: Vec<u16> = (0..count).map(|i| (i % classes) as u16).collect();
    labels.shuffle(&mut stream(seed, &[tag::CLASS_ORDER]));
    labels
        .iter()
        .enumerate()
        .map(|(i, &c)| FaultSpec::draw(c, segments, &mut stream(seed, &[tag::CONDITION, i as u64])))
        .collect()
}

fn noise_stream(seed: u64, condition: usize) -> rand_chacha::ChaCha8Rng {
    stream(seed, &[tag::CONDITION, condition as u64, 1])
}

/// Windows for every twin under the shared conditions, twin-major order.
/// Sensor noise depends on the condition only, so twins differ solely
/// through their parameters.
pub fn generate_dataset(twins: &[TwinParams], per_twin: usize, seed: u64) -> Result<Vec<LabeledWindow>> {
    let segments = twins.first().ok_or_else(|| contract("no twins"))?.segments();
    if twins.iter().any(|t| t.segments() != segments || t.window_len() != twins[0].window_len()) {
        return Err(contract("twins disagree on segment count or window length"));
    }
    let conds = conditions(segments, per_twin, seed)?;
    Ok(twins
        .par_iter()
        .flat_map_iter(|twin| {
            conds.iter().enumerate().map(move |(i, f)| {
                let mut w = simulate_window(twin, *f, &mut noise_stream(seed, i));
                w.condition = i as u32;
                w
            })
        })
        .collect())
}

/// Point-wise mean and unbiased variance of equally long series.
pub fn pointwise_stats(series: &[&[f64]]) -> Result<(Vec<f64>, Vec<f64>)> {
    if series.len() < 2 {
        return Err(contract("variance across twins needs at least two twins"));
    }
    let n = series[0].len();
    if series.iter().any(|s| s.len() != n) {
        return Err(contract("series differ in length"));
    }
    let k = series.len() as f64;
    let mut mean = vec![0.0; n];
    for s in series {
        for (m, v) in mean.iter_mut().zip(s.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= k);
    let mut var = vec![0.0; n];
    for s in series {
        for ((acc, v), m) in var.iter_mut().zip(s.iter()).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= k - 1.0);
    Ok((mean, var))
}

/// Simulates one condition under every twin with identical sensor noise and
/// returns the point-wise mean and variance across twins.
pub fn multi_twin_stats(twins: &[TwinParams], fault: FaultSpec, noise_seed: u64) -> Result<GaussianActivation> {
    if twins.len() < 2 {
        return Err(Error::Contract("variance across twins needs at least two twins".into()));
    }
    let windows: Vec<Vec<f64>> = twins
        .iter()
        .map(|t| simulate_window_f64(t, fault, &mut stream(noise_seed, &[])))
        .collect();
    let refs: Vec<&[f64]> = windows.iter().map(|w| w.as_slice()).collect();
    let (mean, var) = pointwise_stats(&refs)?;
    GaussianActivation::new(Tensor::vector(mean), Tensor::vector(var))
}
