//! Independent oracles shared by the integration tests and the acceptance
//! harness: central finite differences, Monte-Carlo moment estimates and a
//! quadrature for rectified-Gaussian moments.

#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;
use twin_uq::layers::{forward_layer, forward_layer_adf, LayerVars};
use twin_uq::rng::stream;
use twin_uq::{GaussianActivation, Layer, LayerSpec, Mode, Result, Sequential, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-5;
/// At most this many coordinates per tensor are probed by finite differences.
pub const PROBES: usize = 12;

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn positive_tensor(shape: &[usize], low: f64, high: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(low..high)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Largest relative error between reverse-mode gradients of `f` and central
/// differences, over a sample of coordinates of every input.
pub fn gradient_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars).unwrap();
        tape.value(loss).item()
    };
    let mut worst: f64 = 0.0;
    let mut probe_rng = stream(inputs.len() as u64, &[0xfd]);
    for (i, t) in inputs.iter().enumerate() {
        let coords: Vec<usize> = if t.len() <= PROBES {
            (0..t.len()).collect()
        } else {
            (0..PROBES).map(|_| probe_rng.random_range(0..t.len())).collect()
        };
        for j in coords {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
        }
    }
    worst
}

/// Replaces a layer's trainable parameters with `params` (same order as `Layer::params`).
pub fn with_params(layer: &Layer, params: &[Tensor]) -> Layer {
    let mut l = layer.clone();
    for (dst, src) in l.params_mut().into_iter().zip(params) {
        *dst = src.clone();
    }
    l
}

/// Gradient check of one layer's deterministic forward, with the loss
/// `sum(r * y)` for a fixed random `r`. Inputs are `[x, params...]`.
pub fn layer_gradient_check(layer: &Layer, x: &Tensor, mode: Mode, seed: u64) -> f64 {
    let mut rng = stream(seed, &[0x1a]);
    let out_shape = {
        let net = Sequential::new(vec![layer.clone()]);
        net.predict(x, mode, &mut stream(seed, &[0xd0])).unwrap().shape().to_vec()
    };
    let r = random_tensor(&out_shape, 1.0, &mut rng);
    let mut inputs = vec![x.clone()];
    inputs.extend(layer.params().into_iter().cloned());
    gradient_check(&inputs, |tape, vars| {
        let lv = layer_vars(&vars[1..]);
        let y = forward_layer(tape, 0, layer, lv, vars[0], mode, &mut stream(seed, &[0xd0]), &mut Vec::new())?;
        weighted_sum(tape, y, &r)
    })
}

/// As [`layer_gradient_check`] for the moment-matching forward; inputs are
/// `[mean, variance, params...]` and the loss is `sum(r1 * m) + sum(r2 * v)`.
pub fn layer_adf_gradient_check(layer: &Layer, input: &GaussianActivation, mode: Mode, seed: u64) -> f64 {
    let mut rng = stream(seed, &[0x1b]);
    let out = Sequential::new(vec![layer.clone()])
        .predict_adf(input, mode, &mut stream(seed, &[0xd1]))
        .unwrap();
    let r1 = random_tensor(out.mean.shape(), 1.0, &mut rng);
    let r2 = random_tensor(out.variance.shape(), 1.0, &mut rng);
    let mut inputs = vec![input.mean.clone(), input.variance.clone()];
    inputs.extend(layer.params().into_iter().cloned());
    gradient_check(&inputs, |tape, vars| {
        let lv = layer_vars(&vars[2..]);
        let (m, v) = forward_layer_adf(tape, 0, layer, lv, vars[0], vars[1], mode, &mut stream(seed, &[0xd1]), &mut Vec::new())?;
        let a = weighted_sum(tape, m, &r1)?;
        let b = weighted_sum(tape, v, &r2)?;
        tape.add(a, b)
    })
}

fn layer_vars(vars: &[Var]) -> LayerVars {
    LayerVars {
        a: vars.first().copied(),
        b: vars.get(1).copied(),
    }
}

fn weighted_sum(tape: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(y, rv)?;
    Ok(tape.sum(p))
}

/// Random layer of the given kind together with a Gaussian input batch.
/// Variances stay well above the floor so the moments are not degenerate.
pub fn random_layer_case(spec_kind: &str, rng: &mut impl Rng) -> (Layer, GaussianActivation) {
    let batch = rng.random_range(1..=3);
    let (layer, shape) = match spec_kind {
        "linear" => {
            let (i, o) = (rng.random_range(1..=8), rng.random_range(1..=5));
            let l = Layer::init(&LayerSpec::Linear { inputs: i, outputs: o }, rng).unwrap();
            let l = with_params(&l, &[l.params()[0].clone(), random_tensor(&[o], 0.5, rng)]);
            (l, vec![batch, i])
        }
        "conv1d" => {
            let (ci, co, w) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=4));
            let stride = rng.random_range(1..=2);
            let len = w + rng.random_range(0..=6);
            let spec = LayerSpec::Conv1d {
                in_channels: ci,
                out_channels: co,
                width: w,
                stride,
            };
            let l = Layer::init(&spec, rng).unwrap();
            let l = with_params(&l, &[l.params()[0].clone(), random_tensor(&[co], 0.5, rng)]);
            (l, vec![batch, ci, len])
        }
        "batchnorm" => {
            let c = rng.random_range(1..=4);
            let spatial = rng.random_bool(0.5);
            let l = Layer::BatchNorm {
                gamma: random_tensor(&[c], 1.0, rng),
                beta: random_tensor(&[c], 1.0, rng),
                running_mean: random_tensor(&[c], 1.0, rng),
                running_var: positive_tensor(&[c], 0.2, 3.0, rng),
            };
            let shape = if spatial { vec![batch, c, rng.random_range(1..=5)] } else { vec![batch, c] };
            (l, shape)
        }
        "relu" => (Layer::Relu, vec![batch, rng.random_range(1..=6)]),
        other => panic!("unknown layer kind {other}"),
    };
    let variance = positive_tensor(&shape, 0.05, 2.0, rng);
    let mean = if matches!(layer, Layer::Relu) {
        // Below -1 sd a 10^6-sample variance estimate is too noisy to resolve
        // 3%; the deep tail is covered by the quadrature oracle instead.
        let data = variance.data().iter().map(|v| v.sqrt() * rng.random_range(-1.0..2.5)).collect();
        Tensor::new(shape.clone(), data).unwrap()
    } else {
        random_tensor(&shape, 1.5, rng)
    };
    (layer, GaussianActivation::new(mean, variance).unwrap())
}

/// Monte-Carlo mean and variance of a layer's deterministic output when each
/// input coordinate is drawn independently from `N(mean, variance)`.
pub fn mc_layer_moments(layer: &Layer, input: &GaussianActivation, samples: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    const CHUNK: usize = 20_000;
    let net = Sequential::new(vec![layer.clone()]);
    let mut rng = stream(seed, &[0x3c]);
    let per = &input.mean.shape()[1..];
    let batch = input.mean.shape()[0];
    let n_in: usize = input.mean.len();
    let sd: Vec<f64> = input.variance.data().iter().map(|v| v.sqrt()).collect();
    let (mut count, mut mean, mut m2) = (0usize, Vec::new(), Vec::new());
    let mut shape = vec![0];
    shape.extend_from_slice(per);
    while count < samples {
        let reps = CHUNK.min(samples - count);
        // Stack `reps` copies of the batch so the layer sees them as one input.
        let mut data = Vec::with_capacity(reps * n_in);
        for _ in 0..reps {
            for (m, s) in input.mean.data().iter().zip(&sd) {
                data.push(m + s * rng.sample::<f64, _>(StandardNormal));
            }
        }
        shape[0] = reps * batch;
        let x = Tensor::new(shape.clone(), data).unwrap();
        let y = net.predict(&x, Mode::Eval, &mut stream(0, &[])).unwrap();
        let n_out = y.len() / reps;
        if mean.is_empty() {
            mean = vec![0.0; n_out];
            m2 = vec![0.0; n_out];
        }
        // Welford update, one replicate at a time.
        for r in 0..reps {
            count += 1;
            let row = &y.data()[r * n_out..(r + 1) * n_out];
            for k in 0..n_out {
                let d = row[k] - mean[k];
                mean[k] += d / count as f64;
                m2[k] += d * (row[k] - mean[k]);
            }
        }
    }
    let var = m2.iter().map(|s| s / (count - 1) as f64).collect();
    (mean, var)
}

/// Mean error scaled by `max(|mean|, sd)` and variance error relative to the
/// oracle variance, worst over all output coordinates.
pub fn moment_errors(adf: &GaussianActivation, mc_mean: &[f64], mc_var: &[f64]) -> (f64, f64) {
    let (mut em, mut ev): (f64, f64) = (0.0, 0.0);
    for k in 0..mc_mean.len() {
        if mc_var[k] == 0.0 {
            em = em.max((adf.mean.data()[k] - mc_mean[k]).abs());
            ev = ev.max(adf.variance.data()[k]);
            continue;
        }
        let scale = mc_mean[k].abs().max(mc_var[k].sqrt());
        em = em.max((adf.mean.data()[k] - mc_mean[k]).abs() / scale);
        ev = ev.max((adf.variance.data()[k] - mc_var[k]).abs() / mc_var[k]);
    }
    (em, ev)
}

/// Mean and variance of `max(X, 0)`, `X ~ N(mu, sigma^2)`, by composite
/// Simpson quadrature of the first two moments over `[0, mu + 12 sigma]`.
pub fn relu_moments_quadrature(mu: f64, sigma: f64) -> (f64, f64) {
    const INTERVALS: usize = 40_000;
    let lo = (mu - 12.0 * sigma).max(0.0);
    let hi = mu + 12.0 * sigma;
    if hi <= 0.0 {
        return (0.0, 0.0);
    }
    let h = (hi - lo) / INTERVALS as f64;
    let density = |x: f64| {
        let z = (x - mu) / sigma;
        (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    };
    let (mut s1, mut s2) = (0.0, 0.0);
    for i in 0..=INTERVALS {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i == INTERVALS {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let p = density(x);
        s1 += w * x * p;
        s2 += w * x * x * p;
    }
    let (m1, m2) = (s1 * h / 3.0, s2 * h / 3.0);
    (m1, m2 - m1 * m1)
}

pub const LAYER_KINDS: [&str; 4] = ["linear", "conv1d", "batchnorm", "relu"];

/// Worst ADF moment errors of one random layer of `kind` against a
/// `samples`-draw Monte-Carlo oracle.
pub fn adf_fidelity_case(kind: &str, seed: u64, samples: usize) -> (f64, f64) {
    let (layer, input) = random_layer_case(kind, &mut stream(seed, &[0xad]));
    let adf = Sequential::new(vec![layer.clone()])
        .predict_adf(&input, Mode::Eval, &mut stream(0, &[]))
        .unwrap();
    let (m, v) = mc_layer_moments(&layer, &input, samples, seed);
    moment_errors(&adf, &m, &v)
}

/// Worst ReLU moment error against quadrature over `mu in [-5, 5]`,
/// `sigma in [0.1, 3]`.
pub fn relu_quadrature_error(mu_steps: usize, sigma_steps: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..=mu_steps {
        let mu = -5.0 + 10.0 * i as f64 / mu_steps as f64;
        for j in 0..=sigma_steps {
            let sigma = 0.1 + 2.9 * j as f64 / sigma_steps as f64;
            let (m, v) = twin_uq::normal::relu_moments(mu, sigma * sigma);
            let (qm, qv) = relu_moments_quadrature(mu, sigma);
            worst = worst.max((m - qm).abs()).max((v - qv).abs());
        }
    }
    worst
}

/// Finite-difference checks of every layer (deterministic and moment-matching
/// forwards) and of the training losses for one seed. Returns `(name, worst
/// relative error)` pairs.
pub fn gradient_suite(seed: u64) -> Vec<(String, f64)> {
    let mut rng = stream(seed, &[0x9a]);
    let mut out = Vec::new();
    for kind in LAYER_KINDS {
        let (layer, input) = random_layer_case(kind, &mut rng);
        let modes: &[Mode] = if kind == "batchnorm" { &[Mode::Train, Mode::Eval] } else { &[Mode::Eval] };
        for &mode in modes {
            out.push((format!("{kind} {mode:?}"), layer_gradient_check(&layer, &input.mean, mode, seed)));
            out.push((format!("{kind} adf {mode:?}"), layer_adf_gradient_check(&layer, &input, mode, seed)));
        }
    }
    let (_, input) = random_layer_case("relu", &mut rng);
    let dropout = Layer::Dropout { p: 0.3 };
    out.push(("dropout".into(), layer_gradient_check(&dropout, &input.mean, Mode::McDropout, seed)));
    out.push(("dropout adf".into(), layer_adf_gradient_check(&dropout, &input, Mode::McDropout, seed)));
    let (_, input) = random_layer_case("conv1d", &mut rng);
    out.push(("flatten".into(), layer_gradient_check(&Layer::Flatten, &input.mean, Mode::Eval, seed)));
    out.push(("flatten adf".into(), layer_adf_gradient_check(&Layer::Flatten, &input, Mode::Eval, seed)));

    let (batch, classes, draws) = (rng.random_range(1..=4), rng.random_range(2..=7), 5);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let mu = random_tensor(&[batch, classes], 1.5, &mut rng);
    let eps = random_tensor(&[draws, batch, classes], 1.0, &mut rng);
    out.push((
        "cross-entropy".into(),
        gradient_check(std::slice::from_ref(&mu), |t, v| t.cross_entropy(v[0], &labels)),
    ));
    let sigma = positive_tensor(&[batch, classes], 0.1, 2.0, &mut rng);
    out.push((
        "sampled classification nll".into(),
        gradient_check(&[mu.clone(), sigma], |t, v| t.sampled_class_nll(v[0], v[1], &eps, &labels)),
    ));
    let log_var = random_tensor(&[batch, classes], 0.7, &mut rng);
    out.push((
        "sampled nll, log-variance head".into(),
        gradient_check(&[mu.clone(), log_var.clone()], |t, v| {
            let half = t.scale(v[1], 0.5);
            let sigma = t.exp(half);
            t.sampled_class_nll(v[0], sigma, &eps, &labels)
        }),
    ));
    let variance = positive_tensor(&[batch, classes], 0.05, 3.0, &mut rng);
    out.push((
        "sampled nll, variance head".into(),
        gradient_check(&[mu.clone(), variance], |t, v| {
            let sigma = t.sqrt(v[1]);
            t.sampled_class_nll(v[0], sigma, &eps, &labels)
        }),
    ));
    let y = random_tensor(&[batch, classes], 1.0, &mut rng);
    out.push((
        "regression nll".into(),
        gradient_check(&[y, mu, log_var], |t, v| twin_uq::losses::nll_regression_on_tape(t, v[0], v[1], v[2])),
    ));
    out
}
