//! Training losses for plain, heteroscedastic and ADF models.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, Result};
use crate::layers::GaussianActivation;
use crate::model::{ModelKind, NetOutput};
use crate::tape::{log_sum_exp, Tape, Var};
use crate::tensor::Tensor;

/// Default number of logit draws per training step.
pub const TRAIN_DRAWS: usize = 50;
/// Default number of logit draws at evaluation time.
pub const EVAL_DRAWS: usize = 100;

/// Gaussian negative log-likelihood with a log-variance head, averaged over
/// all output coordinates: `mean((y - mu)^2 / (2 exp(s)) + s / 2)`.
pub fn nll_regression_on_tape(tape: &mut Tape, y: Var, mu: Var, log_var: Var) -> Result<Var> {
    let r = tape.sub(y, mu)?;
    let r2 = tape.square(r);
    let neg = tape.scale(log_var, -1.0);
    let precision = tape.exp(neg);
    let fit = tape.mul(r2, precision)?;
    let fit = tape.scale(fit, 0.5);
    let half_s = tape.scale(log_var, 0.5);
    let total = tape.add(fit, half_s)?;
    Ok(tape.mean(total))
}

pub fn nll_regression(y: &Tensor, mu: &Tensor, log_var: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (y, mu, s) = (
        tape.constant(y.clone()),
        tape.constant(mu.clone()),
        tape.constant(log_var.clone()),
    );
    let loss = nll_regression_on_tape(&mut tape, y, mu, s)?;
    Ok(tape.value(loss).item())
}

/// Standard-normal draws of shape `[draws, batch, classes]`.
pub fn standard_normal_draws(draws: usize, batch: usize, classes: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if draws == 0 {
        return Err(contract("at least one logit sample is required"));
    }
    let data = (0..draws * batch * classes).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![draws, batch, classes], data)
}

/// `T` logit vectors `mu + sigma * eps_t` with `eps_t ~ N(0, I)`.
pub fn sample_logits(mu: &[f64], sigma: &[f64], draws: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    if mu.len() != sigma.len() {
        return Err(contract("mu and sigma lengths differ"));
    }
    if sigma.iter().any(|s| !(*s >= 0.0)) {
        return Err(contract("sigma must be non-negative"));
    }
    let eps = standard_normal_draws(draws, 1, mu.len(), rng)?;
    Ok(eps
        .data()
        .chunks(mu.len())
        .map(|e| mu.iter().zip(sigma).zip(e).map(|((m, s), e)| m + s * e).collect())
        .collect())
}

fn single_row(v: &[f64]) -> Result<Tensor> {
    Tensor::matrix(1, v.len(), v.to_vec())
}

/// `-log((1/T) sum_t softmax(mu + sigma * eps_t)[class])` for one sample.
pub fn nll_classification_sampled(mu: &[f64], sigma: &[f64], class: usize, draws: usize, rng: &mut impl Rng) -> Result<f64> {
    if sigma.iter().any(|s| !(*s >= 0.0)) {
        return Err(contract("sigma must be non-negative"));
    }
    let eps = standard_normal_draws(draws, 1, mu.len(), rng)?;
    let mut tape = Tape::new();
    let m = tape.constant(single_row(mu)?);
    let s = tape.constant(single_row(sigma)?);
    let loss = tape.sampled_class_nll(m, s, &eps, &[class])?;
    Ok(tape.value(loss).item())
}

/// Stable softmax cross-entropy of one logit vector.
pub fn cross_entropy_plain(logits: &[f64], class: usize) -> Result<f64> {
    if class >= logits.len() {
        return Err(contract(format!("class index {class} out of range for {} classes", logits.len())));
    }
    Ok(log_sum_exp(logits) - logits[class])
}

/// Sampled classification loss on propagated logit moments: `sigma = sqrt(variance)`.
pub fn adf_classification_loss(logits: &GaussianActivation, class: usize, draws: usize, rng: &mut impl Rng) -> Result<f64> {
    let sigma: Vec<f64> = logits.variance.data().iter().map(|v| v.sqrt()).collect();
    nll_classification_sampled(logits.mean.data(), &sigma, class, draws, rng)
}

/// Records the loss appropriate for `kind` on a network output.
/// `eps` must hold `[T, B, classes]` standard-normal draws for ADF and HET models.
pub fn model_loss(tape: &mut Tape, kind: ModelKind, out: &NetOutput, labels: &[usize], eps: Option<&Tensor>) -> Result<Var> {
    match kind {
        ModelKind::Plain => tape.cross_entropy(out.logits, labels),
        ModelKind::Adf | ModelKind::Het => {
            let eps = eps.ok_or_else(|| contract("sampled loss needs logit draws"))?;
            let sigma = match (out.variance, out.log_variance) {
                (Some(v), _) => tape.sqrt(v),
                (None, Some(s)) => {
                    let half = tape.scale(s, 0.5);
                    tape.exp(half)
                }
                _ => return Err(contract(format!("{kind} output carries no logit spread"))),
            };
            tape.sampled_class_nll(out.logits, sigma, eps, labels)
        }
    }
}
