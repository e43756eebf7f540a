//! Standard-normal helpers and the rectified-Gaussian moments.

use statrs::function::erf::erfc;

/// Variances below this are treated as exactly zero.
pub const VARIANCE_FLOOR: f64 = 1e-12;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

pub fn cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Mean and variance of `max(X, 0)` for `X ~ N(mu, var)`.
pub fn relu_moments(mu: f64, var: f64) -> (f64, f64) {
    if var < VARIANCE_FLOOR {
        return (mu.max(0.0), 0.0);
    }
    let sigma = var.sqrt();
    let z = mu / sigma;
    let (cdf_z, pdf_z) = (cdf(z), pdf(z));
    let mean = mu * cdf_z + sigma * pdf_z;
    let second = (mu * mu + var) * cdf_z + mu * sigma * pdf_z;
    (mean, (second - mean * mean).max(0.0))
}

/// Partial derivatives of [`relu_moments`]:
/// `(d mean/d mu, d mean/d var, d var/d mu, d var/d var)`.
pub fn relu_moment_partials(mu: f64, var: f64) -> [f64; 4] {
    if var < VARIANCE_FLOOR {
        let active = if mu > 0.0 { 1.0 } else { 0.0 };
        return [active, 0.0, 0.0, 0.0];
    }
    let sigma = var.sqrt();
    let z = mu / sigma;
    let (cdf_z, pdf_z) = (cdf(z), pdf(z));
    let mean = mu * cdf_z + sigma * pdf_z;
    let second = (mu * mu + var) * cdf_z + mu * sigma * pdf_z;
    // The clamp in `relu_moments` zeroes the variance gradient where it binds.
    let clamped = second - mean * mean <= 0.0;
    let dmean_dmu = cdf_z;
    let dmean_dvar = pdf_z / (2.0 * sigma);
    if clamped {
        return [dmean_dmu, dmean_dvar, 0.0, 0.0];
    }
    [
        dmean_dmu,
        dmean_dvar,
        2.0 * mean * (1.0 - cdf_z),
        cdf_z - mean * pdf_z / sigma,
    ]
}
