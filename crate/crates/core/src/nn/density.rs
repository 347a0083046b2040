use serde::{Deserialize, Serialize};

use super::arch::{Architecture, WeightVector};
use super::matrix::Matrix;
use super::mlp::{mlp_forward_batch, mlp_forward_tape};
use super::tape::{Tape, Var, LN_SQRT_2PI};
use crate::error::{Error, Result};

/// Homoscedastic Gaussian observation noise, `y ~ N(f_w(x), sigma_y²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationModel {
    pub sigma_y: f64,
}

impl Default for ObservationModel {
    fn default() -> Self {
        ObservationModel { sigma_y: 0.1 }
    }
}

impl ObservationModel {
    pub fn new(sigma_y: f64) -> Result<Self> {
        if !(sigma_y > 0.0 && sigma_y.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "observation noise must be positive, got {sigma_y}"
            )));
        }
        Ok(ObservationModel { sigma_y })
    }
}

pub(crate) fn gaussian_log_density_unchecked(value: &[f64], mean: &[f64], std: f64) -> f64 {
    let log_norm = -LN_SQRT_2PI - std.ln();
    let inv_2var = 0.5 / (std * std);
    value
        .iter()
        .zip(mean)
        .map(|(v, m)| log_norm - (v - m) * (v - m) * inv_2var)
        .sum()
}

/// `Σ_i log N(value_i | mean_i, std²)`.
pub fn gaussian_log_density(value: &[f64], mean: &[f64], std: f64) -> Result<f64> {
    if !(std > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "standard deviation must be positive, got {std}"
        )));
    }
    if value.len() != mean.len() {
        return Err(Error::shape("gaussian_log_density", value.len(), mean.len()));
    }
    Ok(gaussian_log_density_unchecked(value, mean, std))
}

/// Per-row log-likelihood `log p(y_n | x_n, w)` for every row of the data.
pub fn pointwise_log_lik(
    arch: &Architecture,
    w: &[f64],
    x: &Matrix,
    y: &Matrix,
    obs: ObservationModel,
) -> Result<Vec<f64>> {
    let pred = mlp_forward_batch(arch, w, x)?;
    if pred.cols != y.cols || pred.rows != y.rows {
        return Err(Error::shape(
            "targets",
            format!("{}x{}", pred.rows, pred.cols),
            format!("{}x{}", y.rows, y.cols),
        ));
    }
    Ok(pred
        .iter_rows()
        .zip(y.iter_rows())
        .map(|(p, t)| gaussian_log_density_unchecked(t, p, obs.sigma_y))
        .collect())
}

/// Unnormalized log posterior: Gaussian likelihood plus an isotropic
/// zero-mean Gaussian prior on the weights.
pub fn log_joint(
    arch: &Architecture,
    w: &WeightVector,
    x: &Matrix,
    y: &Matrix,
    obs: ObservationModel,
    prior_std: f64,
) -> Result<f64> {
    w.matches(arch)?;
    if x.rows == 0 {
        return Err(Error::InvalidArgument("log_joint needs at least one observation".into()));
    }
    let lik: f64 = pointwise_log_lik(arch, &w.values, x, y, obs)?.iter().sum();
    let prior = gaussian_log_density(&w.values, &vec![0.0; w.len()], prior_std)?;
    Ok(lik + prior)
}

/// Records `log p(y | x, w)` summed over the rows of a batch.
pub fn log_lik_tape(
    tape: &Tape,
    arch: &Architecture,
    w: Var,
    x: Var,
    y: Var,
    obs: ObservationModel,
) -> Result<Var> {
    let pred = mlp_forward_tape(tape, arch, w, x)?;
    tape.gaussian_log_density(y, pred, obs.sigma_y)
}
