//! Predictive metrics computed from posterior weight samples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Dataset, ModeDescriptor};
use crate::error::{Error, Result};
use crate::nn::{mlp_forward_batch, pointwise_log_lik, Architecture, Matrix, ObservationModel};

/// `log((1/n) Σ exp(v_i))`, shifted by the maximum for stability.
pub fn logmeanexp(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NEG_INFINITY;
    }
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let terms: Vec<f64> = values.iter().map(|v| (v - m).exp()).collect();
    m + (pairwise_sum(&terms) / values.len() as f64).ln()
}

/// Sum by recursive halving; a sequence concatenated with itself sums to
/// exactly twice the original.
fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::shape("rmse", targets.len(), predictions.len()));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("rmse of no predictions".into()));
    }
    let mse = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / predictions.len() as f64;
    Ok(mse.sqrt())
}

/// Per-sample evaluations of a set of posterior weight draws on a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSampleSet {
    /// `N × S`: `log p(y_n | x_n, w_s)`.
    pub log_lik: Matrix,
    /// `S × (N·D_y)`: `f_{w_s}(x_n)`, rows in data order.
    pub predictions: Matrix,
}

impl PredictiveSampleSet {
    pub fn from_weights(
        arch: &Architecture,
        samples: &[Vec<f64>],
        data: &Dataset,
        obs: ObservationModel,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("need at least one posterior sample".into()));
        }
        let per_sample = samples
            .par_iter()
            .map(|w| {
                let pred = mlp_forward_batch(arch, w, &data.x)?;
                let ll = pointwise_log_lik(arch, w, &data.x, &data.y, obs)?;
                Ok((pred.data, ll))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(per_sample, data.len())
    }

    pub(crate) fn from_parts(per_sample: Vec<(Vec<f64>, Vec<f64>)>, n: usize) -> Result<Self> {
        let s = per_sample.len();
        let width = per_sample.first().map_or(0, |p| p.0.len());
        let mut log_lik = Matrix::zeros(n, s);
        let mut predictions = Vec::with_capacity(s * width);
        for (j, (pred, ll)) in per_sample.into_iter().enumerate() {
            for (i, v) in ll.into_iter().enumerate() {
                log_lik.data[i * s + j] = v;
            }
            predictions.extend(pred);
        }
        Ok(PredictiveSampleSet {
            log_lik,
            predictions: Matrix::new(s, width, predictions)?,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.log_lik.cols
    }

    /// Mean over points of the per-point log of the sample-averaged likelihood.
    pub fn marginal_log_lik(&self) -> Result<f64> {
        marginal_test_ll(&self.log_lik)
    }

    /// RMSE of the sample-mean prediction.
    pub fn mean_prediction_rmse(&self, targets: &[f64]) -> Result<f64> {
        let s = self.predictions.rows as f64;
        let mut mean = vec![0.0; self.predictions.cols];
        for row in self.predictions.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / s;
            }
        }
        rmse(&mean, targets)
    }
}

/// `mean_n logmeanexp_s log_lik[n, s]` for an `N × S` matrix.
pub fn marginal_test_ll(log_lik: &Matrix) -> Result<f64> {
    if log_lik.cols == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    if log_lik.rows == 0 {
        return Err(Error::InvalidArgument("need at least one test point".into()));
    }
    let mut total = 0.0;
    for (n, row) in log_lik.iter_rows().enumerate() {
        if let Some(s) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite log-likelihood at point {n}, sample {s}"
            )));
        }
        total += logmeanexp(row);
    }
    Ok(total / log_lik.rows as f64)
}

/// Empirical quantile with midpoint interpolation between order statistics.
pub fn quantile_midpoint(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    0.5 * (sorted[lo] + sorted[hi])
}

/// Quantile of the equal-weight Gaussian mixture `(1/S) Σ N(means_s, sigma²)`, by bisection.
pub fn mixture_quantile(means: &[f64], sigma: f64, q: f64) -> f64 {
    let unit = Normal::new(0.0, 1.0).expect("standard normal");
    let cdf = |y: f64| means.iter().map(|m| unit.cdf((y - m) / sigma)).sum::<f64>() / means.len() as f64;
    let lo_m = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_m = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = unit.inverse_cdf(q.clamp(1e-12, 1.0 - 1e-12));
    let (mut lo, mut hi) = (lo_m + sigma * z - sigma, hi_m + sigma * z + sigma);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 * (1.0 + mid.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveBands {
    pub x: Vec<f64>,
    pub quantiles: Vec<f64>,
    pub mean: Vec<f64>,
    /// `f_quantiles[j][i]`: empirical quantile `j` of the sampled functions at grid point `i`.
    pub f_quantiles: Vec<Vec<f64>>,
    /// Quantiles of the full predictive (sampled functions plus observation noise).
    pub y_quantiles: Vec<Vec<f64>>,
    /// `sqrt(sample variance + sigma_y²)`.
    pub total_std: Vec<f64>,
}

impl PredictiveBands {
    /// CSV with columns `x, mean, q_low, q_high, total_std`, using the
    /// smallest and largest requested predictive quantiles.
    pub fn to_csv(&self) -> String {
        let last = self.quantiles.len().saturating_sub(1);
        let mut out = String::from("x,mean,q_low,q_high,total_std\n");
        for i in 0..self.x.len() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.x[i], self.mean[i], self.y_quantiles[0][i], self.y_quantiles[last][i], self.total_std[i]
            ));
        }
        out
    }
}

/// Band summary of sampled functions on a one-dimensional input grid.
pub fn predictive_bands(
    arch: &Architecture,
    samples: &[Vec<f64>],
    x_grid: &[f64],
    quantiles: &[f64],
    obs: ObservationModel,
) -> Result<PredictiveBands> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("predictive bands need at least two samples".into()));
    }
    if quantiles.is_empty() || quantiles.iter().any(|q| !(0.0..=1.0).contains(q)) {
        return Err(Error::InvalidArgument(format!("bad quantiles {quantiles:?}")));
    }
    if arch.input_dim() != 1 || arch.output_dim() != 1 {
        return Err(Error::InvalidArgument("bands are defined for 1-d regression".into()));
    }
    let xs = Matrix::column(x_grid);
    let preds = samples
        .par_iter()
        .map(|w| mlp_forward_batch(arch, w, &xs).map(|m| m.data))
        .collect::<Result<Vec<_>>>()?;
    Ok(bands_from_predictions(&preds, x_grid, quantiles, obs))
}

pub(crate) fn bands_from_predictions(
    preds: &[Vec<f64>],
    x_grid: &[f64],
    quantiles: &[f64],
    obs: ObservationModel,
) -> PredictiveBands {
    let s = preds.len() as f64;
    let mut mean = Vec::with_capacity(x_grid.len());
    let mut total_std = Vec::with_capacity(x_grid.len());
    let mut f_q = vec![Vec::with_capacity(x_grid.len()); quantiles.len()];
    let mut y_q = vec![Vec::with_capacity(x_grid.len()); quantiles.len()];
    for i in 0..x_grid.len() {
        let mut col: Vec<f64> = preds.iter().map(|p| p[i]).collect();
        let m = col.iter().sum::<f64>() / s;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (s - 1.0);
        mean.push(m);
        total_std.push((var + obs.sigma_y * obs.sigma_y).sqrt());
        for (j, &q) in quantiles.iter().enumerate() {
            y_q[j].push(mixture_quantile(&col, obs.sigma_y, q));
        }
        col.sort_by(f64::total_cmp);
        for (j, &q) in quantiles.iter().enumerate() {
            f_q[j].push(quantile_midpoint(&col, q));
        }
    }
    PredictiveBands {
        x: x_grid.to_vec(),
        quantiles: quantiles.to_vec(),
        mean,
        f_quantiles: f_q,
        y_quantiles: y_q,
        total_std,
    }
}

/// Number of modes that at least one sampled function fits, i.e. whose RMSE
/// on that mode's rows is below `fit_threshold`. `predictions` holds one row
/// per sample with a prediction for every data row.
pub fn mode_coverage(
    predictions: &Matrix,
    targets: &[f64],
    modes: &[ModeDescriptor],
    fit_threshold: f64,
) -> usize {
    if predictions.rows == 0 {
        return 0;
    }
    modes
        .iter()
        .filter(|mode| {
            let ys: Vec<f64> = mode.rows.iter().map(|&r| targets[r]).collect();
            predictions.iter_rows().any(|p| {
                let ps: Vec<f64> = mode.rows.iter().map(|&r| p[r]).collect();
                rmse(&ps, &ys).is_ok_and(|e| e < fit_threshold)
            })
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn logmeanexp_of_two() {
        let v = logmeanexp(&[0.2f64.ln(), 0.4f64.ln()]);
        assert!((v - 0.3f64.ln()).abs() < 1e-12);
        assert!((v + 1.203_972_804_325_936).abs() < 1e-12);
    }

    #[test]
    fn single_sample_marginal_is_mean_loglik() {
        let ll = Matrix::new(3, 1, vec![-1.0, -2.0, -4.5]).unwrap();
        assert_eq!(marginal_test_ll(&ll).unwrap(), -7.5 / 3.0);
        let same = Matrix::new(2, 3, vec![-1.0, -1.0, -1.0, -2.0, -2.0, -2.0]).unwrap();
        assert!((marginal_test_ll(&same).unwrap() + 1.5).abs() < 1e-15);
    }

    #[test]
    fn marginal_rejects_non_finite() {
        let ll = Matrix::new(2, 2, vec![-1.0, -1.0, f64::NEG_INFINITY, 0.0]).unwrap();
        let err = marginal_test_ll(&ll).unwrap_err().to_string();
        assert!(err.contains("point 1, sample 0"), "{err}");
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert!((rmse(&[3.0, 4.0], &[0.0, 0.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn midpoint_quantile() {
        assert_eq!(quantile_midpoint(&[-1.0, 1.0], 0.5), 0.0);
        assert_eq!(quantile_midpoint(&[1.0, 2.0, 3.0], 0.5), 2.0);
        assert_eq!(quantile_midpoint(&[1.0, 2.0, 3.0, 4.0], 0.0), 1.0);
    }

    #[test]
    fn deterministic_bands_collapse_to_noise() {
        let preds = vec![vec![1.0, -2.0]; 5];
        let b = bands_from_predictions(&preds, &[0.0, 1.0], &[0.025, 0.5, 0.975], ObservationModel::default());
        let z = 1.959_963_984_540_054;
        for i in 0..2 {
            assert_eq!(b.total_std[i], 0.1);
            assert_eq!(b.f_quantiles[1][i], b.mean[i]);
            assert!((b.y_quantiles[0][i] - (b.mean[i] - 0.1 * z)).abs() < 1e-9);
            assert!((b.y_quantiles[2][i] - (b.mean[i] + 0.1 * z)).abs() < 1e-9);
            assert!((b.y_quantiles[1][i] - b.mean[i]).abs() < 1e-9);
        }
    }

    fn mode(index: usize, rows: Vec<usize>) -> ModeDescriptor {
        ModeDescriptor {
            index,
            center: 0.0,
            half_width: 0.0,
            height: 0.0,
            lengthscale: 1.0,
            rows,
        }
    }

    #[test]
    fn coverage_counts() {
        let targets = [1.0, 1.0, -1.0, -1.0];
        let modes = vec![mode(0, vec![0, 1]), mode(1, vec![2, 3])];
        assert_eq!(mode_coverage(&Matrix::zeros(0, 4), &targets, &modes, 0.3), 0);
        let exact = Matrix::new(1, 4, targets.to_vec()).unwrap();
        assert_eq!(mode_coverage(&exact, &targets, &modes, 0.3), 2);
        let halves = Matrix::new(2, 4, vec![1.0, 1.0, 5.0, 5.0, 5.0, 5.0, -1.1, -0.9]).unwrap();
        assert_eq!(mode_coverage(&halves, &targets, &modes, 0.3), 2);
        let miss = Matrix::new(1, 4, vec![0.0; 4]).unwrap();
        assert_eq!(mode_coverage(&miss, &targets, &modes, 0.3), 0);
    }

    proptest! {
        #[test]
        fn logmeanexp_shift_invariance(
            v in proptest::collection::vec(-50.0f64..50.0, 1..30),
            c in -100.0f64..100.0,
        ) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            prop_assert!((logmeanexp(&shifted) - logmeanexp(&v) - c).abs() <= 1e-12 * (1.0 + c.abs()).max(logmeanexp(&v).abs()));
        }

        #[test]
        fn duplicating_samples_keeps_marginal(
            v in proptest::collection::vec(-20.0f64..5.0, 6),
        ) {
            let once = Matrix::new(2, 3, v.clone()).unwrap();
            let mut twice = Vec::new();
            for r in 0..2 {
                twice.extend_from_slice(&v[r * 3..r * 3 + 3]);
                twice.extend_from_slice(&v[r * 3..r * 3 + 3]);
            }
            let twice = Matrix::new(2, 6, twice).unwrap();
            prop_assert!((marginal_test_ll(&once).unwrap() - marginal_test_ll(&twice).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn rmse_symmetric(
            v in proptest::collection::vec(-10.0f64..10.0, 1..20),
            w in proptest::collection::vec(-10.0f64..10.0, 20),
        ) {
            let w = &w[..v.len()];
            prop_assert_eq!(rmse(&v, w).unwrap(), rmse(w, &v).unwrap());
        }
    }
}
