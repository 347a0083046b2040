use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normals;

/// Diagonal Gaussian parameterized by mean and log standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldGaussian {
    pub mu: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl MeanFieldGaussian {
    pub fn new(mu: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mu.len() != log_std.len() {
            return Err(Error::shape("mean-field gaussian", mu.len(), log_std.len()));
        }
        Ok(MeanFieldGaussian { mu, log_std })
    }

    /// Same distribution as the prior: zero mean, prior standard deviation.
    pub fn from_prior(dim: usize, prior: &PriorSpec) -> Self {
        MeanFieldGaussian {
            mu: vec![0.0; dim],
            log_std: vec![prior.std().ln(); dim],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let eps = standard_normals(rng, self.len());
        reparam_sample(self, &eps).expect("noise length matches by construction")
    }

    /// Flat `[mu..., log_std...]` layout used by the optimizers.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.mu.clone();
        v.extend_from_slice(&self.log_std);
        v
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        let d = flat.len() / 2;
        MeanFieldGaussian {
            mu: flat[..d].to_vec(),
            log_std: flat[d..].to_vec(),
        }
    }
}

/// Isotropic zero-mean Gaussian prior. `variance` is the second argument of
/// `N(0, variance)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    #[serde(default)]
    pub mean: f64,
    pub variance: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            mean: 0.0,
            variance: 0.1,
        }
    }
}

impl PriorSpec {
    pub fn new(variance: f64) -> Result<Self> {
        let p = PriorSpec {
            mean: 0.0,
            variance,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "prior variance must be positive, got {}",
                self.variance
            )));
        }
        if self.mean != 0.0 {
            return Err(Error::InvalidArgument("only zero-mean priors are supported".into()));
        }
        Ok(())
    }

    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// `mu + exp(log_std) ⊙ eps`.
pub fn reparam_sample(q: &MeanFieldGaussian, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != q.len() {
        return Err(Error::shape("reparam noise", q.len(), eps.len()));
    }
    Ok(q.mu
        .iter()
        .zip(&q.log_std)
        .zip(eps)
        .map(|((m, l), e)| m + l.exp() * e)
        .collect())
}

pub(crate) fn kl_diag_values(mu: &[f64], log_std: &[f64], prior_var: f64) -> f64 {
    let log_sp = 0.5 * prior_var.ln();
    mu.iter()
        .zip(log_std)
        .map(|(m, l)| log_sp - l + ((2.0 * l).exp() + m * m) / (2.0 * prior_var) - 0.5)
        .sum()
}

/// Closed-form `KL(q ‖ p)` for a diagonal `q` and isotropic zero-mean `p`.
pub fn kl_gaussian_diag(q: &MeanFieldGaussian, p: &PriorSpec) -> f64 {
    kl_diag_values(&q.mu, &q.log_std, p.variance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(mu: &[f64], std: &[f64]) -> MeanFieldGaussian {
        MeanFieldGaussian::new(mu.to_vec(), std.iter().map(|s| s.ln()).collect()).unwrap()
    }

    #[test]
    fn reparam_examples() {
        let g = q(&[1.0, 1.0], &[2.0, 3.0]);
        assert_eq!(reparam_sample(&g, &[0.0, 0.0]).unwrap(), vec![1.0, 1.0]);
        let out = reparam_sample(&g, &[1.0, -1.0]).unwrap();
        assert!((out[0] - 3.0).abs() < 1e-15 && (out[1] + 2.0).abs() < 1e-15);
        let unit = q(&[0.0, 0.0], &[1.0, 1.0]);
        assert_eq!(reparam_sample(&unit, &[0.3, -0.7]).unwrap(), vec![0.3, -0.7]);
        assert!(reparam_sample(&unit, &[0.3]).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = PriorSpec::new(1.0).unwrap();
        assert_eq!(kl_gaussian_diag(&q(&[0.0], &[1.0]), &p), 0.0);
        assert!((kl_gaussian_diag(&q(&[1.0], &[1.0]), &p) - 0.5).abs() < 1e-15);
        let wide = kl_gaussian_diag(&q(&[0.0], &[2.0]), &p);
        assert!((wide - 0.806_852_819_440_054_7).abs() < 1e-12);
    }

    #[test]
    fn prior_matched_q_has_zero_kl() {
        let p = PriorSpec::default();
        let g = MeanFieldGaussian::from_prior(5, &p);
        assert!(kl_gaussian_diag(&g, &p).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(
            mu in proptest::collection::vec(-3.0f64..3.0, 1..8),
            ls in proptest::collection::vec(-3.0f64..2.0, 8),
            var in 0.01f64..5.0,
        ) {
            let g = MeanFieldGaussian::new(mu.clone(), ls[..mu.len()].to_vec()).unwrap();
            let p = PriorSpec::new(var).unwrap();
            prop_assert!(kl_gaussian_diag(&g, &p) >= -1e-12);
        }
    }
}
