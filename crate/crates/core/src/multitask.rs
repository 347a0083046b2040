//! Many related regression tasks sharing one decoder: every task gets its own
//! latent code, the decoder parameters are common to all of them.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{mlp_forward_batch, Activation, Architecture, Matrix, ObservationModel};
use crate::vi::{
    fit_projected, ElboTerms, EpsDraw, MeanFieldGaussian, PhiPosterior, PriorSpec, Priors,
    ProjBnnInit, Projection, TaskBatch, TaskData, TrainedModel, VarInferenceConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub latent_dim: usize,
    pub decoder_hidden: usize,
    pub decoder_activation: Activation,
    pub priors: Priors,
    pub vi: VarInferenceConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            latent_dim: 2,
            decoder_hidden: 50,
            decoder_activation: Activation::Tanh,
            priors: Priors {
                latent: PriorSpec {
                    mean: 0.0,
                    variance: 1.0,
                },
                decoder: PriorSpec::default(),
            },
            vi: VarInferenceConfig::default(),
        }
    }
}

impl MetaConfig {
    pub fn decoder_arch(&self, target_arch: &Architecture) -> Result<Architecture> {
        Architecture::new(
            vec![self.latent_dim, self.decoder_hidden, target_arch.num_params()],
            self.decoder_activation,
        )
    }
}

/// Sum over tasks of the expected scaled log-likelihood, minus one KL term per
/// task latent and a single KL term for the shared decoder parameters.
#[allow(clippy::too_many_arguments)]
pub fn elbo_meta(
    q_z: &[MeanFieldGaussian],
    q_phi: &PhiPosterior,
    decoder_arch: &Architecture,
    target_arch: &Architecture,
    batches: &[TaskBatch],
    obs: ObservationModel,
    priors: &Priors,
    eps: &[EpsDraw],
) -> Result<f64> {
    let terms = ElboTerms {
        latents: q_z,
        projection: Projection::Decoder {
            arch: decoder_arch,
            phi: q_phi,
        },
        target_arch,
        batches,
        obs,
        priors,
    };
    Ok(terms.estimate(eps, false)?.value)
}

/// Joint fit of per-task latents and the shared decoder from a random
/// decoder initialization. Early stopping uses the validation marginal
/// log-likelihood pooled over all tasks' points.
pub fn train_meta(
    train: &[&Dataset],
    valid: &[&Dataset],
    target_arch: &Architecture,
    obs: ObservationModel,
    cfg: &MetaConfig,
) -> Result<TrainedModel> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("need at least one task".into()));
    }
    let decoder_arch = cfg.decoder_arch(target_arch)?;
    let init = ProjBnnInit::random(&decoder_arch, cfg.vi.seed);
    fit_projected(&init, target_arch, TaskData { train, valid }, obs, &cfg.priors, &cfg.vi)
}

/// Functions decoded from a grid over the latent square.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub z: Vec<[f64; 2]>,
    pub x: Vec<f64>,
    /// `grid_n² × |x|`; row `i·grid_n + j` belongs to `(u_i, v_j)`.
    pub values: Matrix,
}

impl LatentGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("u,v,z0,z1");
        for i in 0..self.x.len() {
            out.push_str(&format!(",f_{i}"));
        }
        out.push('\n');
        for (r, row) in self.values.iter_rows().enumerate() {
            out.push_str(&format!("{},{},{},{}", self.u[r], self.v[r], self.z[r][0], self.z[r][1]));
            for f in row {
                out.push_str(&format!(",{f}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Interior quantiles `(i + ½) / n` for `i = 0..n`.
pub fn interior_quantiles(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
}

/// Decodes `z = (Φ⁻¹(u), Φ⁻¹(v))` on an interior grid of the unit square with
/// the decoder parameters `phi` and evaluates each network on `x_grid`.
pub fn latent_grid_decode(
    phi: &[f64],
    decoder_arch: &Architecture,
    target_arch: &Architecture,
    grid_n: usize,
    x_grid: &[f64],
) -> Result<LatentGrid> {
    if decoder_arch.input_dim() != 2 {
        return Err(Error::shape("latent grid dimension", 2, decoder_arch.input_dim()));
    }
    if grid_n < 2 {
        return Err(Error::InvalidArgument(format!("grid_n must be at least 2, got {grid_n}")));
    }
    if decoder_arch.output_dim() != target_arch.num_params() {
        return Err(Error::shape("decoder output", target_arch.num_params(), decoder_arch.output_dim()));
    }
    if target_arch.input_dim() != 1 || target_arch.output_dim() != 1 {
        return Err(Error::InvalidArgument("latent grids are drawn for 1-d regression".into()));
    }
    let unit = Normal::new(0.0, 1.0).expect("standard normal");
    let q = interior_quantiles(grid_n);
    let xs = Matrix::column(x_grid);
    let mut grid = LatentGrid {
        u: Vec::new(),
        v: Vec::new(),
        z: Vec::new(),
        x: x_grid.to_vec(),
        values: Matrix::zeros(0, x_grid.len()),
    };
    let mut zs = Vec::with_capacity(2 * grid_n * grid_n);
    for &u in &q {
        for &v in &q {
            let z = [unit.inverse_cdf(u), unit.inverse_cdf(v)];
            grid.u.push(u);
            grid.v.push(v);
            grid.z.push(z);
            zs.extend(z);
        }
    }
    let weights = mlp_forward_batch(decoder_arch, phi, &Matrix::new(grid_n * grid_n, 2, zs)?)?;
    let mut values = Vec::with_capacity(grid_n * grid_n * x_grid.len());
    for w in weights.iter_rows() {
        values.extend(mlp_forward_batch(target_arch, w, &xs)?.data);
    }
    grid.values = Matrix::new(grid_n * grid_n, x_grid.len(), values)?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::init_weights;
    use crate::rng::substream;
    use crate::vi::kl_gaussian_diag;

    #[test]
    fn grid_shape_center_and_symmetry() {
        let target = Architecture::new(vec![1, 3, 1], Activation::Tanh).unwrap();
        let dec = Architecture::new(vec![2, 4, target.num_params()], Activation::Tanh).unwrap();
        let phi = init_weights(&dec, &mut substream(0, "g"));
        let g = latent_grid_decode(&phi.values, &dec, &target, 5, &[-1.0, 0.0, 2.0]).unwrap();
        assert_eq!((g.values.rows, g.values.cols), (25, 3));
        assert_eq!(g.z[12], [0.0, 0.0]);
        assert!((g.z[0][0] + g.z[24][0]).abs() < 1e-12);
        assert!((g.z[3][1] + g.z[1][1]).abs() < 1e-12);
        let unit = Normal::new(0.0, 1.0).unwrap();
        for u in interior_quantiles(7) {
            assert!((unit.cdf(unit.inverse_cdf(u)) - u).abs() < 1e-9);
        }
        assert!(latent_grid_decode(&phi.values, &dec, &target, 1, &[0.0]).is_err());
        let csv = g.to_csv();
        assert!(csv.starts_with("u,v,z0,z1,f_0,f_1,f_2\n"));
        assert_eq!(csv.lines().count(), 26);
    }

    #[test]
    fn empty_tasks_give_negative_kl_sum_with_one_phi_term() {
        let target = Architecture::new(vec![1, 2, 1], Activation::Tanh).unwrap();
        let dec = Architecture::new(vec![2, 3, target.num_params()], Activation::Tanh).unwrap();
        let priors = Priors::default();
        let qz = vec![
            MeanFieldGaussian::new(vec![0.3, -0.1], vec![-1.0, -0.5]).unwrap(),
            MeanFieldGaussian::new(vec![-0.2, 0.4], vec![-2.0, 0.1]).unwrap(),
        ];
        let qphi = MeanFieldGaussian::new(vec![0.05; dec.num_params()], vec![-3.0; dec.num_params()]).unwrap();
        let batches = vec![TaskBatch::empty(1, 1), TaskBatch::empty(1, 1)];
        let eps = vec![EpsDraw {
            z: vec![vec![0.0; 2]; 2],
            phi: vec![0.0; dec.num_params()],
        }];
        let v = elbo_meta(
            &qz,
            &PhiPosterior::Gaussian(qphi.clone()),
            &dec,
            &target,
            &batches,
            ObservationModel::default(),
            &priors,
            &eps,
        )
        .unwrap();
        let expect = -kl_gaussian_diag(&qz[0], &priors.latent)
            - kl_gaussian_diag(&qz[1], &priors.latent)
            - kl_gaussian_diag(&qphi, &priors.decoder);
        assert!((v - expect).abs() < 1e-12);
    }
}
