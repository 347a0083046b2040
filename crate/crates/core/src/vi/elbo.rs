use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gaussian::{kl_diag_values, MeanFieldGaussian, PriorSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{log_lik_tape, mlp_forward_batch, Architecture, Matrix, ObservationModel, Tape, Var};

/// Posterior over decoder parameters: a mean-field Gaussian, or a point mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhiPosterior {
    Gaussian(MeanFieldGaussian),
    Fixed { values: Vec<f64> },
}

impl PhiPosterior {
    pub fn len(&self) -> usize {
        match self {
            PhiPosterior::Gaussian(q) => q.len(),
            PhiPosterior::Fixed { values } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean(&self) -> &[f64] {
        match self {
            PhiPosterior::Gaussian(q) => &q.mu,
            PhiPosterior::Fixed { values } => values,
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, PhiPosterior::Fixed { .. })
    }

    /// Noise dimension needed for one draw.
    pub fn noise_len(&self) -> usize {
        match self {
            PhiPosterior::Gaussian(q) => q.len(),
            PhiPosterior::Fixed { .. } => 0,
        }
    }

    fn draw(&self, eps: &[f64]) -> Result<Vec<f64>> {
        match self {
            PhiPosterior::Gaussian(q) => super::gaussian::reparam_sample(q, eps),
            PhiPosterior::Fixed { values } => Ok(values.clone()),
        }
    }
}

/// How a latent draw becomes a weight vector of the target network.
#[derive(Debug, Clone, Copy)]
pub enum Projection<'a> {
    /// The latent variable is the weight vector (Bayes by backprop).
    Identity,
    Decoder {
        arch: &'a Architecture,
        phi: &'a PhiPosterior,
    },
}

/// Priors on latent codes (or weights, for [`Projection::Identity`]) and on
/// decoder parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Priors {
    pub latent: PriorSpec,
    pub decoder: PriorSpec,
}

impl Priors {
    pub fn validate(&self) -> Result<()> {
        self.latent.validate()?;
        self.decoder.validate()
    }
}

/// Rows of one task used for a single ELBO estimate. `scale` multiplies the
/// summed log-likelihood, `N / |batch|` for an unbiased full-data estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub x: Matrix,
    pub y: Matrix,
    pub scale: f64,
}

impl TaskBatch {
    pub fn full(d: &Dataset) -> Self {
        TaskBatch {
            x: d.x.clone(),
            y: d.y.clone(),
            scale: 1.0,
        }
    }

    pub fn rows(d: &Dataset, idx: &[usize]) -> Self {
        TaskBatch {
            x: d.x.select_rows(idx),
            y: d.y.select_rows(idx),
            scale: if idx.is_empty() {
                0.0
            } else {
                d.len() as f64 / idx.len() as f64
            },
        }
    }

    pub fn empty(input_dim: usize, output_dim: usize) -> Self {
        TaskBatch {
            x: Matrix::zeros(0, input_dim),
            y: Matrix::zeros(0, output_dim),
            scale: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.x.rows
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows == 0
    }
}

/// Standard-normal noise for one Monte Carlo sample: one vector per latent
/// (task) and one for the decoder parameters (empty when φ is a point mass).
#[derive(Debug, Clone, PartialEq)]
pub struct EpsDraw {
    pub z: Vec<Vec<f64>>,
    pub phi: Vec<f64>,
}

/// Gradient of the ELBO in the flat `[mu..., log_std...]` layout of each factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboGrad {
    pub latents: Vec<Vec<f64>>,
    pub phi: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboEstimate {
    pub value: f64,
    /// Scaled log-likelihood of each Monte Carlo sample, summed over tasks.
    pub sample_log_lik: Vec<f64>,
    pub kl: f64,
    pub grad: Option<ElboGrad>,
}

/// Everything an ELBO estimate depends on apart from the noise.
#[derive(Debug, Clone, Copy)]
pub struct ElboTerms<'a> {
    pub latents: &'a [MeanFieldGaussian],
    pub projection: Projection<'a>,
    pub target_arch: &'a Architecture,
    pub batches: &'a [TaskBatch],
    pub obs: ObservationModel,
    pub priors: &'a Priors,
}

struct SampleOut {
    ll: f64,
    latent_grads: Vec<Vec<f64>>,
    phi_grad: Option<Vec<f64>>,
}

impl ElboTerms<'_> {
    fn validate(&self, eps: &[EpsDraw]) -> Result<()> {
        if self.latents.is_empty() {
            return Err(Error::InvalidArgument("need at least one latent factor".into()));
        }
        if self.latents.len() != self.batches.len() {
            return Err(Error::shape("task batches", self.latents.len(), self.batches.len()));
        }
        if eps.is_empty() {
            return Err(Error::InvalidArgument("need at least one Monte Carlo sample".into()));
        }
        let dw = self.target_arch.num_params();
        let latent_dim = match self.projection {
            Projection::Identity => dw,
            Projection::Decoder { arch, phi } => {
                if arch.output_dim() != dw {
                    return Err(Error::shape("decoder output", dw, arch.output_dim()));
                }
                if phi.len() != arch.num_params() {
                    return Err(Error::shape("decoder parameters", arch.num_params(), phi.len()));
                }
                arch.input_dim()
            }
        };
        for q in self.latents {
            if q.len() != latent_dim {
                return Err(Error::shape("latent dimension", latent_dim, q.len()));
            }
        }
        for b in self.batches {
            if !b.is_empty() && (b.x.cols != self.target_arch.input_dim() || b.y.cols != self.target_arch.output_dim()) {
                return Err(Error::shape(
                    "batch columns",
                    format!("{}/{}", self.target_arch.input_dim(), self.target_arch.output_dim()),
                    format!("{}/{}", b.x.cols, b.y.cols),
                ));
            }
        }
        let phi_len = self.phi_noise_len();
        for e in eps {
            if e.z.len() != self.latents.len() {
                return Err(Error::shape("latent noise", self.latents.len(), e.z.len()));
            }
            if let Some(bad) = e.z.iter().find(|z| z.len() != latent_dim) {
                return Err(Error::shape("latent noise", latent_dim, bad.len()));
            }
            if e.phi.len() != phi_len {
                return Err(Error::shape("decoder noise", phi_len, e.phi.len()));
            }
        }
        Ok(())
    }

    fn phi_noise_len(&self) -> usize {
        match self.projection {
            Projection::Identity => 0,
            Projection::Decoder { phi, .. } => phi.noise_len(),
        }
    }

    /// Sum over Gaussian factors of `KL(q ‖ p)`; φ counted once.
    pub fn kl(&self) -> f64 {
        let mut kl: f64 = self
            .latents
            .iter()
            .map(|q| kl_diag_values(&q.mu, &q.log_std, self.priors.latent.variance))
            .sum();
        if let Projection::Decoder {
            phi: PhiPosterior::Gaussian(q),
            ..
        } = self.projection
        {
            kl += kl_diag_values(&q.mu, &q.log_std, self.priors.decoder.variance);
        }
        kl
    }

    fn sample(&self, eps: &EpsDraw, with_grad: bool) -> Result<SampleOut> {
        let tape = Tape::new();
        let mut phi_leaves: Option<(Var, Var)> = None;
        let phi_var = match self.projection {
            Projection::Identity => None,
            Projection::Decoder { phi, .. } => Some(match phi {
                PhiPosterior::Gaussian(q) => {
                    let mu = tape.row(&q.mu);
                    let ls = tape.row(&q.log_std);
                    phi_leaves = Some((mu, ls));
                    tape.reparam(mu, ls, &eps.phi)?
                }
                PhiPosterior::Fixed { values } => tape.row(values),
            }),
        };
        let mut leaves = Vec::with_capacity(self.latents.len());
        let mut total: Option<Var> = None;
        for ((q, batch), noise) in self.latents.iter().zip(self.batches).zip(&eps.z) {
            let mu = tape.row(&q.mu);
            let ls = tape.row(&q.log_std);
            leaves.push((mu, ls));
            let z = tape.reparam(mu, ls, noise)?;
            if batch.is_empty() {
                continue;
            }
            let w = match (self.projection, phi_var) {
                (Projection::Decoder { arch, .. }, Some(phi)) => crate::nn::mlp_forward_tape(&tape, arch, phi, z)?,
                _ => z,
            };
            let x = tape.input(batch.x.data.clone(), batch.x.rows, batch.x.cols)?;
            let y = tape.input(batch.y.data.clone(), batch.y.rows, batch.y.cols)?;
            let ll = log_lik_tape(&tape, self.target_arch, w, x, y, self.obs)?;
            let scaled = tape.scale(ll, batch.scale);
            total = Some(match total {
                None => scaled,
                Some(t) => tape.add(t, scaled)?,
            });
        }
        tape.check_finite()?;
        let Some(total) = total else {
            return Ok(SampleOut {
                ll: 0.0,
                latent_grads: self.latents.iter().map(|q| vec![0.0; 2 * q.len()]).collect(),
                phi_grad: phi_leaves.map(|(mu, _)| vec![0.0; 2 * mu.len()]),
            });
        };
        let ll = tape.scalar(total);
        if !with_grad {
            return Ok(SampleOut {
                ll,
                latent_grads: Vec::new(),
                phi_grad: None,
            });
        }
        let g = tape.backward(total)?;
        let flat = |(mu, ls): (Var, Var)| {
            let mut v = g.get(mu);
            v.extend(g.get(ls));
            v
        };
        Ok(SampleOut {
            ll,
            latent_grads: leaves.into_iter().map(flat).collect(),
            phi_grad: phi_leaves.map(flat),
        })
    }

    /// Monte Carlo ELBO estimate over the supplied noise draws, optionally
    /// with its gradient. Samples are evaluated in parallel and reduced in
    /// sample order.
    pub fn estimate(&self, eps: &[EpsDraw], with_grad: bool) -> Result<ElboEstimate> {
        self.validate(eps)?;
        let outs: Vec<Result<SampleOut>> = eps.par_iter().map(|e| self.sample(e, with_grad)).collect();
        let mut samples = Vec::with_capacity(outs.len());
        for (s, o) in outs.into_iter().enumerate() {
            match o {
                Ok(o) if o.ll.is_finite() => samples.push(o),
                Ok(o) => {
                    return Err(Error::NonFiniteElbo {
                        iteration: 0,
                        sample: s,
                        detail: format!("log-likelihood {}", o.ll),
                    })
                }
                Err(Error::NonFinite { op, node }) => {
                    return Err(Error::NonFiniteElbo {
                        iteration: 0,
                        sample: s,
                        detail: format!("`{op}` at tape node {node}"),
                    })
                }
                Err(e) => return Err(e),
            }
        }
        let n = samples.len() as f64;
        let sample_log_lik: Vec<f64> = samples.iter().map(|o| o.ll).collect();
        let mean_ll = sample_log_lik.iter().sum::<f64>() / n;
        let kl = self.kl();
        let value = mean_ll - kl;
        let grad = with_grad.then(|| self.reduce_grads(&samples, n));
        Ok(ElboEstimate {
            value,
            sample_log_lik,
            kl,
            grad,
        })
    }

    fn reduce_grads(&self, samples: &[SampleOut], n: f64) -> ElboGrad {
        let mut latents: Vec<Vec<f64>> = self.latents.iter().map(|q| vec![0.0; 2 * q.len()]).collect();
        let mut phi: Option<Vec<f64>> = samples.first().and_then(|s| s.phi_grad.as_ref()).map(|g| vec![0.0; g.len()]);
        for s in samples {
            for (acc, g) in latents.iter_mut().zip(&s.latent_grads) {
                acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
            }
            if let (Some(acc), Some(g)) = (phi.as_mut(), s.phi_grad.as_ref()) {
                acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
            }
        }
        for (acc, q) in latents.iter_mut().zip(self.latents) {
            kl_grad_sub(acc, q, self.priors.latent.variance, n);
        }
        if let (
            Some(acc),
            Projection::Decoder {
                phi: PhiPosterior::Gaussian(q),
                ..
            },
        ) = (phi.as_mut(), self.projection)
        {
            kl_grad_sub(acc, q, self.priors.decoder.variance, n);
        }
        ElboGrad { latents, phi }
    }

    /// Target-network weights for each task under one noise draw.
    pub fn decode_draw(&self, eps: &EpsDraw) -> Result<Vec<Vec<f64>>> {
        decode_draw(self.latents, self.projection, eps)
    }
}

/// Divides accumulated likelihood gradients by `n` and subtracts the KL gradient.
fn kl_grad_sub(acc: &mut [f64], q: &MeanFieldGaussian, prior_var: f64, n: f64) {
    let d = q.len();
    for i in 0..d {
        acc[i] = acc[i] / n - q.mu[i] / prior_var;
        let ls = q.log_std[i];
        acc[d + i] = acc[d + i] / n - ((2.0 * ls).exp() / prior_var - 1.0);
    }
}

pub(crate) fn decode_draw(
    latents: &[MeanFieldGaussian],
    projection: Projection<'_>,
    eps: &EpsDraw,
) -> Result<Vec<Vec<f64>>> {
    let phi = match projection {
        Projection::Identity => None,
        Projection::Decoder { arch, phi } => Some((arch, phi.draw(&eps.phi)?)),
    };
    latents
        .iter()
        .zip(&eps.z)
        .map(|(q, noise)| {
            let z = super::gaussian::reparam_sample(q, noise)?;
            match &phi {
                None => Ok(z),
                Some((arch, p)) => Ok(mlp_forward_batch(arch, p, &Matrix::new(1, z.len(), z)?)?.data),
            }
        })
        .collect()
}
