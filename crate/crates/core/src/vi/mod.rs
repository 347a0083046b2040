//! Mean-field variational inference over latent codes and decoder parameters,
//! with Bayes by backprop as the special case of an identity projection.

mod elbo;
pub mod gaussian;
mod model;
mod train;

pub use elbo::{
    ElboEstimate, ElboGrad, ElboTerms, EpsDraw, PhiPosterior, Priors, Projection, TaskBatch,
};
pub use gaussian::{kl_gaussian_diag, reparam_sample, MeanFieldGaussian, PriorSpec};
pub use model::{Method, ModelArtifact, VariationalModel, MODEL_SCHEMA_VERSION};
pub use train::{
    train_ablation, train_bbb, train_projbnn, train_projbnn_from, AblationKind, DecoderSource,
    ProjBnnInit, TaskData, TraceEntry, TrainReport, TrainedModel, VarInferenceConfig,
};

pub(crate) use train::fit_projected;

use crate::nn::{Architecture, ObservationModel};

/// `elbo_projbnn` for one task: a single latent factor through a decoder.
#[allow(clippy::too_many_arguments)]
pub fn elbo_projbnn(
    q_z: &MeanFieldGaussian,
    q_phi: &PhiPosterior,
    decoder_arch: &Architecture,
    target_arch: &Architecture,
    batch: &TaskBatch,
    obs: ObservationModel,
    priors: &Priors,
    eps: &[EpsDraw],
) -> crate::Result<f64> {
    let latents = std::slice::from_ref(q_z);
    let terms = ElboTerms {
        latents,
        projection: Projection::Decoder {
            arch: decoder_arch,
            phi: q_phi,
        },
        target_arch,
        batches: std::slice::from_ref(batch),
        obs,
        priors,
    };
    Ok(terms.estimate(eps, false)?.value)
}

/// ELBO of a mean-field Gaussian directly over the target weights.
pub fn elbo_bbb(
    q_w: &MeanFieldGaussian,
    target_arch: &Architecture,
    batch: &TaskBatch,
    obs: ObservationModel,
    prior: &PriorSpec,
    eps: &[Vec<f64>],
) -> crate::Result<f64> {
    let priors = Priors {
        latent: *prior,
        decoder: *prior,
    };
    let draws: Vec<EpsDraw> = eps
        .iter()
        .map(|e| EpsDraw {
            z: vec![e.clone()],
            phi: Vec::new(),
        })
        .collect();
    let terms = ElboTerms {
        latents: std::slice::from_ref(q_w),
        projection: Projection::Identity,
        target_arch,
        batches: std::slice::from_ref(batch),
        obs,
        priors: &priors,
    };
    Ok(terms.estimate(&draws, false)?.value)
}
