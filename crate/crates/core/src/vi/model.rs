use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::elbo::{decode_draw, EpsDraw, PhiPosterior, Priors, Projection};
use super::gaussian::MeanFieldGaussian;
use super::train::{TraceEntry, VarInferenceConfig};
use crate::error::{Error, Result};
use crate::nn::{mlp_forward_batch, Architecture, Matrix, ObservationModel};
use crate::rng::standard_normals;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// A fitted variational posterior over target-network weights. Without a
/// decoder the latent factor is the weight vector itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalModel {
    pub target_arch: Architecture,
    pub decoder_arch: Option<Architecture>,
    /// One factor per task.
    pub latents: Vec<MeanFieldGaussian>,
    pub phi: Option<PhiPosterior>,
}

impl VariationalModel {
    pub fn num_tasks(&self) -> usize {
        self.latents.len()
    }

    pub fn projection(&self) -> Projection<'_> {
        match (&self.decoder_arch, &self.phi) {
            (Some(arch), Some(phi)) => Projection::Decoder { arch, phi },
            _ => Projection::Identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latents.is_empty() {
            return Err(Error::InvalidArgument("model has no latent factors".into()));
        }
        let dw = self.target_arch.num_params();
        match (&self.decoder_arch, &self.phi) {
            (None, None) => {
                if let Some(q) = self.latents.iter().find(|q| q.len() != dw) {
                    return Err(Error::shape("weight posterior", dw, q.len()));
                }
            }
            (Some(dec), Some(phi)) => {
                if dec.output_dim() != dw {
                    return Err(Error::shape("decoder output", dw, dec.output_dim()));
                }
                if phi.len() != dec.num_params() {
                    return Err(Error::shape("decoder parameters", dec.num_params(), phi.len()));
                }
                if let Some(q) = self.latents.iter().find(|q| q.len() != dec.input_dim()) {
                    return Err(Error::shape("latent dimension", dec.input_dim(), q.len()));
                }
            }
            _ => return Err(Error::InvalidArgument("decoder architecture and parameters must come together".into())),
        }
        Ok(())
    }

    /// One noise draw for every task plus the decoder.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> EpsDraw {
        EpsDraw {
            z: self.latents.iter().map(|q| standard_normals(rng, q.len())).collect(),
            phi: standard_normals(rng, self.phi.as_ref().map_or(0, PhiPosterior::noise_len)),
        }
    }

    /// Weight vectors of every task for one noise draw.
    pub fn weights_from_noise(&self, eps: &EpsDraw) -> Result<Vec<Vec<f64>>> {
        decode_draw(&self.latents, self.projection(), eps)
    }

    /// `n` posterior weight samples for `task`.
    pub fn sample_weights<R: Rng + ?Sized>(&self, task: usize, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        if task >= self.num_tasks() {
            return Err(Error::InvalidArgument(format!(
                "task {task} out of range for {} tasks",
                self.num_tasks()
            )));
        }
        (0..n)
            .map(|_| {
                let eps = self.draw_noise(rng);
                self.weights_from_noise(&eps).map(|mut w| w.swap_remove(task))
            })
            .collect()
    }

    /// Weights decoded from the variational means.
    pub fn mean_weights(&self, task: usize) -> Result<Vec<f64>> {
        let q = self
            .latents
            .get(task)
            .ok_or_else(|| Error::InvalidArgument(format!("task {task} out of range")))?;
        match self.projection() {
            Projection::Identity => Ok(q.mu.clone()),
            Projection::Decoder { arch, phi } => {
                Ok(mlp_forward_batch(arch, phi.mean(), &Matrix::new(1, q.len(), q.mu.clone())?)?.data)
            }
        }
    }
}

/// Inference method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Projbnn,
    Bbb,
    Linear,
    OneStage,
    QzOnly,
    Meta,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Projbnn => "projbnn",
            Method::Bbb => "bbb",
            Method::Linear => "linear",
            Method::OneStage => "one_stage",
            Method::QzOnly => "qz_only",
            Method::Meta => "meta",
        }
    }

    /// Whether the method harvests snapshots and trains an autoencoder first.
    pub fn uses_autoencoder(self) -> bool {
        matches!(self, Method::Projbnn | Method::Linear | Method::QzOnly)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "projbnn" => Method::Projbnn,
            "bbb" => Method::Bbb,
            "linear" => Method::Linear,
            "one_stage" => Method::OneStage,
            "qz_only" => Method::QzOnly,
            "meta" => Method::Meta,
            other => {
                return Err(Error::Config(format!(
                    "unknown method `{other}` (expected projbnn, bbb, linear, one_stage, qz_only or meta)"
                )))
            }
        })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Stored fit: everything needed to evaluate without the training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArtifact {
    pub schema_version: u32,
    pub method: Method,
    pub target_fingerprint: String,
    pub model: VariationalModel,
    /// Path of the decoder artifact the fit started from, if any.
    pub decoder_ref: Option<String>,
    pub priors: Priors,
    pub obs: ObservationModel,
    pub config: VarInferenceConfig,
    pub seed: u64,
    pub trace: Vec<TraceEntry>,
}

impl ModelArtifact {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let a: ModelArtifact = serde_json::from_str(&text)?;
        if a.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported model schema version {}",
                path.display(),
                a.schema_version
            )));
        }
        let found = a.model.target_arch.fingerprint();
        if found != a.target_fingerprint {
            return Err(Error::Fingerprint {
                expected: a.target_fingerprint,
                found,
            });
        }
        a.model.validate()?;
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::rng::substream;

    fn model() -> VariationalModel {
        let target = Architecture::new(vec![1, 2, 1], Activation::Tanh).unwrap();
        let dec = Architecture::affine(2, target.num_params(), true).unwrap();
        let phi: Vec<f64> = (0..dec.num_params()).map(|i| 0.01 * i as f64).collect();
        VariationalModel {
            target_arch: target,
            decoder_arch: Some(dec),
            latents: vec![MeanFieldGaussian::new(vec![0.1, -0.2], vec![-1.0, -2.0]).unwrap()],
            phi: Some(PhiPosterior::Fixed { values: phi }),
        }
    }

    #[test]
    fn zero_noise_gives_mean_weights() {
        let m = model();
        let eps = EpsDraw {
            z: vec![vec![0.0, 0.0]],
            phi: vec![],
        };
        assert_eq!(m.weights_from_noise(&eps).unwrap()[0], m.mean_weights(0).unwrap());
    }

    #[test]
    fn artifact_roundtrip_and_fingerprint_check() {
        let m = model();
        let a = ModelArtifact {
            schema_version: MODEL_SCHEMA_VERSION,
            method: Method::QzOnly,
            target_fingerprint: m.target_arch.fingerprint(),
            model: m,
            decoder_ref: Some("decoder.json".into()),
            priors: Priors::default(),
            obs: ObservationModel::default(),
            config: VarInferenceConfig::default(),
            seed: 3,
            trace: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        a.save(&p).unwrap();
        assert_eq!(ModelArtifact::load(&p).unwrap(), a);
        let mut bad = a.clone();
        bad.target_fingerprint = "0000000000000000".into();
        bad.save(&p).unwrap();
        assert!(matches!(ModelArtifact::load(&p), Err(Error::Fingerprint { .. })));
    }

    #[test]
    fn sampling_is_seeded() {
        let m = model();
        let a = m.sample_weights(0, 4, &mut substream(1, "s")).unwrap();
        let b = m.sample_weights(0, 4, &mut substream(1, "s")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(m.sample_weights(1, 1, &mut substream(1, "s")).is_err());
    }

    #[test]
    fn method_names_roundtrip() {
        for m in [Method::Projbnn, Method::Bbb, Method::Linear, Method::OneStage, Method::QzOnly, Method::Meta] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("vae".parse::<Method>().is_err());
    }
}
