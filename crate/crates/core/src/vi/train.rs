use serde::{Deserialize, Serialize};

use super::elbo::{decode_draw, ElboTerms, EpsDraw, PhiPosterior, Priors, Projection, TaskBatch};
use super::gaussian::MeanFieldGaussian;
use super::model::VariationalModel;
use crate::data::Dataset;
use crate::ensemble::{init_weights, Batcher};
use crate::error::{Error, Result};
use crate::eval::logmeanexp;
use crate::nn::{pointwise_log_lik, Architecture, ObservationModel};
use crate::optim::Adam;
use crate::projector::AutoencoderParams;
use crate::rng::{standard_normals, substream, StageRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarInferenceConfig {
    pub mc_samples: usize,
    pub lr: f64,
    pub max_iterations: usize,
    pub early_stop_patience: usize,
    pub check_every: usize,
    pub eval_samples: usize,
    pub batch_size: usize,
    pub phi_logstd_init_mean: f64,
    pub phi_logstd_init_std: f64,
    pub seed: u64,
}

impl Default for VarInferenceConfig {
    fn default() -> Self {
        VarInferenceConfig {
            mc_samples: 20,
            lr: 0.01,
            max_iterations: 50_000,
            early_stop_patience: 30,
            check_every: 100,
            eval_samples: 100,
            batch_size: 128,
            phi_logstd_init_mean: -9.0,
            phi_logstd_init_std: 0.1,
            seed: 0,
        }
    }
}

impl VarInferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 || self.eval_samples == 0 {
            return Err(Error::Config("mc_samples and eval_samples must be at least 1".into()));
        }
        if self.early_stop_patience == 0 || self.check_every == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "early_stop_patience, check_every and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.phi_logstd_init_std >= 0.0) {
            return Err(Error::Config("phi_logstd_init_std must be non-negative".into()));
        }
        Ok(())
    }
}

/// One early-stopping check. Iteration 0 is the initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    /// ELBO estimate of the step that produced this state; absent initially.
    pub train_elbo: Option<f64>,
    pub valid_ll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// ELBO estimate at every optimizer step, before the step is applied.
    pub elbo_trace: Vec<f64>,
    pub checks: Vec<TraceEntry>,
    /// Iteration whose parameters were returned.
    pub best_iteration: usize,
    pub iterations_run: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: VariationalModel,
    pub report: TrainReport,
}

/// Datasets the trainer sees, one entry per task.
#[derive(Debug, Clone, Copy)]
pub struct TaskData<'a> {
    pub train: &'a [&'a Dataset],
    pub valid: &'a [&'a Dataset],
}

/// Pooled validation marginal log-likelihood with a fixed set of noise draws.
pub(crate) struct Validator<'a> {
    valid: &'a [&'a Dataset],
    target_arch: &'a Architecture,
    obs: ObservationModel,
    eps: Vec<EpsDraw>,
}

impl<'a> Validator<'a> {
    fn new(
        valid: &'a [&'a Dataset],
        target_arch: &'a Architecture,
        obs: ObservationModel,
        eps: Vec<EpsDraw>,
    ) -> Self {
        Validator {
            valid,
            target_arch,
            obs,
            eps,
        }
    }

    fn is_active(&self) -> bool {
        self.valid.iter().any(|d| !d.is_empty())
    }

    fn score(&self, latents: &[MeanFieldGaussian], projection: Projection<'_>) -> Result<f64> {
        let draws = self
            .eps
            .iter()
            .map(|e| decode_draw(latents, projection, e))
            .collect::<Result<Vec<_>>>()?;
        let mut total = 0.0;
        let mut count = 0usize;
        for (m, d) in self.valid.iter().enumerate() {
            if d.is_empty() {
                continue;
            }
            let per_sample = draws
                .iter()
                .map(|ws| pointwise_log_lik(self.target_arch, &ws[m], &d.x, &d.y, self.obs))
                .collect::<Result<Vec<_>>>()?;
            for n in 0..d.len() {
                let v: Vec<f64> = per_sample.iter().map(|s| s[n]).collect();
                total += logmeanexp(&v);
            }
            count += d.len();
        }
        Ok(total / count as f64)
    }
}

/// Variational state under optimization.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct FitState {
    pub latents: Vec<MeanFieldGaussian>,
    pub phi: Option<PhiPosterior>,
}

impl FitState {
    fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for q in &self.latents {
            v.extend(q.to_flat());
        }
        if let Some(PhiPosterior::Gaussian(q)) = &self.phi {
            v.extend(q.to_flat());
        }
        v
    }

    fn unflatten(&mut self, flat: &[f64]) {
        let mut at = 0;
        for q in &mut self.latents {
            let n = 2 * q.len();
            *q = MeanFieldGaussian::from_flat(&flat[at..at + n]);
            at += n;
        }
        if let Some(PhiPosterior::Gaussian(q)) = &mut self.phi {
            let n = 2 * q.len();
            *q = MeanFieldGaussian::from_flat(&flat[at..at + n]);
        }
    }

    fn projection<'a>(&'a self, decoder_arch: Option<&'a Architecture>) -> Projection<'a> {
        match (decoder_arch, &self.phi) {
            (Some(arch), Some(phi)) => Projection::Decoder { arch, phi },
            _ => Projection::Identity,
        }
    }
}

pub(crate) struct FitProblem<'a> {
    pub decoder_arch: Option<&'a Architecture>,
    pub target_arch: &'a Architecture,
    pub data: TaskData<'a>,
    pub obs: ObservationModel,
    pub priors: Priors,
}

fn draw_eps(
    state: &FitState,
    samples: usize,
    latent_rng: &mut StageRng,
    phi_rng: &mut StageRng,
) -> Vec<EpsDraw> {
    let phi_len = state.phi.as_ref().map_or(0, PhiPosterior::noise_len);
    (0..samples)
        .map(|_| EpsDraw {
            z: state.latents.iter().map(|q| standard_normals(latent_rng, q.len())).collect(),
            phi: standard_normals(phi_rng, phi_len),
        })
        .collect()
}

/// Adam ascent on the ELBO with periodic validation checks. `score` maps a
/// state to the validation metric; the state with the best score (the initial
/// state counts as a check) is returned.
pub(crate) fn fit(
    problem: &FitProblem<'_>,
    init: FitState,
    cfg: &VarInferenceConfig,
    score: &mut dyn FnMut(&FitState) -> Result<Option<f64>>,
) -> Result<(FitState, TrainReport)> {
    cfg.validate()?;
    problem.priors.validate()?;
    let tasks = problem.data.train.len();
    if tasks != init.latents.len() {
        return Err(Error::shape("tasks", init.latents.len(), tasks));
    }
    let mut batchers: Vec<Batcher> = problem
        .data
        .train
        .iter()
        .enumerate()
        .map(|(m, d)| Batcher::new(d.len(), cfg.batch_size, substream(cfg.seed, &format!("vi-batches-{m}"))))
        .collect();
    let mut latent_rng = substream(cfg.seed, "vi-eps-latent");
    let mut phi_rng = substream(cfg.seed, "vi-eps-phi");

    let mut state = init;
    let mut params = state.flatten();
    let mut adam = Adam::new(params.len(), cfg.lr);
    let mut report = TrainReport {
        elbo_trace: Vec::new(),
        checks: Vec::new(),
        best_iteration: 0,
        iterations_run: 0,
        stopped_early: false,
    };
    let mut best: Option<(f64, FitState)> = None;
    let mut bad_checks = 0usize;
    if let Some(v) = score(&state)? {
        report.checks.push(TraceEntry {
            iteration: 0,
            train_elbo: None,
            valid_ll: v,
        });
        best = Some((v, state.clone()));
    }

    for it in 0..cfg.max_iterations {
        let batches: Vec<TaskBatch> = problem
            .data
            .train
            .iter()
            .zip(&mut batchers)
            .map(|(d, b)| TaskBatch::rows(d, &b.next_batch()))
            .collect();
        let eps = draw_eps(&state, cfg.mc_samples, &mut latent_rng, &mut phi_rng);
        let terms = ElboTerms {
            latents: &state.latents,
            projection: state.projection(problem.decoder_arch),
            target_arch: problem.target_arch,
            batches: &batches,
            obs: problem.obs,
            priors: &problem.priors,
        };
        let est = terms.estimate(&eps, true).map_err(|e| match e {
            Error::NonFiniteElbo { sample, detail, .. } => Error::NonFiniteElbo {
                iteration: it,
                sample,
                detail,
            },
            other => other,
        })?;
        let g = est.grad.expect("gradient requested");
        let mut neg: Vec<f64> = Vec::with_capacity(params.len());
        for l in &g.latents {
            neg.extend(l.iter().map(|v| -v));
        }
        if let Some(p) = &g.phi {
            neg.extend(p.iter().map(|v| -v));
        }
        if let Some(bad) = neg.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteElbo {
                iteration: it,
                sample: 0,
                detail: format!("non-finite gradient component {bad}"),
            });
        }
        report.elbo_trace.push(est.value);
        adam.step(&mut params, &neg);
        state.unflatten(&params);
        report.iterations_run = it + 1;

        if (it + 1) % cfg.check_every == 0 {
            if let Some(v) = score(&state)? {
                report.checks.push(TraceEntry {
                    iteration: it + 1,
                    train_elbo: Some(est.value),
                    valid_ll: v,
                });
                let improved = best.as_ref().is_none_or(|(b, _)| v > *b);
                if improved {
                    best = Some((v, state.clone()));
                    report.best_iteration = it + 1;
                    bad_checks = 0;
                } else {
                    bad_checks += 1;
                    if bad_checks >= cfg.early_stop_patience {
                        report.stopped_early = true;
                        break;
                    }
                }
            }
        }
    }
    match best {
        Some((_, s)) => Ok((s, report)),
        None => {
            report.best_iteration = report.iterations_run;
            Ok((state, report))
        }
    }
}

fn run(
    problem: &FitProblem<'_>,
    init: FitState,
    cfg: &VarInferenceConfig,
) -> Result<(FitState, TrainReport)> {
    let mut eval_rng = substream(cfg.seed, "vi-eval");
    let eval_eps = draw_eps(&init, cfg.eval_samples, &mut eval_rng, &mut substream(cfg.seed, "vi-eval-phi"));
    let validator = Validator::new(problem.data.valid, problem.target_arch, problem.obs, eval_eps);
    let mut score = |s: &FitState| -> Result<Option<f64>> {
        if !validator.is_active() {
            return Ok(None);
        }
        validator.score(&s.latents, s.projection(problem.decoder_arch)).map(Some)
    };
    fit(problem, init, cfg, &mut score)
}

fn check_tasks(data: &TaskData<'_>, target_arch: &Architecture) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("need at least one training task".into()));
    }
    if data.valid.len() != data.train.len() {
        return Err(Error::shape("validation tasks", data.train.len(), data.valid.len()));
    }
    for d in data.train.iter().chain(data.valid) {
        if d.is_empty() {
            continue;
        }
        if d.input_dim() != target_arch.input_dim() || d.output_dim() != target_arch.output_dim() {
            return Err(Error::shape(
                "dataset columns",
                format!("{}/{}", target_arch.input_dim(), target_arch.output_dim()),
                format!("{}/{}", d.input_dim(), d.output_dim()),
            ));
        }
    }
    Ok(())
}

/// Bayes by backprop: a mean-field Gaussian over every weight, initialized at the prior.
pub fn train_bbb(
    target_arch: &Architecture,
    train: &Dataset,
    valid: &Dataset,
    obs: ObservationModel,
    priors: &Priors,
    cfg: &VarInferenceConfig,
) -> Result<TrainedModel> {
    let tr = [train];
    let va = [valid];
    let data = TaskData {
        train: &tr,
        valid: &va,
    };
    check_tasks(&data, target_arch)?;
    let problem = FitProblem {
        decoder_arch: None,
        target_arch,
        data,
        obs,
        priors: *priors,
    };
    let init = FitState {
        latents: vec![MeanFieldGaussian::from_prior(target_arch.num_params(), &priors.latent)],
        phi: None,
    };
    let (state, report) = run(&problem, init, cfg)?;
    Ok(TrainedModel {
        model: VariationalModel {
            target_arch: target_arch.clone(),
            decoder_arch: None,
            latents: state.latents,
            phi: None,
        },
        report,
    })
}

/// Starting point for a projected fit: a decoder and its initial parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjBnnInit {
    pub decoder_arch: Architecture,
    pub phi_init: Vec<f64>,
    /// Keep φ fixed at `phi_init` and learn only `q(z)`.
    pub freeze_phi: bool,
}

impl ProjBnnInit {
    pub fn from_autoencoder(ae: &AutoencoderParams) -> Self {
        ProjBnnInit {
            decoder_arch: ae.decoder_arch.clone(),
            phi_init: ae.phi.values.clone(),
            freeze_phi: false,
        }
    }

    /// Randomly initialized decoder parameters drawn from the seed's
    /// `one-stage-phi` stream.
    pub fn random(decoder_arch: &Architecture, seed: u64) -> Self {
        let phi = init_weights(decoder_arch, &mut substream(seed, "one-stage-phi"));
        ProjBnnInit {
            decoder_arch: decoder_arch.clone(),
            phi_init: phi.values,
            freeze_phi: false,
        }
    }

    pub(crate) fn phi_posterior(&self, cfg: &VarInferenceConfig) -> PhiPosterior {
        if self.freeze_phi {
            return PhiPosterior::Fixed {
                values: self.phi_init.clone(),
            };
        }
        let mut rng = substream(cfg.seed, "vi-phi-logstd");
        let log_std = standard_normals(&mut rng, self.phi_init.len())
            .into_iter()
            .map(|e| cfg.phi_logstd_init_mean + cfg.phi_logstd_init_std * e)
            .collect();
        PhiPosterior::Gaussian(MeanFieldGaussian {
            mu: self.phi_init.clone(),
            log_std,
        })
    }
}

pub(crate) fn fit_projected(
    init: &ProjBnnInit,
    target_arch: &Architecture,
    data: TaskData<'_>,
    obs: ObservationModel,
    priors: &Priors,
    cfg: &VarInferenceConfig,
) -> Result<TrainedModel> {
    check_tasks(&data, target_arch)?;
    init.decoder_arch.check_weights(&init.phi_init)?;
    if init.decoder_arch.output_dim() != target_arch.num_params() {
        return Err(Error::shape(
            "decoder output",
            target_arch.num_params(),
            init.decoder_arch.output_dim(),
        ));
    }
    let latent_dim = init.decoder_arch.input_dim();
    let problem = FitProblem {
        decoder_arch: Some(&init.decoder_arch),
        target_arch,
        data,
        obs,
        priors: *priors,
    };
    let start = FitState {
        latents: vec![MeanFieldGaussian::from_prior(latent_dim, &priors.latent); data.train.len()],
        phi: Some(init.phi_posterior(cfg)),
    };
    let (state, report) = run(&problem, start, cfg)?;
    Ok(TrainedModel {
        model: VariationalModel {
            target_arch: target_arch.clone(),
            decoder_arch: Some(init.decoder_arch.clone()),
            latents: state.latents,
            phi: state.phi,
        },
        report,
    })
}

/// Projected BNN from an explicit decoder initialization.
pub fn train_projbnn_from(
    init: &ProjBnnInit,
    target_arch: &Architecture,
    train: &Dataset,
    valid: &Dataset,
    obs: ObservationModel,
    priors: &Priors,
    cfg: &VarInferenceConfig,
) -> Result<TrainedModel> {
    let tr = [train];
    let va = [valid];
    fit_projected(
        init,
        target_arch,
        TaskData {
            train: &tr,
            valid: &va,
        },
        obs,
        priors,
        cfg,
    )
}

/// Projected BNN: `μ_φ` starts at the autoencoder's decoder, `q(z)` at the prior.
pub fn train_projbnn(
    ae: &AutoencoderParams,
    target_arch: &Architecture,
    train: &Dataset,
    valid: &Dataset,
    obs: ObservationModel,
    priors: &Priors,
    cfg: &VarInferenceConfig,
) -> Result<TrainedModel> {
    ae.check_target(target_arch)?;
    train_projbnn_from(&ProjBnnInit::from_autoencoder(ae), target_arch, train, valid, obs, priors, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    /// Affine decoder from a linear autoencoder.
    Linear,
    /// No snapshot harvesting or autoencoder; random decoder initialization.
    OneStage,
    /// Decoder fixed at the autoencoder solution; only `q(z)` is learned.
    QzOnly,
}

/// Where an ablation gets its decoder.
#[derive(Debug, Clone, Copy)]
pub enum DecoderSource<'a> {
    Trained(&'a AutoencoderParams),
    Random(&'a Architecture),
}

#[allow(clippy::too_many_arguments)]
pub fn train_ablation(
    kind: AblationKind,
    source: DecoderSource<'_>,
    target_arch: &Architecture,
    train: &Dataset,
    valid: &Dataset,
    obs: ObservationModel,
    priors: &Priors,
    cfg: &VarInferenceConfig,
) -> Result<TrainedModel> {
    let init = match (kind, source) {
        (AblationKind::OneStage, DecoderSource::Random(arch)) => ProjBnnInit::random(arch, cfg.seed),
        (AblationKind::OneStage, DecoderSource::Trained(_)) => {
            return Err(Error::InvalidArgument(
                "the one-stage ablation takes a decoder architecture, not a trained autoencoder".into(),
            ))
        }
        (_, DecoderSource::Random(_)) => {
            return Err(Error::InvalidArgument(format!(
                "the {kind:?} ablation needs a trained autoencoder"
            )))
        }
        (AblationKind::Linear, DecoderSource::Trained(ae)) => {
            if ae.decoder_arch.has_hidden_layer() {
                return Err(Error::Architecture("linear ablation needs an affine decoder".into()));
            }
            ae.check_target(target_arch)?;
            ProjBnnInit::from_autoencoder(ae)
        }
        (AblationKind::QzOnly, DecoderSource::Trained(ae)) => {
            ae.check_target(target_arch)?;
            ProjBnnInit {
                freeze_phi: true,
                ..ProjBnnInit::from_autoencoder(ae)
            }
        }
    };
    train_projbnn_from(&init, target_arch, train, valid, obs, priors, cfg)
}
