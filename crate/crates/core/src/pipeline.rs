//! Declarative end-to-end runs. A [`RunConfig`] names the data, every stage's
//! settings and the inference method; [`run_pipeline`] executes the stages in
//! order, selects the latent dimension and step size on validation data, and
//! writes artifacts to the output directory.
//!
//! Every stage draws from its own seed derived from the run seed, so a stage
//! can be rerun alone from the same config and reproduce its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    gen_sine_tasks, gen_toy_four_modes, gen_toy_latent_rbf, load_csv_table, normalize, split, split_indices,
    toy_rbf_arch, four_mode_arch, write_csv_with, Dataset, Gap, ModeDescriptor, NormStats,
    SplitIndices, SplitKind, SplitSpec,
};
use crate::ensemble::{collect_fge_chains, filter_top_k, train_map, FgeChain, FgeConfig, SnapshotSet};
use crate::error::{Error, Result};
use crate::eval::{mode_coverage, predictive_bands, PredictiveBands, PredictiveSampleSet};
use crate::multitask::{latent_grid_decode, train_meta, LatentGrid, MetaConfig};
use crate::nn::{Activation, Architecture, ObservationModel};
use crate::projector::{train_pcae, AutoencoderParams, DecoderArtifact, PcaeConfig};
use crate::rng::{derive_seed, substream};
use crate::vi::{
    train_ablation, train_bbb, train_projbnn, AblationKind, DecoderSource, Method, ModelArtifact,
    Priors, TrainedModel, VarInferenceConfig, VariationalModel, MODEL_SCHEMA_VERSION,
};

pub const METRICS_SCHEMA_VERSION: u32 = 1;
/// File left in the output directory when a run fails.
pub const FAILURE_MARKER: &str = "FAILED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    ToyRbf,
    FourModes,
    Sine,
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::ToyRbf => "toy-rbf",
            Generator::FourModes => "four-modes",
            Generator::Sine => "sine",
        }
    }
}

impl std::str::FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy-rbf" => Ok(Generator::ToyRbf),
            "four-modes" => Ok(Generator::FourModes),
            "sine" => Ok(Generator::Sine),
            other => Err(Error::Config(format!(
                "unknown dataset kind `{other}` (expected toy-rbf, four-modes or sine)"
            ))),
        }
    }
}

/// Where the data comes from: a generator or a CSV file, not both. With
/// neither set the toy RBF generator is used. A CSV `task` column turns the
/// file into a task set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub generator: Option<Generator>,
    pub csv: Option<PathBuf>,
    pub tasks: usize,
    pub points_per_task: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            generator: None,
            csv: None,
            tasks: 8,
            points_per_task: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub kind: SplitKind,
    pub fractions: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            kind: SplitKind::Random,
            fractions: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples: usize,
    pub quantiles: Vec<f64>,
    pub grid_points: usize,
    /// Band grid extends this fraction of the input range past the data on each side.
    pub grid_margin: f64,
    /// Mode-fit RMSE threshold; `None` means three observation standard deviations.
    pub fit_threshold: Option<f64>,
    pub latent_grid_n: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 500,
            quantiles: vec![0.025, 0.975],
            grid_points: 200,
            grid_margin: 0.25,
            fit_threshold: None,
            latent_grid_n: 10,
        }
    }
}

/// How stage one lays out its harvesting chains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainPlan {
    /// One chain per left-out mode when the data has modes, else a single chain.
    Auto,
    Single,
    LeaveOneModeOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    /// `None`: normalize CSV data, leave generated data in its own units.
    pub normalize: Option<bool>,
    pub target_arch: Option<Architecture>,
    pub obs: ObservationModel,
    pub priors: Priors,
    pub fge: FgeConfig,
    pub chains: ChainPlan,
    pub pcae: PcaeConfig,
    pub vi: VarInferenceConfig,
    pub meta: MetaConfig,
    pub method: Method,
    pub latent_dims: Vec<usize>,
    pub lr_grid: Vec<f64>,
    pub eval: EvalConfig,
    pub seed: u64,
    /// Multiplies snapshot counts and iteration budgets.
    pub scale: f64,
    pub out_dir: Option<PathBuf>,
    /// Existing decoder artifact; skips harvesting and autoencoder training.
    pub decoder: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            split: SplitConfig::default(),
            normalize: None,
            target_arch: None,
            obs: ObservationModel::default(),
            priors: Priors::default(),
            fge: FgeConfig::default(),
            chains: ChainPlan::Auto,
            pcae: PcaeConfig::default(),
            vi: VarInferenceConfig::default(),
            meta: MetaConfig::default(),
            method: Method::Projbnn,
            latent_dims: vec![2, 10, 50, 100],
            lr_grid: vec![0.1, 0.01, 0.001, 0.0001],
            eval: EvalConfig::default(),
            seed: 0,
            scale: 1.0,
            out_dir: None,
            decoder: None,
        }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scale: Option<f64>,
    pub out: Option<PathBuf>,
    pub method: Option<Method>,
    pub latent_dim: Option<usize>,
    pub lr: Option<f64>,
    pub samples: Option<usize>,
}

fn scaled(n: usize, s: f64) -> usize {
    ((n as f64 * s).round() as usize).max(1)
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(s) = o.scale {
            self.scale = s;
        }
        if let Some(p) = &o.out {
            self.out_dir = Some(p.clone());
        }
        if let Some(m) = o.method {
            self.method = m;
        }
        if let Some(d) = o.latent_dim {
            self.latent_dims = vec![d];
            self.meta.latent_dim = d;
        }
        if let Some(lr) = o.lr {
            self.lr_grid = vec![lr];
        }
        if let Some(s) = o.samples {
            self.eval.samples = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.generator.is_some() && self.dataset.csv.is_some() {
            return Err(Error::Config("dataset needs a generator or a csv path, not both".into()));
        }
        if self.dataset.tasks == 0 || self.dataset.points_per_task == 0 {
            return Err(Error::Config("dataset.tasks and dataset.points_per_task must be positive".into()));
        }
        SplitSpec {
            kind: self.split.kind,
            fractions: self.split.fractions,
            seed: 0,
        }
        .validate()
        .map_err(|e| Error::Config(e.to_string()))?;
        if let Some(a) = &self.target_arch {
            a.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.priors.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.fge.validate()?;
        self.pcae.validate()?;
        self.vi.validate()?;
        self.meta.vi.validate()?;
        if self.latent_dims.is_empty() || self.latent_dims.contains(&0) {
            return Err(Error::Config("latent_dims must be a non-empty list of positive sizes".into()));
        }
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("lr_grid must be a non-empty list of positive step sizes".into()));
        }
        let e = &self.eval;
        if e.samples == 0 || e.grid_points < 2 || e.latent_grid_n < 2 {
            return Err(Error::Config(
                "eval needs samples >= 1, grid_points >= 2 and latent_grid_n >= 2".into(),
            ));
        }
        if e.quantiles.is_empty() || e.quantiles.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return Err(Error::Config(format!("eval quantiles must lie in [0, 1], got {:?}", e.quantiles)));
        }
        if !(e.grid_margin >= 0.0 && e.grid_margin.is_finite()) {
            return Err(Error::Config("eval.grid_margin must be non-negative".into()));
        }
        if e.fit_threshold.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::Config("eval.fit_threshold must be positive".into()));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        if self.method == Method::QzOnly && self.decoder.is_none() {
            return Err(Error::Config(
                "method qz_only needs an existing decoder artifact (set `decoder`)".into(),
            ));
        }
        Ok(())
    }

    /// Validated copy with the scale folded into the stage budgets and the
    /// stage seeds derived from the run seed. Resolving twice is a no-op.
    pub fn resolved(&self) -> Result<RunConfig> {
        self.validate()?;
        let mut c = self.clone();
        let s = c.scale;
        c.fge.snapshots = scaled(c.fge.snapshots, s);
        c.fge.keep_top_k = scaled(c.fge.keep_top_k, s).min(c.fge.snapshots);
        c.fge.map_iterations = scaled(c.fge.map_iterations, s);
        c.pcae.iterations = scaled(c.pcae.iterations, s);
        c.vi.max_iterations = scaled(c.vi.max_iterations, s);
        c.scale = 1.0;
        c.fge.seed = derive_seed(c.seed, "fge");
        c.pcae.seed = derive_seed(c.seed, "pcae");
        c.vi.seed = derive_seed(c.seed, "vi");
        c.meta.vi = c.vi.clone();
        Ok(c)
    }

    pub fn dataset_name(&self) -> String {
        match (&self.dataset.csv, self.dataset.generator) {
            (Some(p), _) => p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            (None, g) => g.unwrap_or(Generator::ToyRbf).name().to_string(),
        }
    }
}

/// One task's data in model units.
#[derive(Debug, Clone)]
pub struct TaskSplits {
    pub full: Dataset,
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub train_rows: Vec<usize>,
    pub valid_rows: Vec<usize>,
}

/// Data ready for training: normalized (if requested) and split per task.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub name: String,
    pub target_arch: Architecture,
    pub tasks: Vec<TaskSplits>,
    pub stats: Option<NormStats>,
    /// Four-mode toy only: the modes and the mode of every row of `tasks[0].full`.
    pub modes: Option<(Vec<ModeDescriptor>, Vec<usize>)>,
    /// Toy RBF only: the empty input interval and the densely sampled one, in model units.
    pub regions: Option<(Gap, Gap)>,
}

impl Prepared {
    /// All tasks' splits concatenated, for methods that fit one shared model.
    pub fn pooled(&self) -> Result<TaskSplits> {
        if self.tasks.len() == 1 {
            return Ok(self.tasks[0].clone());
        }
        let cat = |f: fn(&TaskSplits) -> &Dataset| {
            let parts: Vec<&Dataset> = self.tasks.iter().map(f).collect();
            Dataset::concat(self.name.clone(), &parts)
        };
        Ok(TaskSplits {
            full: cat(|t| &t.full)?,
            train: cat(|t| &t.train)?,
            valid: cat(|t| &t.valid)?,
            test: cat(|t| &t.test)?,
            train_rows: Vec::new(),
            valid_rows: Vec::new(),
        })
    }

    fn to_model_x(&self, x: f64) -> f64 {
        match &self.stats {
            Some(s) => (x - s.x.mean[0]) / s.x.std[0],
            None => x,
        }
    }
}

fn default_target_arch(source: Option<Generator>, dx: usize, dy: usize) -> Result<Architecture> {
    match source {
        Some(Generator::ToyRbf) => Ok(toy_rbf_arch()),
        Some(Generator::FourModes) => Ok(four_mode_arch()),
        Some(Generator::Sine) => Architecture::new(vec![1, 20, 1], Activation::Tanh),
        None => Architecture::new(vec![dx, 50, dy], Activation::Relu),
    }
}

fn group_by_task(d: &Dataset, labels: &[String]) -> Result<Vec<Dataset>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (r, l) in labels.iter().enumerate() {
        let t: usize = l.trim().parse().map_err(|_| {
            Error::InvalidArgument(format!("task label `{l}` on row {} is not a task index", r + 1))
        })?;
        groups.entry(t).or_default().push(r);
    }
    if groups.keys().copied().ne(0..groups.len()) {
        return Err(Error::InvalidArgument("task labels must be 0, 1, ..., M-1".into()));
    }
    Ok(groups
        .values()
        .enumerate()
        .map(|(t, rows)| {
            let mut sub = d.subset(rows);
            sub.name = format!("{}-{t}", d.name);
            sub
        })
        .collect())
}

/// Splits the rows that come first in their reflection pair and sends each
/// partner to the same side, so every split stays point-symmetric.
fn mirrored_split(full: &Dataset, mirror: &[usize], spec: &SplitSpec) -> Result<SplitIndices> {
    let half: Vec<usize> = (0..full.len()).filter(|&r| r < mirror[r]).collect();
    let idx = split_indices(&full.subset(&half), spec)?;
    let expand = |rows: Vec<usize>| -> Vec<usize> {
        let mut out: Vec<usize> = rows.iter().flat_map(|&i| [half[i], mirror[half[i]]]).collect();
        out.sort_unstable();
        out
    };
    Ok(SplitIndices {
        train: expand(idx.train),
        valid: expand(idx.valid),
        test: expand(idx.test),
    })
}

/// Generates or loads the data, normalizes it and splits every task.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let source = match (&cfg.dataset.csv, cfg.dataset.generator) {
        (Some(_), _) => None,
        (None, g) => Some(g.unwrap_or(Generator::ToyRbf)),
    };
    let mut modes = None;
    let mut mirror: Option<Vec<usize>> = None;
    let mut regions = None;
    let raw_tasks: Vec<Dataset> = match (source, &cfg.dataset.csv) {
        (Some(Generator::ToyRbf), _) => {
            let toy = gen_toy_latent_rbf(cfg.seed)?;
            regions = Some((toy.gap, Gap { lo: -4.0, hi: toy.gap.lo }));
            vec![toy.data]
        }
        (Some(Generator::FourModes), _) => {
            let toy = gen_toy_four_modes(cfg.seed)?;
            modes = Some((toy.modes, toy.labels));
            mirror = Some(toy.mirror);
            vec![toy.data]
        }
        (Some(Generator::Sine), _) => {
            let set = gen_sine_tasks(cfg.dataset.tasks, cfg.dataset.points_per_task, cfg.seed)?;
            set.tasks.into_iter().map(|t| t.data).collect()
        }
        (None, Some(path)) => {
            let table = load_csv_table(path)?;
            match table.extra.iter().find(|(n, _)| n == "task") {
                Some((_, labels)) => group_by_task(&table.data, labels)?,
                None => vec![table.data],
            }
        }
        (None, None) => unreachable!("source resolved above"),
    };
    let parts: Vec<&Dataset> = raw_tasks.iter().collect();
    let pooled = Dataset::concat(cfg.dataset_name(), &parts)?;
    let target_arch = match &cfg.target_arch {
        Some(a) => a.clone(),
        None => default_target_arch(source, pooled.input_dim(), pooled.output_dim())?,
    };
    if target_arch.input_dim() != pooled.input_dim() || target_arch.output_dim() != pooled.output_dim() {
        return Err(Error::Config(format!(
            "target architecture {target_arch} does not fit data with {} inputs and {} outputs",
            pooled.input_dim(),
            pooled.output_dim()
        )));
    }
    let stats = if cfg.normalize.unwrap_or(source.is_none()) {
        Some(normalize(&pooled)?.1)
    } else {
        None
    };
    let tasks = raw_tasks
        .iter()
        .enumerate()
        .map(|(m, d)| {
            let full = stats.as_ref().map_or_else(|| d.clone(), |s| s.apply(d));
            let spec = SplitSpec {
                kind: cfg.split.kind,
                fractions: cfg.split.fractions,
                seed: derive_seed(cfg.seed, &format!("split-{m}")),
            };
            let idx = match (&mirror, spec.kind) {
                (Some(mirror), SplitKind::Random) => mirrored_split(&full, mirror, &spec)?,
                _ => split_indices(&full, &spec)?,
            };
            Ok(TaskSplits {
                train: full.subset(&idx.train),
                valid: full.subset(&idx.valid),
                test: full.subset(&idx.test),
                full,
                train_rows: idx.train,
                valid_rows: idx.valid,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut p = Prepared {
        name: cfg.dataset_name(),
        target_arch,
        tasks,
        stats,
        modes,
        regions: None,
    };
    p.regions = regions.map(|(gap, dense): (Gap, Gap)| {
        let m = |g: Gap| Gap {
            lo: p.to_model_x(g.lo),
            hi: p.to_model_x(g.hi),
        };
        (m(gap), m(dense))
    });
    Ok(p)
}

fn weight_prior_std(cfg: &RunConfig) -> f64 {
    cfg.priors.latent.variance.sqrt()
}

/// Stage one: MAP fit(s), cyclic-rate harvesting and top-k filtering.
pub fn run_fge(cfg: &RunConfig, p: &Prepared) -> Result<SnapshotSet> {
    let arch = &p.target_arch;
    let data = p.pooled()?;
    let prior_std = weight_prior_std(cfg);
    let plan = match (cfg.chains, &p.modes) {
        (ChainPlan::Auto, Some(_)) | (ChainPlan::LeaveOneModeOut, Some(_)) => ChainPlan::LeaveOneModeOut,
        (ChainPlan::LeaveOneModeOut, None) => {
            return Err(Error::Config("leave_one_mode_out chains need a dataset with modes".into()))
        }
        _ => ChainPlan::Single,
    };
    let parts: Vec<(Dataset, Dataset, FgeConfig)> = match (plan, &p.modes) {
        (ChainPlan::LeaveOneModeOut, Some((modes, labels))) => (0..modes.len())
            .map(|skip| {
                let keep = |rows: &[usize]| -> Vec<usize> {
                    rows.iter().copied().filter(|&r| labels[r] != skip).collect()
                };
                let task = &p.tasks[0];
                let fge = FgeConfig {
                    seed: derive_seed(cfg.fge.seed, &format!("without-mode-{skip}")),
                    ..cfg.fge.clone()
                };
                (task.full.subset(&keep(&task.train_rows)), task.full.subset(&keep(&task.valid_rows)), fge)
            })
            .collect(),
        _ => vec![(data.train.clone(), data.valid.clone(), cfg.fge.clone())],
    };
    let chains = parts
        .into_par_iter()
        .map(|(train, valid, fge)| {
            let start = train_map(arch, &train, cfg.obs, prior_std, &fge)?;
            Ok(FgeChain { start, train, valid })
        })
        .collect::<Result<Vec<_>>>()?;
    let all = collect_fge_chains(arch, &chains, cfg.obs, prior_std, &cfg.fge)?;
    filter_top_k(&all, cfg.fge.keep_top_k)
}

/// Latent sizes from the grid that the target network admits.
pub fn feasible_latent_dims(cfg: &RunConfig, target_arch: &Architecture) -> Result<Vec<usize>> {
    let dw = target_arch.num_params();
    let dims: Vec<usize> = cfg.latent_dims.iter().copied().filter(|&d| d <= dw).collect();
    if dims.is_empty() {
        return Err(Error::Config(format!(
            "no latent dimension in {:?} fits a {dw}-weight target network",
            cfg.latent_dims
        )));
    }
    Ok(dims)
}

/// Stage two for one latent size. The linear ablation uses affine maps.
pub fn run_pcae(cfg: &RunConfig, p: &Prepared, snapshots: &SnapshotSet, latent_dim: usize) -> Result<DecoderArtifact> {
    let mut pc = PcaeConfig {
        latent_dim,
        ..cfg.pcae.clone()
    };
    if cfg.method == Method::Linear {
        pc.hidden.clear();
    }
    let data = p.pooled()?;
    let (params, report) = train_pcae(snapshots, &p.target_arch, &data.train, cfg.obs, &pc)?;
    Ok(DecoderArtifact::new(params, pc, report))
}

/// One cell of the latent-size / step-size grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub latent_dim: Option<usize>,
    pub lr: f64,
    pub valid_marginal_ll: f64,
    pub best_iteration: usize,
    pub iterations_run: usize,
}

/// Index of the cell with the highest validation marginal log-likelihood;
/// ties go to the smaller latent size, then the smaller step size.
pub fn select_cell(cells: &[GridCell]) -> Option<usize> {
    let key = |c: &GridCell| if c.valid_marginal_ll.is_nan() { f64::NEG_INFINITY } else { c.valid_marginal_ll };
    (0..cells.len()).reduce(|best, i| {
        let (a, b) = (&cells[i], &cells[best]);
        let better = key(a)
            .total_cmp(&key(b))
            .then_with(|| b.latent_dim.cmp(&a.latent_dim))
            .then_with(|| b.lr.total_cmp(&a.lr));
        if better.is_gt() {
            i
        } else {
            best
        }
    })
}

/// Decoder a cell starts from.
#[derive(Debug, Clone, Copy)]
pub enum CellDecoder<'a> {
    None,
    Trained(&'a AutoencoderParams),
    Random(usize),
}

/// Stage three for one cell.
pub fn fit_cell(cfg: &RunConfig, p: &Prepared, decoder: CellDecoder<'_>, lr: f64) -> Result<TrainedModel> {
    let vi = VarInferenceConfig {
        lr,
        ..cfg.vi.clone()
    };
    let arch = &p.target_arch;
    if cfg.method == Method::Meta {
        let train: Vec<&Dataset> = p.tasks.iter().map(|t| &t.train).collect();
        let valid: Vec<&Dataset> = p.tasks.iter().map(|t| &t.valid).collect();
        let meta = MetaConfig {
            vi,
            ..cfg.meta.clone()
        };
        return train_meta(&train, &valid, arch, cfg.obs, &meta);
    }
    let d = p.pooled()?;
    let (tr, va) = (&d.train, &d.valid);
    match (cfg.method, decoder) {
        (Method::Bbb, _) => train_bbb(arch, tr, va, cfg.obs, &cfg.priors, &vi),
        (Method::Projbnn, CellDecoder::Trained(ae)) => train_projbnn(ae, arch, tr, va, cfg.obs, &cfg.priors, &vi),
        (Method::Linear, CellDecoder::Trained(ae)) => {
            train_ablation(AblationKind::Linear, DecoderSource::Trained(ae), arch, tr, va, cfg.obs, &cfg.priors, &vi)
        }
        (Method::QzOnly, CellDecoder::Trained(ae)) => {
            train_ablation(AblationKind::QzOnly, DecoderSource::Trained(ae), arch, tr, va, cfg.obs, &cfg.priors, &vi)
        }
        (Method::OneStage, CellDecoder::Random(dz)) => {
            let (_, dec) = PcaeConfig {
                latent_dim: dz,
                ..cfg.pcae.clone()
            }
            .architectures(arch.num_params())?;
            train_ablation(AblationKind::OneStage, DecoderSource::Random(&dec), arch, tr, va, cfg.obs, &cfg.priors, &vi)
        }
        (m, _) => Err(Error::InvalidArgument(format!("method {m} got the wrong kind of decoder"))),
    }
}

fn cell_summary(latent_dim: Option<usize>, lr: f64, t: &TrainedModel) -> GridCell {
    let best = t
        .report
        .checks
        .iter()
        .map(|c| c.valid_ll)
        .fold(f64::NEG_INFINITY, |a, b| if b > a { b } else { a });
    GridCell {
        latent_dim,
        lr,
        valid_marginal_ll: best,
        best_iteration: t.report.best_iteration,
        iterations_run: t.report.iterations_run,
    }
}

/// Fits every grid cell in parallel and returns them with the selected index.
pub fn run_grid(
    cfg: &RunConfig,
    p: &Prepared,
    decoders: &[(usize, CellDecoder<'_>)],
) -> Result<(Vec<(GridCell, TrainedModel)>, usize)> {
    let jobs: Vec<(Option<usize>, CellDecoder<'_>, f64)> = decoders
        .iter()
        .flat_map(|&(dz, dec)| {
            let dz = match dec {
                CellDecoder::None => None,
                _ => Some(dz),
            };
            cfg.lr_grid.iter().map(move |&lr| (dz, dec, lr))
        })
        .collect();
    let fitted = jobs
        .into_par_iter()
        .map(|(dz, dec, lr)| {
            let t = fit_cell(cfg, p, dec, lr)?;
            Ok((cell_summary(dz, lr, &t), t))
        })
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<GridCell> = fitted.iter().map(|(c, _)| c.clone()).collect();
    let best = select_cell(&cells).expect("grid has at least one cell");
    Ok((fitted, best))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: usize,
    pub points: usize,
    pub marginal_ll: f64,
    pub rmse: f64,
}

/// Posterior-predictive evaluation of a model on one test set per task.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub marginal_ll: f64,
    pub rmse: f64,
    pub tasks: Vec<TaskMetrics>,
    /// `weights[task][sample]`.
    pub weights: Vec<Vec<Vec<f64>>>,
}

/// Draws `samples` weight vectors per task from the seed's `eval-samples`
/// stream and scores each task's test set. Pooled values weight every test
/// point equally.
pub fn evaluate_model(
    model: &VariationalModel,
    tests: &[&Dataset],
    obs: ObservationModel,
    samples: usize,
    seed: u64,
) -> Result<Evaluation> {
    model.validate()?;
    if tests.len() != model.num_tasks() {
        return Err(Error::InvalidArgument(format!(
            "model has {} tasks but {} test sets were given",
            model.num_tasks(),
            tests.len()
        )));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one evaluation sample".into()));
    }
    let mut rng = substream(seed, "eval-samples");
    let eps: Vec<_> = (0..samples).map(|_| model.draw_noise(&mut rng)).collect();
    let draws = eps
        .par_iter()
        .map(|e| model.weights_from_noise(e))
        .collect::<Result<Vec<_>>>()?;
    let weights: Vec<Vec<Vec<f64>>> = (0..model.num_tasks())
        .map(|t| draws.iter().map(|d| d[t].clone()).collect())
        .collect();
    let mut tasks = Vec::with_capacity(tests.len());
    let (mut ll_sum, mut se_sum, mut n_sum, mut cells) = (0.0, 0.0, 0usize, 0usize);
    for (t, test) in tests.iter().enumerate() {
        let set = PredictiveSampleSet::from_weights(&model.target_arch, &weights[t], test, obs)?;
        let ll = set.marginal_log_lik()?;
        let rmse = set.mean_prediction_rmse(&test.y.data)?;
        ll_sum += ll * test.len() as f64;
        se_sum += rmse * rmse * test.y.data.len() as f64;
        n_sum += test.len();
        cells += test.y.data.len();
        tasks.push(TaskMetrics {
            task: t,
            points: test.len(),
            marginal_ll: ll,
            rmse,
        });
    }
    Ok(Evaluation {
        marginal_ll: ll_sum / n_sum as f64,
        rmse: (se_sum / cells as f64).sqrt(),
        tasks,
        weights,
    })
}

/// Region-averaged total predictive standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStd {
    pub gap_mean_std: f64,
    pub dense_mean_std: f64,
    pub ratio: f64,
}

fn region_mean(b: &PredictiveBands, g: Gap) -> Option<f64> {
    let vals: Vec<f64> = b
        .x
        .iter()
        .zip(&b.total_std)
        .filter(|(x, _)| g.contains(**x))
        .map(|(_, s)| *s)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn region_std(b: &PredictiveBands, gap: Gap, dense: Gap) -> Option<RegionStd> {
    let g = region_mean(b, gap)?;
    let d = region_mean(b, dense)?;
    Some(RegionStd {
        gap_mean_std: g,
        dense_mean_std: d,
        ratio: g / d,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub schema_version: u32,
    pub method: Method,
    pub dataset: String,
    pub split: String,
    pub seed: u64,
    pub samples: usize,
    pub test_marginal_ll: f64,
    pub test_rmse: f64,
    /// Per-task breakdown when the model has several tasks.
    pub tasks: Vec<TaskMetrics>,
    pub mode_coverage: Option<usize>,
    pub fit_threshold: Option<f64>,
    pub uncertainty: Option<RegionStd>,
    pub selected: Option<GridCell>,
    pub grid: Vec<GridCell>,
    pub wall_clock_seconds: f64,
}

impl Metrics {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Metrics = serde_json::from_str(&text)?;
        if m.schema_version != METRICS_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported metrics schema version {}",
                path.display(),
                m.schema_version
            )));
        }
        Ok(m)
    }

    /// Same document with the timing field cleared, for reproducibility checks.
    pub fn without_timing(&self) -> Metrics {
        Metrics {
            wall_clock_seconds: 0.0,
            ..self.clone()
        }
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Artifact sink: writes under `dir` when set, otherwise does nothing.
#[derive(Debug, Clone)]
pub struct Artifacts {
    dir: Option<PathBuf>,
}

impl Artifacts {
    /// Creates the directory and clears a failure marker left by an earlier run.
    pub fn open(dir: Option<&Path>) -> Result<Self> {
        if let Some(d) = dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let marker = d.join(FAILURE_MARKER);
            if marker.exists() {
                std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
            }
        }
        Ok(Artifacts {
            dir: dir.map(Path::to_path_buf),
        })
    }

    pub fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }

    fn ensure_parent(p: &Path) -> Result<()> {
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(())
    }

    pub fn json<T: Serialize>(&self, name: &str, v: &T) -> Result<()> {
        match self.path(name) {
            Some(p) => {
                Self::ensure_parent(&p)?;
                write_json(&p, v)
            }
            None => Ok(()),
        }
    }

    pub fn text(&self, name: &str, text: &str) -> Result<()> {
        match self.path(name) {
            Some(p) => {
                Self::ensure_parent(&p)?;
                write_text(&p, text)
            }
            None => Ok(()),
        }
    }

    pub fn snapshots(&self, s: &SnapshotSet) -> Result<()> {
        match self.path("snapshots.csv") {
            Some(p) => s.write_csv(p),
            None => Ok(()),
        }
    }

    pub fn fail(&self, stage: &str, e: &Error) {
        if let Some(p) = self.path(FAILURE_MARKER) {
            let _ = std::fs::write(p, format!("stage: {stage}\nerror: {e}\n"));
        }
    }

    /// Test sets in model units, with a `task` column when there are several.
    pub fn splits(&self, p: &Prepared) -> Result<()> {
        let Some(dir) = self.path("splits") else {
            return Ok(());
        };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (name, pick) in [
            ("train", (|t: &TaskSplits| &t.train) as fn(&TaskSplits) -> &Dataset),
            ("valid", |t| &t.valid),
            ("test", |t| &t.test),
        ] {
            let path = dir.join(format!("{name}.csv"));
            if p.tasks.len() == 1 {
                write_csv_with(pick(&p.tasks[0]), &[], &path)?;
            } else {
                let parts: Vec<&Dataset> = p.tasks.iter().map(pick).collect();
                let labels: Vec<String> = parts
                    .iter()
                    .enumerate()
                    .flat_map(|(t, d)| std::iter::repeat_n(t.to_string(), d.len()))
                    .collect();
                let all = Dataset::concat(name, &parts)?;
                write_csv_with(&all, &[("task", labels)], &path)?;
            }
        }
        Ok(())
    }
}

/// Everything a pipeline run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config: RunConfig,
    pub prepared: Prepared,
    pub snapshots: Option<SnapshotSet>,
    pub decoder: Option<DecoderArtifact>,
    pub model: ModelArtifact,
    pub metrics: Metrics,
    pub bands: Option<PredictiveBands>,
    pub latent_grid: Option<LatentGrid>,
}

/// Loads a decoder artifact and checks it against the target network.
pub fn load_decoder(path: &Path, target_arch: &Architecture) -> Result<DecoderArtifact> {
    let a = DecoderArtifact::load(path)?;
    a.params.check_target(target_arch)?;
    Ok(a)
}

/// Posterior-predictive metrics, bands, mode coverage and the latent grid for
/// a fitted model on prepared data.
pub fn evaluate_prepared(
    cfg: &RunConfig,
    p: &Prepared,
    model: &VariationalModel,
) -> Result<(Metrics, Option<PredictiveBands>, Option<LatentGrid>)> {
    let pooled;
    let tests: Vec<&Dataset> = if model.num_tasks() == p.tasks.len() {
        p.tasks.iter().map(|t| &t.test).collect()
    } else {
        pooled = p.pooled()?;
        vec![&pooled.test]
    };
    let ev = evaluate_model(model, &tests, cfg.obs, cfg.eval.samples, cfg.seed)?;
    let arch = &model.target_arch;
    let threshold = cfg.eval.fit_threshold.unwrap_or(3.0 * cfg.obs.sigma_y);
    let coverage = match &p.modes {
        Some((modes, _)) if model.num_tasks() == 1 => {
            let full = &p.tasks[0].full;
            let set = PredictiveSampleSet::from_weights(arch, &ev.weights[0], full, cfg.obs)?;
            Some(mode_coverage(&set.predictions, &full.y.data, modes, threshold))
        }
        _ => None,
    };
    let one_d = arch.input_dim() == 1 && arch.output_dim() == 1;
    let bands = if one_d && model.num_tasks() == 1 && ev.weights[0].len() >= 2 {
        let xs = &p.pooled()?.full.x.data;
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = cfg.eval.grid_margin * (hi - lo);
        let n = cfg.eval.grid_points;
        let grid: Vec<f64> = (0..n)
            .map(|i| lo - pad + (hi - lo + 2.0 * pad) * i as f64 / (n - 1) as f64)
            .collect();
        Some(predictive_bands(arch, &ev.weights[0], &grid, &cfg.eval.quantiles, cfg.obs)?)
    } else {
        None
    };
    let uncertainty = match (&bands, p.regions) {
        (Some(b), Some((gap, dense))) => region_std(b, gap, dense),
        _ => None,
    };
    let latent_grid = match (&model.decoder_arch, &model.phi) {
        (Some(dec), Some(phi)) if cfg.method == Method::Meta && dec.input_dim() == 2 && one_d => {
            let n = cfg.eval.grid_points;
            let (lo, hi) = (p.to_model_x(-4.0), p.to_model_x(4.0));
            let xg: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
            Some(latent_grid_decode(phi.mean(), dec, arch, cfg.eval.latent_grid_n, &xg)?)
        }
        _ => None,
    };
    let metrics = Metrics {
        schema_version: METRICS_SCHEMA_VERSION,
        method: cfg.method,
        dataset: p.name.clone(),
        split: format!("{:?}", cfg.split.kind).to_lowercase(),
        seed: cfg.seed,
        samples: cfg.eval.samples,
        test_marginal_ll: ev.marginal_ll,
        test_rmse: ev.rmse,
        tasks: if ev.tasks.len() > 1 { ev.tasks } else { Vec::new() },
        mode_coverage: coverage,
        fit_threshold: coverage.map(|_| threshold),
        uncertainty,
        selected: None,
        grid: Vec::new(),
        wall_clock_seconds: 0.0,
    };
    Ok((metrics, bands, latent_grid))
}

/// Runs every stage the method needs, in order, printing one line per stage
/// through `log`. On failure the output directory keeps whatever was written
/// plus a failure marker naming the stage.
pub fn run_pipeline(cfg: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<RunOutcome> {
    let cfg = cfg.resolved()?;
    let out = Artifacts::open(cfg.out_dir.as_deref())?;
    let mut stage = "data";
    let result = run_stages(&cfg, &out, &mut stage, log);
    if let Err(e) = &result {
        out.fail(stage, e);
    }
    result
}

fn run_stages(
    cfg: &RunConfig,
    out: &Artifacts,
    stage: &mut &'static str,
    log: &mut dyn FnMut(&str),
) -> Result<RunOutcome> {
    let started = Instant::now();
    out.json("config.json", cfg)?;
    let p = prepare(cfg)?;
    out.splits(&p)?;
    let n_train: usize = p.tasks.iter().map(|t| t.train.len()).sum();
    let n_test: usize = p.tasks.iter().map(|t| t.test.len()).sum();
    log(&format!(
        "data: {} with {} task(s), {n_train} train / {n_test} test rows, target {} ({} weights)",
        p.name,
        p.tasks.len(),
        p.target_arch,
        p.target_arch.num_params()
    ));

    let method = cfg.method;
    let mut snapshots = None;
    let mut decoders: Vec<(usize, DecoderArtifact)> = Vec::new();
    let mut decoder_ref = None;
    if let Some(path) = &cfg.decoder {
        if method.uses_autoencoder() {
            *stage = "pcae";
            let d = load_decoder(path, &p.target_arch)?;
            if method == Method::Linear && d.params.decoder_arch.has_hidden_layer() {
                return Err(Error::Config(format!(
                    "{}: the linear ablation needs an affine decoder",
                    path.display()
                )));
            }
            log(&format!("pcae: reusing {} (latent dim {})", path.display(), d.params.latent_dim));
            decoder_ref = Some(path.display().to_string());
            decoders.push((d.params.latent_dim, d));
        }
    } else if method.uses_autoencoder() {
        *stage = "fge";
        let s = run_fge(cfg, &p)?;
        out.snapshots(&s)?;
        let chains = s.chain.iter().max().map_or(0, |c| c + 1);
        log(&format!(
            "fge: kept {} of {} snapshots from {chains} chain(s), valid rmse {:.4}..{:.4}",
            s.len(),
            cfg.fge.snapshots,
            s.valid_rmse.first().copied().unwrap_or(f64::NAN),
            s.valid_rmse.last().copied().unwrap_or(f64::NAN)
        ));

        *stage = "pcae";
        let dims = feasible_latent_dims(cfg, &p.target_arch)?;
        let trained = dims
            .par_iter()
            .map(|&dz| run_pcae(cfg, &p, &s, dz).map(|d| (dz, d)))
            .collect::<Result<Vec<_>>>()?;
        for (dz, d) in &trained {
            out.json(&format!("decoders/dz{dz}.json"), d)?;
            log(&format!(
                "pcae: latent dim {dz}, loss {:.4} -> {:.4}, reconstruction mse {:.4}, decoded train ll {:.4}",
                d.report.initial_loss, d.report.final_loss, d.report.reconstruction_mse, d.report.mean_train_log_lik
            ));
        }
        decoders = trained;
        snapshots = Some(s);
    }

    *stage = "vi";
    let cell_decoders: Vec<(usize, CellDecoder<'_>)> = match method {
        Method::Bbb => vec![(0, CellDecoder::None)],
        Method::Meta => vec![(cfg.meta.latent_dim, CellDecoder::Random(cfg.meta.latent_dim))],
        Method::OneStage => feasible_latent_dims(cfg, &p.target_arch)?
            .into_iter()
            .map(|d| (d, CellDecoder::Random(d)))
            .collect(),
        _ => decoders.iter().map(|(d, a)| (*d, CellDecoder::Trained(&a.params))).collect(),
    };
    let (mut fitted, best) = run_grid(cfg, &p, &cell_decoders)?;
    let grid: Vec<GridCell> = fitted.iter().map(|(c, _)| c.clone()).collect();
    let (selected, trained) = fitted.swap_remove(best);
    log(&format!(
        "vi: {} cell(s), selected latent dim {} lr {} with valid marginal ll {:.4} (best iteration {} of {})",
        grid.len(),
        selected.latent_dim.map_or("-".to_string(), |d| d.to_string()),
        selected.lr,
        selected.valid_marginal_ll,
        selected.best_iteration,
        selected.iterations_run
    ));
    let decoder = selected
        .latent_dim
        .and_then(|dz| decoders.iter().find(|(d, _)| *d == dz))
        .map(|(_, a)| a.clone());
    if let Some(d) = &decoder {
        if decoder_ref.is_none() {
            out.json("decoder.json", d)?;
            decoder_ref = Some("decoder.json".into());
        }
    }
    let model = ModelArtifact {
        schema_version: MODEL_SCHEMA_VERSION,
        method,
        target_fingerprint: p.target_arch.fingerprint(),
        model: trained.model,
        decoder_ref,
        priors: if method == Method::Meta { cfg.meta.priors } else { cfg.priors },
        obs: cfg.obs,
        config: VarInferenceConfig {
            lr: selected.lr,
            ..cfg.vi.clone()
        },
        seed: cfg.seed,
        trace: trained.report.checks.clone(),
    };
    out.json("model.json", &model)?;

    *stage = "eval";
    let (mut metrics, bands, latent_grid) = evaluate_prepared(cfg, &p, &model.model)?;
    metrics.selected = Some(selected);
    metrics.grid = grid;
    metrics.wall_clock_seconds = started.elapsed().as_secs_f64();
    if let Some(b) = &bands {
        out.text("bands.csv", &b.to_csv())?;
    }
    if let Some(g) = &latent_grid {
        out.text("latent_grid.csv", &g.to_csv())?;
    }
    out.json("metrics.json", &metrics)?;
    let mut line = format!(
        "eval: test marginal ll {:.4}, rmse {:.4} over {} samples",
        metrics.test_marginal_ll, metrics.test_rmse, metrics.samples
    );
    if let Some(c) = metrics.mode_coverage {
        line.push_str(&format!(", mode coverage {c}"));
    }
    if let Some(u) = &metrics.uncertainty {
        line.push_str(&format!(", gap/dense std ratio {:.3}", u.ratio));
    }
    log(&line);
    Ok(RunOutcome {
        config: cfg.clone(),
        prepared: p,
        snapshots,
        decoder,
        model,
        metrics,
        bands,
        latent_grid,
    })
}

/// Splits a CSV for stand-alone evaluation: every row (`None`) or the test
/// part of the given split kind under the run seed. Rows with a `task`
/// column are grouped per task.
pub fn eval_datasets(path: &Path, split_kind: Option<SplitKind>, seed: u64) -> Result<Vec<Dataset>> {
    let table = load_csv_table(path)?;
    let tasks = match table.extra.iter().find(|(n, _)| n == "task") {
        Some((_, labels)) => group_by_task(&table.data, labels)?,
        None => vec![table.data],
    };
    match split_kind {
        None => Ok(tasks),
        Some(kind) => tasks
            .iter()
            .enumerate()
            .map(|(m, d)| {
                let spec = SplitSpec {
                    kind,
                    fractions: SplitConfig::default().fractions,
                    seed: derive_seed(seed, &format!("split-{m}")),
                };
                Ok(split(d, &spec)?.test)
            })
            .collect(),
    }
}

/// Recomputes test metrics from a stored model and a CSV in model units.
pub fn evaluate_stored(
    model_path: &Path,
    data_path: &Path,
    split_kind: Option<SplitKind>,
    samples: usize,
) -> Result<Metrics> {
    let started = Instant::now();
    let art = ModelArtifact::load(model_path)?;
    let tests = eval_datasets(data_path, split_kind, art.seed)?;
    let pooled;
    let refs: Vec<&Dataset> = if tests.len() == art.model.num_tasks() {
        tests.iter().collect()
    } else if art.model.num_tasks() == 1 {
        let parts: Vec<&Dataset> = tests.iter().collect();
        pooled = Dataset::concat("pooled", &parts)?;
        vec![&pooled]
    } else {
        return Err(Error::InvalidArgument(format!(
            "{} has {} task(s) but the model has {}",
            data_path.display(),
            tests.len(),
            art.model.num_tasks()
        )));
    };
    let ev = evaluate_model(&art.model, &refs, art.obs, samples, art.seed)?;
    Ok(Metrics {
        schema_version: METRICS_SCHEMA_VERSION,
        method: art.method,
        dataset: data_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        split: split_kind.map_or("all".into(), |k| format!("{k:?}").to_lowercase()),
        seed: art.seed,
        samples,
        test_marginal_ll: ev.marginal_ll,
        test_rmse: ev.rmse,
        tasks: if ev.tasks.len() > 1 { ev.tasks } else { Vec::new() },
        mode_coverage: None,
        fit_threshold: None,
        uncertainty: None,
        selected: None,
        grid: Vec::new(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}
