use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use projbnn::data::{gen_sine_tasks, gen_toy_four_modes, gen_toy_latent_rbf, write_csv_with, Dataset, SplitKind};
use projbnn::ensemble::SnapshotSet;
use projbnn::pipeline::{
    evaluate_stored, feasible_latent_dims, Generator, prepare, run_fge, run_pcae, run_pipeline, Artifacts, Overrides,
    RunConfig,
};
use projbnn::vi::Method;

#[derive(Parser)]
#[command(name = "projbnn", version, about = "Projected Bayesian neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV.
    GenData(GenDataArgs),
    /// Find a MAP estimate and harvest cyclic-learning-rate snapshots.
    Fge(RunArgs),
    /// Train prediction-constrained autoencoders on harvested snapshots.
    Pcae(PcaeArgs),
    /// Variational inference, then evaluation.
    Vi(ViArgs),
    /// Recompute test metrics from a stored model.
    Eval(EvalArgs),
    /// Multi-task fit with per-task latents and a shared decoder; defaults to the sine family.
    Meta(RunArgs),
    /// Every stage the method needs, in order.
    Pipeline(ViArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    ToyRbf,
    FourModes,
    Sine,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; defaults to `<kind>.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    tasks: usize,
    #[arg(long, default_value_t = 50)]
    points: usize,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Multiplies snapshot counts and iteration budgets.
    #[arg(long)]
    scale: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Posterior samples for evaluation.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct PcaeArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Snapshot CSV from an earlier `fge` run; harvested afresh when omitted.
    #[arg(long)]
    snapshots: Option<PathBuf>,
}

#[derive(Args)]
struct ViArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Existing decoder artifact; skips harvesting and autoencoder training.
    #[arg(long)]
    decoder: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSplit {
    All,
    Random,
    Extrapolation,
    Interpolation,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV in model units, e.g. `splits/test.csv` from a pipeline run.
    #[arg(long)]
    data: PathBuf,
    /// Evaluate every row, or the test part of a split drawn with the model's seed.
    #[arg(long, value_enum, default_value_t = EvalSplit::All)]
    split: EvalSplit,
    #[arg(long, default_value_t = 500)]
    samples: usize,
    /// Metrics JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Bad invocation or configuration; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.downcast_ref::<Usage>().is_some()
                || matches!(e.downcast_ref::<projbnn::Error>(), Some(projbnn::Error::Config(_)));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(&a),
        Command::Fge(a) => fge(&a),
        Command::Pcae(a) => pcae(&a),
        Command::Vi(a) => vi(&a),
        Command::Eval(a) => eval(&a),
        Command::Meta(a) => {
            if a.method.is_some_and(|m| m != Method::Meta) {
                return Err(usage("the meta subcommand always uses method meta"));
            }
            let mut cfg = load_config(&a)?;
            cfg.method = Method::Meta;
            if cfg.dataset.generator.is_none() && cfg.dataset.csv.is_none() {
                cfg.dataset.generator = Some(Generator::Sine);
            }
            pipeline(&cfg)
        }
        Command::Pipeline(a) => {
            let mut cfg = load_config(&a.run)?;
            if a.decoder.is_some() {
                cfg.decoder = a.decoder.clone();
            }
            pipeline(&cfg)
        }
    }
}

fn load_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) if !p.exists() => return Err(usage(format!("{}: no such config file", p.display()))),
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: a.seed,
        scale: a.scale,
        out: a.out.clone(),
        method: a.method,
        latent_dim: a.latent_dim,
        lr: a.lr,
        samples: a.samples,
    });
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig, cmd: &str) -> Result<PathBuf> {
    cfg.out_dir
        .clone()
        .ok_or_else(|| usage(format!("{cmd} writes artifacts and needs --out (or out_dir in the config)")))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let name = Kind::to_possible_value(&a.kind).map(|v| v.get_name().to_string()).unwrap_or_default();
    let path = a.out.clone().unwrap_or_else(|| PathBuf::from(format!("{name}.csv")));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    match a.kind {
        Kind::ToyRbf => {
            let toy = gen_toy_latent_rbf(a.seed)?;
            write_csv_with(&toy.data, &[], &path)?;
            println!("wrote {} rows to {}", toy.data.len(), path.display());
        }
        Kind::FourModes => {
            let toy = gen_toy_four_modes(a.seed)?;
            let labels = toy.labels.iter().map(|l| l.to_string()).collect();
            write_csv_with(&toy.data, &[("mode", labels)], &path)?;
            println!("wrote {} rows in {} modes to {}", toy.data.len(), toy.modes.len(), path.display());
        }
        Kind::Sine => {
            let set = gen_sine_tasks(a.tasks, a.points, a.seed)?;
            let parts = set.datasets();
            let labels = parts
                .iter()
                .enumerate()
                .flat_map(|(t, d)| std::iter::repeat_n(t.to_string(), d.len()))
                .collect();
            let all = Dataset::concat("sine", &parts)?;
            write_csv_with(&all, &[("task", labels)], &path)?;
            let manifest: Vec<serde_json::Value> = set
                .tasks
                .iter()
                .enumerate()
                .map(|(t, s)| serde_json::json!({ "task": t, "amplitude": s.amplitude, "phase": s.phase, "points": s.data.len() }))
                .collect();
            let manifest_path = path.with_extension("tasks.json");
            std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")
                .with_context(|| format!("writing {}", manifest_path.display()))?;
            println!("wrote {} tasks to {} and {}", set.len(), path.display(), manifest_path.display());
        }
    }
    Ok(())
}

fn fge(a: &RunArgs) -> Result<()> {
    let cfg = load_config(a)?.resolved()?;
    let out = Artifacts::open(Some(&out_dir(&cfg, "fge")?))?;
    out.json("config.json", &cfg)?;
    let p = prepare(&cfg)?;
    out.splits(&p)?;
    let s = run_fge(&cfg, &p)?;
    out.snapshots(&s)?;
    println!(
        "fge: kept {} of {} snapshots, valid rmse {:.4}..{:.4}",
        s.len(),
        cfg.fge.snapshots,
        s.valid_rmse.first().copied().unwrap_or(f64::NAN),
        s.valid_rmse.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn pcae(a: &PcaeArgs) -> Result<()> {
    let cfg = load_config(&a.run)?.resolved()?;
    let out = Artifacts::open(Some(&out_dir(&cfg, "pcae")?))?;
    let p = prepare(&cfg)?;
    let snapshots = match &a.snapshots {
        Some(path) => SnapshotSet::read_csv(&p.target_arch, path)?,
        None => {
            let s = run_fge(&cfg, &p)?;
            out.snapshots(&s)?;
            s
        }
    };
    for dz in feasible_latent_dims(&cfg, &p.target_arch)? {
        let d = run_pcae(&cfg, &p, &snapshots, dz)?;
        out.json(&format!("decoders/dz{dz}.json"), &d)?;
        println!(
            "pcae: latent dim {dz}, reconstruction mse {:.4}, decoded train ll {:.4}",
            d.report.reconstruction_mse, d.report.mean_train_log_lik
        );
    }
    Ok(())
}

fn vi(a: &ViArgs) -> Result<()> {
    let mut cfg = load_config(&a.run)?;
    if a.decoder.is_some() {
        cfg.decoder = a.decoder.clone();
    }
    if cfg.method.uses_autoencoder() && cfg.decoder.is_none() {
        bail!(usage(format!(
            "method {} needs a decoder artifact (--decoder); use `pipeline` to train one",
            cfg.method
        )));
    }
    pipeline(&cfg)
}

fn pipeline(cfg: &RunConfig) -> Result<()> {
    let outcome = run_pipeline(cfg, &mut |line| println!("{line}"))?;
    if let Some(dir) = &outcome.config.out_dir {
        println!("artifacts in {}", dir.display());
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    if a.samples == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    for p in [&a.model, &a.data] {
        if !p.exists() {
            bail!("{}: no such file", p.display());
        }
    }
    let split = match a.split {
        EvalSplit::All => None,
        EvalSplit::Random => Some(SplitKind::Random),
        EvalSplit::Extrapolation => Some(SplitKind::Extrapolation),
        EvalSplit::Interpolation => Some(SplitKind::Interpolation),
    };
    let m = evaluate_stored(&a.model, &a.data, split, a.samples)?;
    println!(
        "eval: test marginal ll {:.4}, rmse {:.4} over {} samples",
        m.test_marginal_ll, m.test_rmse, m.samples
    );
    if let Some(out) = &a.out {
        write_metrics(out, &m)?;
    }
    Ok(())
}

fn write_metrics(path: &Path, m: &projbnn::pipeline::Metrics) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    m.save(path)?;
    Ok(())
}
