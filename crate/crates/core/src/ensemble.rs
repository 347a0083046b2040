//! Stage one: reach a MAP solution, then harvest weight snapshots along a
//! cyclic learning-rate trajectory and keep the ones that validate best.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::rmse;
use crate::nn::{log_joint, log_lik_tape, mlp_forward_batch, Architecture, ObservationModel, Tape, WeightVector};
use crate::optim::{sgd_step, Adam};
use crate::rng::{derive_seed, standard_normals, substream, StageRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FgeConfig {
    pub map_lr: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub cycle_epochs: usize,
    pub snapshots: usize,
    pub keep_top_k: usize,
    pub map_iterations: usize,
    /// Independent MAP runs; the one with the highest log joint is kept.
    pub map_restarts: usize,
    pub batch_size: usize,
    pub map_optimizer: OptimizerKind,
    pub cycle_optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for FgeConfig {
    fn default() -> Self {
        FgeConfig {
            map_lr: 0.001,
            lr_max: 0.01,
            lr_min: 0.0001,
            cycle_epochs: 10,
            snapshots: 500,
            keep_top_k: 150,
            map_iterations: 5000,
            map_restarts: 1,
            batch_size: 128,
            map_optimizer: OptimizerKind::Adam,
            cycle_optimizer: OptimizerKind::Sgd,
            seed: 0,
        }
    }
}

impl FgeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > self.lr_min && self.lr_min > 0.0) {
            return Err(Error::Config(format!(
                "need lr_max > lr_min > 0, got {} and {}",
                self.lr_max, self.lr_min
            )));
        }
        if !(self.snapshots >= self.keep_top_k && self.keep_top_k >= 1) {
            return Err(Error::Config(format!(
                "need snapshots >= keep_top_k >= 1, got {} and {}",
                self.snapshots, self.keep_top_k
            )));
        }
        if self.batch_size == 0 || self.cycle_epochs == 0 || self.map_restarts == 0 {
            return Err(Error::Config(
                "batch_size, cycle_epochs and map_restarts must be positive".into(),
            ));
        }
        if !(self.map_lr > 0.0) {
            return Err(Error::Config("map_lr must be positive".into()));
        }
        Ok(())
    }
}

/// Harvested weights with their validation RMSE, in harvest order unless filtered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSet {
    pub weights: Vec<WeightVector>,
    pub valid_rmse: Vec<f64>,
    pub arch_fingerprint: String,
    /// Chain that produced each snapshot; all zero for a single chain.
    #[serde(default)]
    pub chain: Vec<usize>,
}

impl SnapshotSet {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        if self.weights.len() != self.valid_rmse.len() || self.weights.len() != self.chain.len() {
            return Err(Error::shape(
                "snapshot set",
                self.weights.len(),
                format!("{} rmse / {} chain entries", self.valid_rmse.len(), self.chain.len()),
            ));
        }
        if self.arch_fingerprint != arch.fingerprint() {
            return Err(Error::Fingerprint {
                expected: arch.fingerprint(),
                found: self.arch_fingerprint.clone(),
            });
        }
        for w in &self.weights {
            w.matches(arch)?;
        }
        if self.valid_rmse.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::InvalidArgument("snapshot rmse must be non-negative".into()));
        }
        Ok(())
    }

    /// Snapshot file: header `valid_rmse,w_0,...`, one snapshot per row.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dw = self.weights.first().map_or(0, WeightVector::len);
        let mut out = String::from("valid_rmse");
        for i in 0..dw {
            out.push_str(&format!(",w_{i}"));
        }
        out.push('\n');
        for (w, r) in self.weights.iter().zip(&self.valid_rmse) {
            out.push_str(&format!("{r}"));
            for v in &w.values {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(arch: &Architecture, path: impl AsRef<Path>) -> Result<SnapshotSet> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let headers = reader.headers()?.clone();
        if headers.get(0) != Some("valid_rmse") || headers.len() != arch.num_params() + 1 {
            return Err(Error::CsvFormat {
                path: path.to_path_buf(),
                message: format!(
                    "expected `valid_rmse` plus {} weight columns",
                    arch.num_params()
                ),
            });
        }
        let mut weights = Vec::new();
        let mut valid_rmse = Vec::new();
        for (r, rec) in reader.records().enumerate() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    s.trim().parse::<f64>().map_err(|_| Error::CsvCell {
                        path: path.to_path_buf(),
                        row: r + 1,
                        column: headers[c].to_string(),
                        message: format!("`{s}` is not a number"),
                    })
                })
                .collect::<Result<_>>()?;
            valid_rmse.push(vals[0]);
            weights.push(WeightVector::new(arch, vals[1..].to_vec())?);
        }
        let n = weights.len();
        let set = SnapshotSet {
            weights,
            valid_rmse,
            arch_fingerprint: arch.fingerprint(),
            chain: vec![0; n],
        };
        set.validate(arch)?;
        Ok(set)
    }
}

/// Linear decay from `lr_max` at the first iteration of a cycle to `lr_min` at the last.
pub fn cyclic_lr(t: usize, cycle_len: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if cycle_len < 2 {
        return Err(Error::InvalidArgument(format!(
            "cycle length must be at least 2, got {cycle_len}"
        )));
    }
    if t >= cycle_len {
        return Err(Error::InvalidArgument(format!(
            "iteration {t} outside cycle of length {cycle_len}"
        )));
    }
    if t == cycle_len - 1 {
        return Ok(lr_min);
    }
    Ok(lr_max - (lr_max - lr_min) * t as f64 / (cycle_len - 1) as f64)
}

/// Shuffled mini-batches over `n` rows; a new permutation every epoch.
pub(crate) struct Batcher {
    n: usize,
    batch_size: usize,
    order: Vec<usize>,
    pos: usize,
    rng: StageRng,
}

impl Batcher {
    pub(crate) fn new(n: usize, batch_size: usize, rng: StageRng) -> Self {
        let mut b = Batcher {
            n,
            batch_size: batch_size.max(1),
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub(crate) fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    pub(crate) fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.n {
            self.reshuffle();
        }
        let end = (self.pos + self.batch_size).min(self.n);
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

/// Gaussian initialization: `N(0, 1/fan_in)` for weights, `N(0, 1)` for biases.
pub fn init_weights<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> WeightVector {
    let mut values = Vec::with_capacity(arch.num_params());
    for l in arch.layers() {
        let scale = 1.0 / (l.fan_in as f64).sqrt();
        values.extend(standard_normals(rng, l.weight_len()).into_iter().map(|v| v * scale));
        if l.bias {
            values.extend(standard_normals(rng, l.fan_out));
        }
    }
    WeightVector {
        values,
        arch_fingerprint: arch.fingerprint(),
    }
}

/// Per-observation negative log joint on a mini-batch, `-(N/|B| Σ_B log p(y|x,w) + log p(w)) / N`,
/// and its gradient.
pub fn minibatch_neg_log_joint(
    arch: &Architecture,
    w: &[f64],
    data: &Dataset,
    batch: &[usize],
    obs: ObservationModel,
    prior_std: f64,
) -> Result<(f64, Vec<f64>)> {
    let n = data.len() as f64;
    let x = data.x.select_rows(batch);
    let y = data.y.select_rows(batch);
    let tape = Tape::new();
    let wv = tape.row(w);
    let xv = tape.input(x.data, x.rows, x.cols)?;
    let yv = tape.input(y.data, y.rows, y.cols)?;
    let ll = log_lik_tape(&tape, arch, wv, xv, yv, obs)?;
    let zeros = tape.row(&vec![0.0; w.len()]);
    let prior = tape.gaussian_log_density(wv, zeros, prior_std)?;
    let scaled = tape.scale(ll, n / batch.len() as f64);
    let joint = tape.add(scaled, prior)?;
    let loss = tape.scale(joint, -1.0 / n);
    tape.check_finite()?;
    let g = tape.backward(loss)?;
    Ok((tape.scalar(loss), g.get(wv)))
}

fn check_step(iteration: usize, loss: f64, grad: &[f64]) -> Result<()> {
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            iteration,
            detail: format!("loss {loss}"),
        });
    }
    Ok(())
}

fn wrap_nonfinite(iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op, node } => Error::Diverged {
            iteration,
            detail: format!("non-finite `{op}` at tape node {node}"),
        },
        other => other,
    }
}

/// Adam (or SGD) at fixed step size `map_lr` on the mini-batch negative log
/// joint, starting from a seeded initialization. With several restarts the
/// runs are independent and the highest full-data log joint wins, ties going
/// to the earlier restart.
pub fn train_map(
    arch: &Architecture,
    train: &Dataset,
    obs: ObservationModel,
    prior_std: f64,
    cfg: &FgeConfig,
) -> Result<WeightVector> {
    cfg.validate()?;
    let runs = (0..cfg.map_restarts)
        .into_par_iter()
        .map(|r| {
            let seed = if r == 0 { cfg.seed } else { derive_seed(cfg.seed, &format!("map-restart-{r}")) };
            let init = init_weights(arch, &mut substream(seed, "map-init"));
            let w = train_map_from(arch, init, train, obs, prior_std, &FgeConfig { seed, ..cfg.clone() })?;
            let score = if cfg.map_restarts > 1 {
                log_joint(arch, &w, &train.x, &train.y, obs, prior_std)?
            } else {
                0.0
            };
            Ok((score, w))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<(f64, WeightVector)> = None;
    for (score, w) in runs {
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, w));
        }
    }
    Ok(best.expect("at least one restart").1)
}

pub fn train_map_from(
    arch: &Architecture,
    init: WeightVector,
    train: &Dataset,
    obs: ObservationModel,
    prior_std: f64,
    cfg: &FgeConfig,
) -> Result<WeightVector> {
    cfg.validate()?;
    init.matches(arch)?;
    let mut w = init.values;
    let mut batcher = Batcher::new(train.len(), cfg.batch_size, substream(cfg.seed, "map-batches"));
    let mut adam = Adam::new(w.len(), cfg.map_lr);
    for it in 0..cfg.map_iterations {
        let batch = batcher.next_batch();
        let (loss, grad) = minibatch_neg_log_joint(arch, &w, train, &batch, obs, prior_std)
            .map_err(|e| wrap_nonfinite(it, e))?;
        check_step(it, loss, &grad)?;
        match cfg.map_optimizer {
            OptimizerKind::Adam => adam.step(&mut w, &grad),
            OptimizerKind::Sgd => sgd_step(&mut w, &grad, cfg.map_lr),
        }
    }
    WeightVector::new(arch, w)
}

/// Root-mean-squared prediction error of `w` on `data`.
pub fn weight_rmse(arch: &Architecture, w: &[f64], data: &Dataset) -> Result<f64> {
    let pred = mlp_forward_batch(arch, w, &data.x)?;
    rmse(&pred.data, &data.y.data)
}

/// Runs `n_snapshots` learning-rate cycles from `start`, recording the
/// weights at the end of each cycle (where the rate is `lr_min`).
pub fn collect_fge_snapshots(
    arch: &Architecture,
    start: &WeightVector,
    train: &Dataset,
    valid: &Dataset,
    obs: ObservationModel,
    prior_std: f64,
    cfg: &FgeConfig,
) -> Result<SnapshotSet> {
    let chain = FgeChain {
        start: start.clone(),
        train: train.clone(),
        valid: valid.clone(),
    };
    collect_chain(arch, &chain, cfg.snapshots, 0, obs, prior_std, cfg)
}

/// Starting point and data for one harvesting chain.
#[derive(Debug, Clone)]
pub struct FgeChain {
    pub start: WeightVector,
    pub train: Dataset,
    pub valid: Dataset,
}

fn collect_chain(
    arch: &Architecture,
    chain: &FgeChain,
    n_snapshots: usize,
    chain_index: usize,
    obs: ObservationModel,
    prior_std: f64,
    cfg: &FgeConfig,
) -> Result<SnapshotSet> {
    cfg.validate()?;
    chain.start.matches(arch)?;
    let seed = derive_seed(cfg.seed, &format!("fge-chain-{chain_index}"));
    let mut batcher = Batcher::new(chain.train.len(), cfg.batch_size, substream(seed, "batches"));
    let cycle_len = (cfg.cycle_epochs * batcher.batches_per_epoch()).max(2);
    let mut w = chain.start.values.clone();
    let mut adam = Adam::new(w.len(), cfg.lr_max);
    let mut weights = Vec::with_capacity(n_snapshots);
    let mut iteration = 0;
    for _ in 0..n_snapshots {
        for t in 0..cycle_len {
            let lr = cyclic_lr(t, cycle_len, cfg.lr_max, cfg.lr_min)?;
            let batch = batcher.next_batch();
            let (loss, grad) = minibatch_neg_log_joint(arch, &w, &chain.train, &batch, obs, prior_std)
                .map_err(|e| wrap_nonfinite(iteration, e))?;
            check_step(iteration, loss, &grad)?;
            match cfg.cycle_optimizer {
                OptimizerKind::Sgd => sgd_step(&mut w, &grad, lr),
                OptimizerKind::Adam => {
                    adam.lr = lr;
                    adam.step(&mut w, &grad);
                }
            }
            iteration += 1;
        }
        weights.push(WeightVector::new(arch, w.clone())?);
    }
    let valid_rmse = weights
        .par_iter()
        .map(|wv| weight_rmse(arch, &wv.values, &chain.valid))
        .collect::<Result<Vec<f64>>>()?;
    Ok(SnapshotSet {
        weights,
        valid_rmse,
        arch_fingerprint: arch.fingerprint(),
        chain: vec![chain_index; n_snapshots],
    })
}

/// Several independent chains sharing the snapshot budget `cfg.snapshots`
/// (split as evenly as possible, earlier chains take the remainder). Each
/// snapshot is scored on its own chain's validation data. Chains run in
/// parallel and are merged in chain order.
pub fn collect_fge_chains(
    arch: &Architecture,
    chains: &[FgeChain],
    obs: ObservationModel,
    prior_std: f64,
    cfg: &FgeConfig,
) -> Result<SnapshotSet> {
    if chains.is_empty() {
        return Err(Error::InvalidArgument("need at least one chain".into()));
    }
    let base = cfg.snapshots / chains.len();
    let extra = cfg.snapshots % chains.len();
    let parts = chains
        .par_iter()
        .enumerate()
        .map(|(i, c)| collect_chain(arch, c, base + usize::from(i < extra), i, obs, prior_std, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut out = SnapshotSet {
        weights: Vec::new(),
        valid_rmse: Vec::new(),
        arch_fingerprint: arch.fingerprint(),
        chain: Vec::new(),
    };
    for p in parts {
        out.weights.extend(p.weights);
        out.valid_rmse.extend(p.valid_rmse);
        out.chain.extend(p.chain);
    }
    Ok(out)
}

/// The `k` lowest-RMSE snapshots in ascending RMSE order; ties keep harvest order.
pub fn filter_top_k(s: &SnapshotSet, k: usize) -> Result<SnapshotSet> {
    if k > s.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot keep {k} of {} snapshots",
            s.len()
        )));
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.valid_rmse[a].total_cmp(&s.valid_rmse[b]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(SnapshotSet {
        weights: order.iter().map(|&i| s.weights[i].clone()).collect(),
        valid_rmse: order.iter().map(|&i| s.valid_rmse[i]).collect(),
        arch_fingerprint: s.arch_fingerprint.clone(),
        chain: order.iter().map(|&i| s.chain.get(i).copied().unwrap_or(0)).collect(),
    })
}
