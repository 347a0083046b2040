//! Stage two: a prediction-constrained autoencoder over harvested weight
//! vectors. The loss trades reconstruction error against the data
//! log-likelihood of the reconstructed weights; the trained decoder seeds the
//! variational fit.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::ensemble::{init_weights, Batcher, SnapshotSet};
use crate::error::{Error, Result};
use crate::nn::{
    log_lik_tape, mlp_forward_batch, mlp_forward_tape, pointwise_log_lik, Activation, Architecture,
    Matrix, ObservationModel, Tape, WeightVector,
};
use crate::optim::Adam;
use crate::rng::{standard_normals, substream};

pub const DECODER_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcaeConfig {
    pub beta: f64,
    pub input_noise_std: f64,
    pub lr: f64,
    pub iterations: usize,
    pub batch_over_snapshots: usize,
    /// Rows of training data per predictive-term evaluation; `None` uses all rows.
    pub data_batch: Option<usize>,
    pub latent_dim: usize,
    /// Hidden widths of the decoder; the encoder mirrors them. Empty gives
    /// affine maps.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Shift and rescale the latent space after training so the snapshot
    /// codes have zero mean and this standard deviation per dimension.
    pub latent_code_std: Option<f64>,
    pub seed: u64,
}

impl Default for PcaeConfig {
    fn default() -> Self {
        PcaeConfig {
            beta: 1.0,
            input_noise_std: 1.0,
            lr: 0.01,
            iterations: 3000,
            batch_over_snapshots: 32,
            data_batch: None,
            latent_dim: 2,
            hidden: vec![20],
            activation: Activation::Rbf,
            latent_code_std: Some(0.1f64.sqrt()),
            seed: 0,
        }
    }
}

impl PcaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if !(self.input_noise_std >= 0.0 && self.input_noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "input_noise_std must be non-negative, got {}",
                self.input_noise_std
            )));
        }
        if !(self.lr > 0.0) || self.batch_over_snapshots == 0 || self.latent_dim == 0 {
            return Err(Error::Config(
                "lr, batch_over_snapshots and latent_dim must be positive".into(),
            ));
        }
        if self.data_batch == Some(0) || self.hidden.contains(&0) {
            return Err(Error::Config("data_batch and hidden widths must be positive".into()));
        }
        if let Some(s) = self.latent_code_std {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config("latent_code_std must be positive".into()));
            }
        }
        Ok(())
    }

    /// Encoder `D_w → hidden → D_z` and mirrored decoder `D_z → hidden → D_w`.
    pub fn architectures(&self, dw: usize) -> Result<(Architecture, Architecture)> {
        autoencoder_archs(dw, self.latent_dim, &self.hidden, self.activation)
    }
}

pub fn autoencoder_archs(
    dw: usize,
    latent_dim: usize,
    hidden: &[usize],
    activation: Activation,
) -> Result<(Architecture, Architecture)> {
    if latent_dim > dw {
        return Err(Error::Architecture(format!(
            "latent dimension {latent_dim} exceeds weight dimension {dw}"
        )));
    }
    if hidden.is_empty() {
        return Ok((
            Architecture::affine(dw, latent_dim, true)?,
            Architecture::affine(latent_dim, dw, true)?,
        ));
    }
    let mut enc = vec![dw];
    enc.extend(hidden.iter().rev());
    enc.push(latent_dim);
    let mut dec = vec![latent_dim];
    dec.extend(hidden);
    dec.push(dw);
    Ok((Architecture::new(enc, activation)?, Architecture::new(dec, activation)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderParams {
    pub encoder_arch: Architecture,
    pub decoder_arch: Architecture,
    pub theta: WeightVector,
    pub phi: WeightVector,
    pub latent_dim: usize,
    /// Fingerprint of the target network whose weights are encoded.
    pub target_fingerprint: String,
}

impl AutoencoderParams {
    pub fn new(
        encoder_arch: Architecture,
        decoder_arch: Architecture,
        theta: WeightVector,
        phi: WeightVector,
        target_arch: &Architecture,
    ) -> Result<Self> {
        let p = AutoencoderParams {
            latent_dim: decoder_arch.input_dim(),
            encoder_arch,
            decoder_arch,
            theta,
            phi,
            target_fingerprint: target_arch.fingerprint(),
        };
        p.validate()?;
        p.check_target(target_arch)?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.theta.matches(&self.encoder_arch)?;
        self.phi.matches(&self.decoder_arch)?;
        if self.encoder_arch.output_dim() != self.latent_dim || self.decoder_arch.input_dim() != self.latent_dim {
            return Err(Error::shape(
                "latent dimension",
                self.latent_dim,
                format!(
                    "encoder {} / decoder {}",
                    self.encoder_arch.output_dim(),
                    self.decoder_arch.input_dim()
                ),
            ));
        }
        if self.encoder_arch.input_dim() != self.decoder_arch.output_dim() {
            return Err(Error::shape(
                "autoencoder weight dimension",
                self.encoder_arch.input_dim(),
                self.decoder_arch.output_dim(),
            ));
        }
        if self.latent_dim > self.decoder_arch.output_dim() {
            return Err(Error::Architecture("latent dimension exceeds weight dimension".into()));
        }
        Ok(())
    }

    pub fn weight_dim(&self) -> usize {
        self.decoder_arch.output_dim()
    }

    pub fn check_target(&self, target_arch: &Architecture) -> Result<()> {
        let found = target_arch.fingerprint();
        if found != self.target_fingerprint {
            return Err(Error::Fingerprint {
                expected: self.target_fingerprint.clone(),
                found,
            });
        }
        if target_arch.num_params() != self.weight_dim() {
            return Err(Error::shape("target weights", target_arch.num_params(), self.weight_dim()));
        }
        Ok(())
    }

    pub fn encode(&self, w: &WeightVector) -> Result<Vec<f64>> {
        if w.arch_fingerprint != self.target_fingerprint {
            return Err(Error::Fingerprint {
                expected: self.target_fingerprint.clone(),
                found: w.arch_fingerprint.clone(),
            });
        }
        if w.len() != self.weight_dim() {
            return Err(Error::shape("encoder input", self.weight_dim(), w.len()));
        }
        let x = Matrix::new(1, w.len(), w.values.clone())?;
        Ok(mlp_forward_batch(&self.encoder_arch, &self.theta.values, &x)?.data)
    }

    pub fn decode(&self, z: &[f64]) -> Result<WeightVector> {
        if z.len() != self.latent_dim {
            return Err(Error::shape("latent code", self.latent_dim, z.len()));
        }
        let x = Matrix::new(1, z.len(), z.to_vec())?;
        let values = mlp_forward_batch(&self.decoder_arch, &self.phi.values, &x)?.data;
        Ok(WeightVector {
            values,
            arch_fingerprint: self.target_fingerprint.clone(),
        })
    }

    /// Reconstructions `h(w)` of every row of `inputs`.
    pub fn reconstruct(&self, inputs: &Matrix) -> Result<Matrix> {
        let z = mlp_forward_batch(&self.encoder_arch, &self.theta.values, inputs)?;
        mlp_forward_batch(&self.decoder_arch, &self.phi.values, &z)
    }

    /// Re-expresses the latent space as `z' = (z - shift) / scale`, folding
    /// the map into the encoder's output layer and the decoder's input layer.
    /// Reconstructions are unchanged up to rounding.
    pub fn reparametrize_latent(&mut self, shift: &[f64], scale: &[f64]) -> Result<()> {
        let d = self.latent_dim;
        if shift.len() != d || scale.len() != d {
            return Err(Error::shape("latent reparametrization", d, shift.len().min(scale.len())));
        }
        if scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument("latent scales must be positive".into()));
        }
        let enc_layers = self.encoder_arch.layers();
        let last = enc_layers[enc_layers.len() - 1];
        let theta = &mut self.theta.values;
        for i in 0..last.fan_in {
            for j in 0..d {
                theta[last.offset + i * d + j] /= scale[j];
            }
        }
        if last.bias {
            for j in 0..d {
                let b = &mut theta[last.bias_offset() + j];
                *b = (*b - shift[j]) / scale[j];
            }
        } else if shift.iter().any(|&c| c != 0.0) {
            return Err(Error::Architecture("cannot shift the latent space of a bias-free encoder".into()));
        }
        let first = self.decoder_arch.layers()[0];
        let phi = &mut self.phi.values;
        let n = first.fan_out;
        if first.bias {
            for k in 0..n {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += shift[j] * phi[first.offset + j * n + k];
                }
                phi[first.bias_offset() + k] += acc;
            }
        } else if shift.iter().any(|&c| c != 0.0) {
            return Err(Error::Architecture("cannot shift the latent space of a bias-free decoder".into()));
        }
        for j in 0..d {
            for k in 0..n {
                phi[first.offset + j * n + k] *= scale[j];
            }
        }
        Ok(())
    }
}

/// Value and gradient of the prediction-constrained loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaeLossGrad {
    pub value: f64,
    pub reconstruction: f64,
    pub mean_log_lik: f64,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
}

/// Inputs for one loss evaluation: the snapshot rows, their noise and the data.
pub struct PcaeBatch<'a> {
    pub snapshots: &'a Matrix,
    /// Same shape as `snapshots`; added to the encoder input only.
    pub gamma: &'a Matrix,
    pub data: &'a Dataset,
}

fn snapshot_matrix(s: &SnapshotSet) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = s.weights.iter().map(|w| w.values.clone()).collect();
    Matrix::from_rows(&rows)
}

/// Column means and standard deviations; a degenerate column gets spread 1.
fn column_moments(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    (0..m.cols)
        .map(|j| {
            let col = m.col_values(j);
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            (mean, if sd > 1e-8 { sd } else { 1.0 })
        })
        .unzip()
}

/// Per-row log-likelihood sums and their gradients for decoded weight rows.
fn decoded_log_liks(
    target_arch: &Architecture,
    decoded: &Matrix,
    data: &Dataset,
    obs: ObservationModel,
    with_grad: bool,
) -> Result<Vec<(f64, Vec<f64>)>> {
    (0..decoded.rows)
        .into_par_iter()
        .map(|r| {
            let w = decoded.row(r);
            if !with_grad {
                let ll = pointwise_log_lik(target_arch, w, &data.x, &data.y, obs)?;
                return Ok((ll.iter().sum(), Vec::new()));
            }
            let tape = Tape::new();
            let wv = tape.row(w);
            let x = tape.input(data.x.data.clone(), data.x.rows, data.x.cols)?;
            let y = tape.input(data.y.data.clone(), data.y.rows, data.y.cols)?;
            let ll = log_lik_tape(&tape, target_arch, wv, x, y, obs)?;
            tape.check_finite()?;
            let g = tape.backward(ll)?;
            Ok((tape.scalar(ll), g.get(wv)))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn loss_impl(
    p: &AutoencoderParams,
    target_arch: &Architecture,
    batch: &PcaeBatch<'_>,
    obs: ObservationModel,
    beta: f64,
    with_grad: bool,
) -> Result<PcaeLossGrad> {
    let (w, gamma) = (batch.snapshots, batch.gamma);
    if w.rows == 0 {
        return Err(Error::InvalidArgument("pcae loss needs at least one snapshot".into()));
    }
    if w.cols != p.weight_dim() {
        return Err(Error::shape("snapshot width", p.weight_dim(), w.cols));
    }
    if gamma.rows != w.rows || gamma.cols != w.cols {
        return Err(Error::shape(
            "input noise",
            format!("{}x{}", w.rows, w.cols),
            format!("{}x{}", gamma.rows, gamma.cols),
        ));
    }
    let r = w.rows as f64;
    let n = batch.data.len() as f64;
    let tape = Tape::new();
    let theta = tape.row(&p.theta.values);
    let phi = tape.row(&p.phi.values);
    let noisy: Vec<f64> = w.data.iter().zip(&gamma.data).map(|(a, b)| a + b).collect();
    let input = tape.input(noisy, w.rows, w.cols)?;
    let target = tape.input(w.data.clone(), w.rows, w.cols)?;
    let z = mlp_forward_tape(&tape, &p.encoder_arch, theta, input)?;
    let decoded = mlp_forward_tape(&tape, &p.decoder_arch, phi, z)?;
    let diff = tape.sub(decoded, target)?;
    let recon = tape.scale(tape.squared_norm(diff), 1.0 / r);
    tape.check_finite()?;
    let recon_value = tape.scalar(recon);

    let decoded_m = Matrix::new(w.rows, w.cols, tape.value(decoded))?;
    let lls = decoded_log_liks(target_arch, &decoded_m, batch.data, obs, with_grad && beta != 0.0)?;
    let mean_ll = lls.iter().map(|(v, _)| v).sum::<f64>() / (r * n);
    let value = recon_value - beta * mean_ll;

    if !with_grad {
        return Ok(PcaeLossGrad {
            value,
            reconstruction: recon_value,
            mean_log_lik: mean_ll,
            theta: Vec::new(),
            phi: Vec::new(),
        });
    }
    // The predictive term enters through a linear surrogate whose gradient
    // with respect to the decoded rows equals that of the log-likelihood.
    let objective = if beta != 0.0 {
        let mut g = Vec::with_capacity(w.rows * w.cols);
        for (_, row) in &lls {
            g.extend(row.iter().map(|v| -beta * v / (r * n)));
        }
        let gv = tape.input(g, w.rows, w.cols)?;
        let surrogate = tape.sum(tape.mul(decoded, gv)?);
        tape.add(recon, surrogate)?
    } else {
        recon
    };
    let grads = tape.backward(objective)?;
    Ok(PcaeLossGrad {
        value,
        reconstruction: recon_value,
        mean_log_lik: mean_ll,
        theta: grads.get(theta),
        phi: grads.get(phi),
    })
}

/// `(1/R) Σ_r ‖w_r − h(w_r + γ_r)‖² − β (1/R) Σ_r (1/N) Σ_n log p(y_n | x_n, h(w_r + γ_r))`.
pub fn pcae_loss(
    p: &AutoencoderParams,
    target_arch: &Architecture,
    batch: &PcaeBatch<'_>,
    obs: ObservationModel,
    beta: f64,
) -> Result<f64> {
    Ok(loss_impl(p, target_arch, batch, obs, beta, false)?.value)
}

pub fn pcae_loss_grad(
    p: &AutoencoderParams,
    target_arch: &Architecture,
    batch: &PcaeBatch<'_>,
    obs: ObservationModel,
    beta: f64,
) -> Result<PcaeLossGrad> {
    loss_impl(p, target_arch, batch, obs, beta, true)
}

/// Loss on a whole snapshot set without input noise.
pub fn pcae_loss_snapshots(
    p: &AutoencoderParams,
    target_arch: &Architecture,
    snapshots: &SnapshotSet,
    data: &Dataset,
    obs: ObservationModel,
    beta: f64,
) -> Result<f64> {
    let w = snapshot_matrix(snapshots)?;
    let gamma = Matrix::zeros(w.rows, w.cols);
    pcae_loss(
        p,
        target_arch,
        &PcaeBatch {
            snapshots: &w,
            gamma: &gamma,
            data,
        },
        obs,
        beta,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaeReport {
    /// Noise-free loss on all snapshots before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub reconstruction_mse: f64,
    /// Mean over snapshots of the per-point train log-likelihood of `h(w_r)`.
    pub mean_train_log_lik: f64,
    pub loss_trace: Vec<f64>,
}

fn evaluate_all(
    p: &AutoencoderParams,
    target_arch: &Architecture,
    w: &Matrix,
    data: &Dataset,
    obs: ObservationModel,
    beta: f64,
) -> Result<PcaeLossGrad> {
    let gamma = Matrix::zeros(w.rows, w.cols);
    loss_impl(
        p,
        target_arch,
        &PcaeBatch {
            snapshots: w,
            gamma: &gamma,
            data,
        },
        obs,
        beta,
        false,
    )
}

/// Adam on the prediction-constrained loss with fresh input noise every step.
pub fn train_pcae(
    snapshots: &SnapshotSet,
    target_arch: &Architecture,
    data: &Dataset,
    obs: ObservationModel,
    cfg: &PcaeConfig,
) -> Result<(AutoencoderParams, PcaeReport)> {
    cfg.validate()?;
    if snapshots.is_empty() {
        return Err(Error::InvalidArgument("no snapshots to encode".into()));
    }
    snapshots.validate(target_arch)?;
    let dw = target_arch.num_params();
    let (enc_arch, dec_arch) = cfg.architectures(dw)?;
    let mut init_rng = substream(cfg.seed, "pcae-init");
    let mut theta = init_weights(&enc_arch, &mut init_rng);
    let mut phi = init_weights(&dec_arch, &mut init_rng);
    let all = snapshot_matrix(snapshots)?;
    // The encoder starts out seeing standardized noisy snapshots and the
    // decoder's output layer starts at the mean snapshot with matching spread.
    let (mean, spread) = column_moments(&all);
    let inp = enc_arch.layers()[0];
    for k in 0..inp.fan_out {
        let mut shift = 0.0;
        for i in 0..dw {
            let w = &mut theta.values[inp.offset + i * inp.fan_out + k];
            *w /= spread[i].hypot(cfg.input_noise_std);
            shift += mean[i] * *w;
        }
        if inp.bias {
            theta.values[inp.bias_offset() + k] -= shift;
        }
    }
    let out = *dec_arch.layers().last().expect("decoder has layers");
    for j in 0..dw {
        for k in 0..out.fan_in {
            phi.values[out.offset + k * dw + j] *= spread[j];
        }
        phi.values[out.bias_offset() + j] = mean[j];
    }
    let mut p = AutoencoderParams::new(enc_arch, dec_arch, theta, phi, target_arch)?;
    let initial = evaluate_all(&p, target_arch, &all, data, obs, cfg.beta)?;

    let mut batcher = Batcher::new(all.rows, cfg.batch_over_snapshots, substream(cfg.seed, "pcae-batches"));
    let mut data_batcher = cfg
        .data_batch
        .filter(|&b| b < data.len())
        .map(|b| Batcher::new(data.len(), b, substream(cfg.seed, "pcae-data")));
    let mut noise_rng = substream(cfg.seed, "pcae-noise");
    let n_theta = p.theta.len();
    let mut params: Vec<f64> = p.theta.values.iter().chain(&p.phi.values).copied().collect();
    let mut adam = Adam::new(params.len(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let idx = batcher.next_batch();
        let w = all.select_rows(&idx);
        let gamma = Matrix::new(
            w.rows,
            w.cols,
            standard_normals(&mut noise_rng, w.rows * w.cols)
                .into_iter()
                .map(|e| e * cfg.input_noise_std)
                .collect(),
        )?;
        let sub;
        let batch_data = match data_batcher.as_mut() {
            Some(b) => {
                sub = data.subset(&b.next_batch());
                &sub
            }
            None => data,
        };
        let lg = pcae_loss_grad(
            &p,
            target_arch,
            &PcaeBatch {
                snapshots: &w,
                gamma: &gamma,
                data: batch_data,
            },
            obs,
            cfg.beta,
        )
        .map_err(|e| match e {
            Error::NonFinite { op, node } => Error::Diverged {
                iteration: it,
                detail: format!("non-finite `{op}` at tape node {node}"),
            },
            other => other,
        })?;
        let grad: Vec<f64> = lg.theta.iter().chain(&lg.phi).copied().collect();
        if !lg.value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!(
                    "pcae loss {} (reconstruction {}, mean log-likelihood {})",
                    lg.value, lg.reconstruction, lg.mean_log_lik
                ),
            });
        }
        trace.push(lg.value);
        adam.step(&mut params, &grad);
        p.theta.values.copy_from_slice(&params[..n_theta]);
        p.phi.values.copy_from_slice(&params[n_theta..]);
    }

    if let Some(target_std) = cfg.latent_code_std {
        let codes = mlp_forward_batch(&p.encoder_arch, &p.theta.values, &all)?;
        let d = p.latent_dim;
        let mut shift = vec![0.0; d];
        let mut scale = vec![1.0; d];
        for j in 0..d {
            let col = codes.col_values(j);
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let sd = (col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / col.len() as f64).sqrt();
            shift[j] = m;
            if sd > 1e-12 {
                scale[j] = sd / target_std;
            }
        }
        p.reparametrize_latent(&shift, &scale)?;
    }

    let fin = evaluate_all(&p, target_arch, &all, data, obs, cfg.beta)?;
    let report = PcaeReport {
        initial_loss: initial.value,
        final_loss: fin.value,
        reconstruction_mse: fin.reconstruction,
        mean_train_log_lik: fin.mean_log_lik,
        loss_trace: trace,
    };
    Ok((p, report))
}

/// Stored autoencoder: both networks, the training config and its report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderArtifact {
    pub schema_version: u32,
    pub params: AutoencoderParams,
    pub config: PcaeConfig,
    pub report: PcaeReport,
}

impl DecoderArtifact {
    pub fn new(params: AutoencoderParams, config: PcaeConfig, report: PcaeReport) -> Self {
        DecoderArtifact {
            schema_version: DECODER_SCHEMA_VERSION,
            params,
            config,
            report,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let a: DecoderArtifact = serde_json::from_str(&text)?;
        if a.schema_version != DECODER_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported decoder schema version {}",
                path.display(),
                a.schema_version
            )));
        }
        a.params.validate()?;
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::SnapshotSet;

    fn identity_params(dw: usize, target: &Architecture) -> AutoencoderParams {
        let enc = Architecture::affine(dw, dw, false).unwrap();
        let dec = Architecture::affine(dw, dw, false).unwrap();
        let mut eye = vec![0.0; dw * dw];
        for i in 0..dw {
            eye[i * dw + i] = 1.0;
        }
        AutoencoderParams::new(
            enc.clone(),
            dec.clone(),
            WeightVector::new(&enc, eye.clone()).unwrap(),
            WeightVector::new(&dec, eye).unwrap(),
            target,
        )
        .unwrap()
    }

    fn toy_target() -> (Architecture, Dataset) {
        let target = Architecture::new(vec![1, 2, 1], Activation::Tanh).unwrap();
        let xs = [-1.0, 0.0, 0.5, 1.0];
        let ys = [0.2, 0.0, -0.3, 0.4];
        (target, Dataset::new("d", Matrix::column(&xs), Matrix::column(&ys)).unwrap())
    }

    fn snaps(target: &Architecture, rows: &[Vec<f64>]) -> SnapshotSet {
        SnapshotSet {
            weights: rows.iter().map(|r| WeightVector::new(target, r.clone()).unwrap()).collect(),
            valid_rmse: vec![0.0; rows.len()],
            arch_fingerprint: target.fingerprint(),
            chain: vec![0; rows.len()],
        }
    }

    #[test]
    fn identity_decoder_and_zero_weights() {
        let (target, _) = toy_target();
        let p = identity_params(7, &target);
        let z = [0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7];
        assert_eq!(p.decode(&z).unwrap().values, z.to_vec());
        assert_eq!(p.decode(&z).unwrap().arch_fingerprint, target.fingerprint());
        assert!(p.decode(&z[..3]).is_err());
        let mut zero = p.clone();
        zero.phi.values.iter_mut().for_each(|v| *v = 0.0);
        zero.theta.values.iter_mut().for_each(|v| *v = 0.0);
        assert!(zero.decode(&z).unwrap().values.iter().all(|&v| v == 0.0));
        let w = WeightVector::new(&target, z.to_vec()).unwrap();
        assert!(zero.encode(&w).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_examples() {
        let (target, data) = toy_target();
        let obs = ObservationModel::default();
        let p = identity_params(7, &target);
        let rows = vec![vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.1], vec![0.0; 7]];
        let s = snaps(&target, &rows);
        assert_eq!(pcae_loss_snapshots(&p, &target, &s, &data, obs, 0.0).unwrap(), 0.0);
        let mean_ll: f64 = rows
            .iter()
            .map(|w| pointwise_log_lik(&target, w, &data.x, &data.y, obs).unwrap().iter().sum::<f64>() / 4.0)
            .sum::<f64>()
            / 2.0;
        let with_beta = pcae_loss_snapshots(&p, &target, &s, &data, obs, 2.0).unwrap();
        assert!((with_beta + 2.0 * mean_ll).abs() < 1e-12);

        let mut shifted = p.clone();
        shifted.decoder_arch = Architecture::affine(7, 7, true).unwrap();
        let mut phi = shifted.phi.values.clone();
        phi.extend(vec![1.0; 7]);
        shifted.phi = WeightVector::new(&shifted.decoder_arch, phi).unwrap();
        let one = snaps(&target, &rows[..1]);
        let v = pcae_loss_snapshots(&shifted, &target, &one, &data, obs, 0.0).unwrap();
        assert!((v - 7.0).abs() < 1e-12);
    }

    #[test]
    fn beta_zero_is_reconstruction_mse() {
        let (target, data) = toy_target();
        let cfg = PcaeConfig {
            iterations: 0,
            latent_code_std: None,
            ..PcaeConfig::default()
        };
        let rows = vec![vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.1], vec![0.3; 7]];
        let s = snaps(&target, &rows);
        let (p, _) = train_pcae(&s, &target, &data, ObservationModel::default(), &cfg).unwrap();
        let all = snapshot_matrix(&s).unwrap();
        let rec = p.reconstruct(&all).unwrap();
        let mse = rec.data.iter().zip(&all.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 2.0;
        let loss = pcae_loss_snapshots(&p, &target, &s, &data, ObservationModel::default(), 0.0).unwrap();
        assert_eq!(loss, mse);
    }

    #[test]
    fn constant_snapshots_are_learned() {
        let (target, data) = toy_target();
        let w0 = vec![0.5, -0.25, 0.1, 0.8, -0.4, 0.3, 0.05];
        let s = snaps(&target, &vec![w0.clone(); 6]);
        let cfg = PcaeConfig {
            iterations: 300,
            beta: 0.0,
            batch_over_snapshots: 3,
            seed: 5,
            ..PcaeConfig::default()
        };
        let (p, report) = train_pcae(&s, &target, &data, ObservationModel::default(), &cfg).unwrap();
        assert!(report.reconstruction_mse < 1e-2, "{}", report.reconstruction_mse);
        assert!(report.final_loss <= report.initial_loss);
        let w = WeightVector::new(&target, w0).unwrap();
        let back = p.decode(&p.encode(&w).unwrap()).unwrap();
        assert_eq!(back.len(), w.len());
        assert_eq!(back.arch_fingerprint, w.arch_fingerprint);
        let (again, _) = train_pcae(&s, &target, &data, ObservationModel::default(), &cfg).unwrap();
        assert_eq!(again, p);
    }

    #[test]
    fn latent_reparametrization_preserves_reconstructions() {
        let (target, _) = toy_target();
        let (enc, dec) = autoencoder_archs(7, 2, &[5], Activation::Rbf).unwrap();
        let mut rng = substream(2, "t");
        let theta = init_weights(&enc, &mut rng);
        let phi = init_weights(&dec, &mut rng);
        let mut p = AutoencoderParams::new(enc, dec, theta, phi, &target).unwrap();
        let rows: Vec<Vec<f64>> = (0..4).map(|i| (0..7).map(|j| 0.1 * (i * j) as f64 - 0.2).collect()).collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let before = p.reconstruct(&m).unwrap();
        let codes = mlp_forward_batch(&p.encoder_arch, &p.theta.values, &m).unwrap();
        p.reparametrize_latent(&[0.3, -1.0], &[2.0, 0.5]).unwrap();
        let after = p.reconstruct(&m).unwrap();
        for (a, b) in before.data.iter().zip(&after.data) {
            assert!((a - b).abs() < 1e-12);
        }
        let new_codes = mlp_forward_batch(&p.encoder_arch, &p.theta.values, &m).unwrap();
        assert!((new_codes.get(1, 0) - (codes.get(1, 0) - 0.3) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn artifact_roundtrip() {
        let (target, data) = toy_target();
        let s = snaps(&target, &[vec![0.1; 7], vec![0.2; 7]]);
        let cfg = PcaeConfig {
            iterations: 5,
            ..PcaeConfig::default()
        };
        let (p, report) = train_pcae(&s, &target, &data, ObservationModel::default(), &cfg).unwrap();
        let a = DecoderArtifact::new(p, cfg, report);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("decoder.json");
        a.save(&path).unwrap();
        assert_eq!(DecoderArtifact::load(&path).unwrap(), a);
    }
}
