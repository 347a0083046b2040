//! Seeded synthetic datasets: a sparse-sampled RBF network, a four-cluster
//! toy with a bimodal weight posterior, and a family of sine tasks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::Result;
use crate::nn::{mlp_forward_batch, Activation, Architecture, Matrix, WeightVector};
use crate::rng::{standard_normals, substream};

/// Half-open x interval containing no observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub lo: f64,
    pub hi: f64,
}

impl Gap {
    pub fn contains(&self, x: f64) -> bool {
        x > self.lo && x < self.hi
    }
}

#[derive(Debug, Clone)]
pub struct LatentRbfToy {
    pub data: Dataset,
    pub arch: Architecture,
    pub weights: WeightVector,
    pub latent: Vec<f64>,
    pub gap: Gap,
}

pub const TOY_RBF_POINTS: usize = 200;

/// Architecture of the generating network for [`gen_toy_latent_rbf`].
pub fn toy_rbf_arch() -> Architecture {
    Architecture::new(vec![1, 20, 1], Activation::Rbf).expect("static architecture")
}

/// Data drawn from a 20-unit RBF network whose weights are a fixed linear
/// image of a 2-d latent vector. Inputs come from two intervals separated by
/// a gap; the left interval is sampled three times as densely as the right.
pub fn gen_toy_latent_rbf(seed: u64) -> Result<LatentRbfToy> {
    let arch = toy_rbf_arch();
    let dw = arch.num_params();
    let mut rng = substream(seed, "toy-rbf");
    let latent = standard_normals(&mut rng, 2);
    let map = standard_normals(&mut rng, dw * 2);
    // Per-block scales: input weights spread the bump centres over the input
    // range, output weights set the amplitude.
    let layers = arch.layers();
    let values: Vec<f64> = (0..dw)
        .map(|i| {
            let raw = map[2 * i] * latent[0] + map[2 * i + 1] * latent[1];
            let scale = if i < layers[0].weight_len() {
                0.6
            } else if i < layers[0].len() {
                1.5
            } else {
                1.0
            };
            scale * raw
        })
        .collect();
    let weights = WeightVector::new(&arch, values)?;

    let gap = Gap { lo: -1.0, hi: 1.5 };
    let n_left = TOY_RBF_POINTS * 3 / 4;
    let xs: Vec<f64> = (0..TOY_RBF_POINTS)
        .map(|i| {
            if i < n_left {
                rng.random_range(-4.0..gap.lo)
            } else {
                rng.random_range(gap.hi..4.0)
            }
        })
        .collect();
    let x = Matrix::column(&xs);
    let f = mlp_forward_batch(&arch, &weights.values, &x)?;
    let noise = standard_normals(&mut rng, TOY_RBF_POINTS);
    let ys: Vec<f64> = f.data.iter().zip(noise).map(|(m, e)| m + 0.1 * e).collect();
    Ok(LatentRbfToy {
        data: Dataset::new("toy-rbf", x, Matrix::column(&ys))?,
        arch,
        weights,
        latent,
        gap,
    })
}

/// One cluster of the four-mode toy. `rows` index into the generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeDescriptor {
    pub index: usize,
    pub center: f64,
    pub half_width: f64,
    /// Peak value of the bump; signs alternate between neighbouring modes.
    pub height: f64,
    pub lengthscale: f64,
    pub rows: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FourModeToy {
    pub data: Dataset,
    pub modes: Vec<ModeDescriptor>,
    /// Mode index of every row.
    pub labels: Vec<usize>,
    /// Row holding the point reflection of every row.
    pub mirror: Vec<usize>,
}

impl FourModeToy {
    /// The four ways of leaving one mode out, as row-index lists.
    pub fn three_mode_subsets(&self) -> Vec<Vec<usize>> {
        (0..self.modes.len())
            .map(|skip| {
                (0..self.labels.len())
                    .filter(|&r| self.labels[r] != skip)
                    .collect()
            })
            .collect()
    }
}

pub const FOUR_MODE_POINTS_PER_MODE: usize = 30;

/// Architecture fitted to the four-mode toy: three RBF units can explain at
/// most three of the four clusters.
pub fn four_mode_arch() -> Architecture {
    Architecture::new(vec![1, 3, 1], Activation::Rbf).expect("static architecture")
}

/// Four clusters on the real line, each sampled from a single RBF bump
/// `h exp(-((x - c) / l)²)` around its centre, with bump heights alternating
/// in sign. The two left clusters are drawn with seeded jitter; the right two
/// are their point reflections `(x, y) -> (-x, -y)`, so leaving out either
/// outer mode costs the same likelihood.
pub fn gen_toy_four_modes(seed: u64) -> Result<FourModeToy> {
    let mut rng = substream(seed, "four-modes");
    let base_centers = [-3.0, -1.0];
    let base_heights = [2.5, -2.5];
    let half_width = 0.5;
    let lengthscale: f64 = 0.5;
    let mut left = Vec::with_capacity(2);
    for k in 0..2 {
        let center = base_centers[k] + rng.random_range(-0.2..0.2);
        let height = base_heights[k] * rng.random_range(0.8..1.2);
        let points: Vec<(f64, f64)> = (0..FOUR_MODE_POINTS_PER_MODE)
            .map(|_| {
                let x = center + rng.random_range(-half_width..half_width);
                let e: f64 = standard_normals(&mut rng, 1)[0];
                (x, height * (-((x - center) / lengthscale).powi(2)).exp() + 0.1 * e)
            })
            .collect();
        left.push((center, height, points));
    }
    let clusters = [
        left[0].clone(),
        left[1].clone(),
        reflect(&left[1]),
        reflect(&left[0]),
    ];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut labels = Vec::new();
    let mut modes = Vec::new();
    for (k, (center, height, points)) in clusters.into_iter().enumerate() {
        let rows: Vec<usize> = (xs.len()..xs.len() + points.len()).collect();
        for (x, y) in points {
            xs.push(x);
            ys.push(y);
            labels.push(k);
        }
        modes.push(ModeDescriptor {
            index: k,
            center,
            half_width,
            height,
            lengthscale,
            rows,
        });
    }
    let n = FOUR_MODE_POINTS_PER_MODE;
    let mirror = (0..4 * n).map(|r| 4 * n - n * (r / n + 1) + r % n).collect();
    Ok(FourModeToy {
        data: Dataset::new("four-modes", Matrix::column(&xs), Matrix::column(&ys))?,
        modes,
        labels,
        mirror,
    })
}

fn reflect((center, height, points): &(f64, f64, Vec<(f64, f64)>)) -> (f64, f64, Vec<(f64, f64)>) {
    (-center, -height, points.iter().map(|&(x, y)| (-x, -y)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SineTask {
    pub amplitude: f64,
    pub phase: f64,
    pub data: Dataset,
}

/// A family of regression tasks `y = a sin(x + b)` sharing one input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    pub tasks: Vec<SineTask>,
}

impl TaskSet {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn datasets(&self) -> Vec<&Dataset> {
        self.tasks.iter().map(|t| &t.data).collect()
    }
}

/// `m` sine tasks with amplitudes from `Unif(-3, 3)` and phases equally
/// spaced over `[0, 2π]`, both endpoints included.
pub fn gen_sine_tasks(m: usize, n_per_task: usize, seed: u64) -> Result<TaskSet> {
    if m == 0 || n_per_task == 0 {
        return Err(crate::Error::InvalidArgument(
            "need at least one task with at least one point".into(),
        ));
    }
    let mut rng = substream(seed, "sine");
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut tasks = Vec::with_capacity(m);
    for i in 0..m {
        let amplitude = rng.random_range(-3.0..3.0);
        let phase = if m == 1 {
            0.0
        } else {
            two_pi * i as f64 / (m - 1) as f64
        };
        let xs: Vec<f64> = (0..n_per_task).map(|_| rng.random_range(-4.0..4.0)).collect();
        let noise = standard_normals(&mut rng, n_per_task);
        let ys: Vec<f64> = xs
            .iter()
            .zip(noise)
            .map(|(x, e)| amplitude * (x + phase).sin() + 0.1 * e)
            .collect();
        tasks.push(SineTask {
            amplitude,
            phase,
            data: Dataset::new(format!("sine-{i}"), Matrix::column(&xs), Matrix::column(&ys))?,
        });
    }
    Ok(TaskSet { tasks })
}
