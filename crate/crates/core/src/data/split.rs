use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Random,
    Extrapolation,
    Interpolation,
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SplitKind::Random),
            "extrapolation" => Ok(SplitKind::Extrapolation),
            "interpolation" => Ok(SplitKind::Interpolation),
            other => Err(Error::InvalidArgument(format!("unknown split kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub kind: SplitKind,
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

fn default_fractions() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

impl SplitSpec {
    pub fn new(kind: SplitKind, seed: u64) -> Self {
        SplitSpec {
            kind,
            fractions: default_fractions(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.fractions.iter().sum();
        if self.fractions.iter().any(|f| !(*f > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be positive and sum to 1, got {:?}",
                self.fractions
            )));
        }
        Ok(())
    }
}

/// Row indices of each part, in the order they were drawn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub indices: SplitIndices,
}

/// Row indices sorted by ascending L2 norm of the input row, ties by index.
pub fn rows_by_norm(d: &Dataset) -> Vec<usize> {
    let norms: Vec<f64> = d
        .x
        .iter_rows()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    order
}

pub fn split_indices(d: &Dataset, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    let n = d.len();
    if n < 20 {
        return Err(Error::InvalidArgument(format!(
            "need at least 20 rows to split, got {n}"
        )));
    }
    let [f_train, f_valid, f_test] = spec.fractions;
    let mut rng = substream(spec.seed, "split");
    let out = match spec.kind {
        SplitKind::Random => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let n_train = (f_train * n as f64 + 1e-9).floor() as usize;
            let n_valid = (f_valid * n as f64 + 1e-9).floor() as usize;
            SplitIndices {
                train: perm[..n_train].to_vec(),
                valid: perm[n_train..n_train + n_valid].to_vec(),
                test: perm[n_train + n_valid..].to_vec(),
            }
        }
        SplitKind::Extrapolation | SplitKind::Interpolation => {
            let order = rows_by_norm(d);
            let k = (0.5 * f_test * n as f64 - 1e-9).ceil() as usize;
            let extremes: Vec<usize> = order[..k].iter().chain(&order[n - k..]).copied().collect();
            let mut middle: Vec<usize> = order[k..n - k].to_vec();
            middle.shuffle(&mut rng);
            if spec.kind == SplitKind::Extrapolation {
                let n_valid =
                    (middle.len() as f64 * f_valid / (f_train + f_valid)).round() as usize;
                SplitIndices {
                    train: middle[n_valid..].to_vec(),
                    valid: middle[..n_valid].to_vec(),
                    test: extremes,
                }
            } else {
                let n_test = extremes.len().min(middle.len());
                let n_valid = ((f_valid * n as f64).round() as usize).min(middle.len() - n_test);
                let test = middle[..n_test].to_vec();
                let valid = middle[n_test..n_test + n_valid].to_vec();
                let mut train = extremes;
                train.extend_from_slice(&middle[n_test + n_valid..]);
                SplitIndices { train, valid, test }
            }
        }
    };
    if out.train.is_empty() || out.valid.is_empty() || out.test.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "split of {n} rows leaves an empty part ({}/{}/{})",
            out.train.len(),
            out.valid.len(),
            out.test.len()
        )));
    }
    Ok(out)
}

pub fn split(d: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    let indices = split_indices(d, spec)?;
    Ok(Splits {
        train: d.subset(&indices.train),
        valid: d.subset(&indices.valid),
        test: d.subset(&indices.test),
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Matrix;
    use std::collections::BTreeSet;

    fn norm_dataset(n: usize) -> Dataset {
        // Row i has norm (perm(i) + 1) so ranks are not the row order.
        let xs: Vec<f64> = (0..n).map(|i| ((i * 37) % n + 1) as f64).collect();
        let signs: Vec<f64> = xs.iter().enumerate().map(|(i, v)| if i % 2 == 0 { *v } else { -*v }).collect();
        Dataset::new("norms", Matrix::column(&signs), Matrix::column(&xs)).unwrap()
    }

    fn assert_partition(idx: &SplitIndices, n: usize) {
        let all: BTreeSet<usize> = idx.train.iter().chain(&idx.valid).chain(&idx.test).copied().collect();
        assert_eq!(all.len(), idx.train.len() + idx.valid.len() + idx.test.len());
        assert_eq!(all, (0..n).collect());
    }

    #[test]
    fn random_split_sizes() {
        let d = norm_dataset(100);
        let idx = split_indices(&d, &SplitSpec::new(SplitKind::Random, 3)).unwrap();
        assert_eq!((idx.train.len(), idx.valid.len(), idx.test.len()), (80, 10, 10));
        assert_partition(&idx, 100);
        let again = split_indices(&d, &SplitSpec::new(SplitKind::Random, 3)).unwrap();
        assert_eq!(idx, again);
    }

    #[test]
    fn extrapolation_takes_extreme_norms() {
        let d = norm_dataset(100);
        let idx = split_indices(&d, &SplitSpec::new(SplitKind::Extrapolation, 1)).unwrap();
        let norms: BTreeSet<u64> = idx.test.iter().map(|&i| d.x.get(i, 0).abs() as u64).collect();
        let expect: BTreeSet<u64> = (1..=5).chain(96..=100).collect();
        assert_eq!(norms, expect);
        assert_eq!((idx.train.len(), idx.valid.len(), idx.test.len()), (80, 10, 10));
        assert_partition(&idx, 100);
    }

    #[test]
    fn interpolation_keeps_extremes_in_train() {
        let d = norm_dataset(100);
        let idx = split_indices(&d, &SplitSpec::new(SplitKind::Interpolation, 1)).unwrap();
        let extremes: BTreeSet<u64> = (1..=5).chain(96..=100).collect();
        for &i in &idx.test {
            assert!(!extremes.contains(&(d.x.get(i, 0).abs() as u64)));
        }
        let train_norms: BTreeSet<u64> = idx.train.iter().map(|&i| d.x.get(i, 0).abs() as u64).collect();
        assert!(extremes.is_subset(&train_norms));
        assert_eq!((idx.train.len(), idx.valid.len(), idx.test.len()), (80, 10, 10));
        assert_partition(&idx, 100);
    }

    #[test]
    fn too_small_is_rejected() {
        let d = norm_dataset(19);
        assert!(split_indices(&d, &SplitSpec::new(SplitKind::Random, 0)).is_err());
        let mut bad = SplitSpec::new(SplitKind::Random, 0);
        bad.fractions = [0.8, 0.1, 0.2];
        assert!(split_indices(&norm_dataset(50), &bad).is_err());
    }
}
