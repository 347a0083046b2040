use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Paired inputs and outputs, one row per observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub x: Matrix,
    pub y: Matrix,
}

impl Dataset {
    pub fn new(name: impl Into<String>, x: Matrix, y: Matrix) -> Result<Self> {
        if x.rows != y.rows {
            return Err(Error::shape("dataset rows", x.rows, y.rows));
        }
        if x.rows == 0 {
            return Err(Error::InvalidArgument("dataset has no rows".into()));
        }
        for (label, m) in [("x", &x), ("y", &y)] {
            if let Some(pos) = m.data.iter().position(|v| !v.is_finite()) {
                let cols = m.cols.max(1);
                return Err(Error::InvalidArgument(format!(
                    "non-finite value in {label} at row {}, column {}",
                    pos / cols,
                    pos % cols
                )));
            }
        }
        Ok(Dataset {
            name: name.into(),
            x,
            y,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols
    }

    pub fn output_dim(&self) -> usize {
        self.y.cols
    }

    /// Rows `idx` in the given order. Unlike [`Dataset::new`] this allows an empty result.
    /// Rows of every part in order. All parts must share input and output widths.
    pub fn concat(name: impl Into<String>, parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
        let (dx, dy) = (first.input_dim(), first.output_dim());
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for p in parts {
            if p.input_dim() != dx || p.output_dim() != dy {
                return Err(Error::shape(
                    "concatenated dataset widths",
                    format!("{dx}/{dy}"),
                    format!("{}/{}", p.input_dim(), p.output_dim()),
                ));
            }
            xs.extend_from_slice(&p.x.data);
            ys.extend_from_slice(&p.y.data);
        }
        let n = xs.len() / dx;
        Dataset::new(name, Matrix::new(n, dx, xs)?, Matrix::new(n, dy, ys)?)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-column affine transform applied by [`normalize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub x: ColumnStats,
    pub y: ColumnStats,
}

fn column_stats(m: &Matrix, prefix: &str) -> Result<ColumnStats> {
    let n = m.rows as f64;
    let mut mean = Vec::with_capacity(m.cols);
    let mut std = Vec::with_capacity(m.cols);
    for j in 0..m.cols {
        let col = m.col_values(j);
        let mu = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let sd = var.sqrt();
        if !(sd > 0.0) || sd <= 1e-12 * mu.abs().max(1.0) {
            return Err(Error::ConstantColumn(format!("{prefix}_{j}")));
        }
        mean.push(mu);
        std.push(sd);
    }
    Ok(ColumnStats { mean, std })
}

fn apply(m: &Matrix, s: &ColumnStats) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = (*v - s.mean[j]) / s.std[j];
        }
    }
    out
}

fn invert(m: &Matrix, s: &ColumnStats) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = *v * s.std[j] + s.mean[j];
        }
    }
    out
}

/// Zero-mean, unit (population) standard deviation for every column of `x` and `y`.
pub fn normalize(d: &Dataset) -> Result<(Dataset, NormStats)> {
    let stats = NormStats {
        x: column_stats(&d.x, "x")?,
        y: column_stats(&d.y, "y")?,
    };
    Ok((stats.apply(d), stats))
}

impl NormStats {
    pub fn apply(&self, d: &Dataset) -> Dataset {
        Dataset {
            name: d.name.clone(),
            x: apply(&d.x, &self.x),
            y: apply(&d.y, &self.y),
        }
    }

    pub fn invert(&self, d: &Dataset) -> Dataset {
        Dataset {
            name: d.name.clone(),
            x: invert(&d.x, &self.x),
            y: invert(&d.y, &self.y),
        }
    }

    pub fn apply_x(&self, x: &Matrix) -> Matrix {
        apply(x, &self.x)
    }
}

pub fn denormalize(d: &Dataset, stats: &NormStats) -> Dataset {
    stats.invert(d)
}
