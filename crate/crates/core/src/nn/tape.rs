//! Reverse-mode differentiation over a recorded computation.
//!
//! A [`Tape`] records dense matrix operations as they are evaluated. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! accumulates adjoints for every node, including the leaves created with
//! [`Tape::input`]. Tapes are cheap to create and are meant to live for a
//! single loss evaluation; nothing is shared between tapes.

use std::cell::{Cell, RefCell};

use super::arch::{activation_apply, activation_derivative, Activation};
use super::matrix::matmul_into;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Carries the node's shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Var {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Input,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Exp(usize),
    Act {
        src: usize,
        kind: Activation,
        center: f64,
        lengthscale: f64,
    },
    Sum(usize),
    SquaredNorm(usize),
    Slice {
        src: usize,
        offset: usize,
    },
    GaussLogDensity {
        value: usize,
        mean: usize,
        std: f64,
    },
    KlDiag {
        mu: usize,
        log_std: usize,
        prior_var: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Exp(..) => "exp",
            Op::Act { .. } => "activation",
            Op::Sum(..) => "sum",
            Op::SquaredNorm(..) => "squared_norm",
            Op::Slice { .. } => "slice",
            Op::GaussLogDensity { .. } => "gaussian_log_density",
            Op::KlDiag { .. } => "kl_gaussian_diag",
        }
    }
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    first_nonfinite: Cell<Option<(usize, &'static str)>>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Vec<f64>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if `v` does not influence the output.
    pub fn get(&self, v: Var) -> Vec<f64> {
        let g = &self.grads[v.idx];
        if g.is_empty() {
            vec![0.0; self.sizes[v.idx]]
        } else {
            g.clone()
        }
    }
}

pub(crate) const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Vec<f64>, rows: usize, cols: usize, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        if self.first_nonfinite.get().is_none() && value.iter().any(|v| !v.is_finite()) {
            self.first_nonfinite.set(Some((idx, op.name())));
        }
        nodes.push(Node { value, op });
        Var { idx, rows, cols }
    }

    /// Records a leaf (parameter or constant) with the given shape.
    pub fn input(&self, values: Vec<f64>, rows: usize, cols: usize) -> Result<Var> {
        if values.len() != rows * cols {
            return Err(Error::shape(
                "tape input",
                format!("{rows}x{cols}"),
                values.len(),
            ));
        }
        Ok(self.push(values, rows, cols, Op::Input))
    }

    /// Row vector leaf.
    pub fn row(&self, values: &[f64]) -> Var {
        self.push(values.to_vec(), 1, values.len(), Op::Input)
    }

    pub fn value(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.idx].value.clone()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.idx].value[0]
    }

    /// First node whose value was not finite, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite.get() {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return Err(Error::shape(
                "matmul",
                format!("{}x{} · {}x_", a.rows, a.cols, a.cols),
                format!("{}x{} · {}x{}", a.rows, a.cols, b.rows, b.cols),
            ));
        }
        let mut out = vec![0.0; a.rows * b.cols];
        {
            let nodes = self.nodes.borrow();
            matmul_into(
                &nodes[a.idx].value,
                &nodes[b.idx].value,
                a.rows,
                a.cols,
                b.cols,
                &mut out,
            );
        }
        Ok(self.push(
            out,
            a.rows,
            b.cols,
            Op::MatMul {
                a: a.idx,
                b: b.idx,
                m: a.rows,
                k: a.cols,
                n: b.cols,
            },
        ))
    }

    fn same_shape(ctx: &'static str, a: Var, b: Var) -> Result<()> {
        if a.rows != b.rows || a.cols != b.cols {
            return Err(Error::shape(
                ctx,
                format!("{}x{}", a.rows, a.cols),
                format!("{}x{}", b.rows, b.cols),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.idx]
                .value
                .iter()
                .zip(&nodes[b.idx].value)
                .map(|(&x, &y)| f(x, y))
                .collect()
        };
        self.push(out, a.rows, a.cols, op)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.idx].value.iter().map(|&x| f(x)).collect()
        };
        self.push(out, a.rows, a.cols, op)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        Self::same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a.idx, b.idx)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        Self::same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a.idx, b.idx)))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        Self::same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a.idx, b.idx)))
    }

    /// Adds the `1 × n` row `r` to every row of the `m × n` matrix `a`.
    pub fn add_row(&self, a: Var, r: Var) -> Result<Var> {
        if r.rows != 1 || r.cols != a.cols {
            return Err(Error::shape(
                "add_row",
                format!("1x{}", a.cols),
                format!("{}x{}", r.rows, r.cols),
            ));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let row = &nodes[r.idx].value;
            let mut out = nodes[a.idx].value.clone();
            for chunk in out.chunks_exact_mut(a.cols.max(1)) {
                for (o, &b) in chunk.iter_mut().zip(row) {
                    *o += b;
                }
            }
            out
        };
        Ok(self.push(out, a.rows, a.cols, Op::AddRow(a.idx, r.idx)))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale(a.idx, c))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a.idx))
    }

    pub fn activation(&self, a: Var, kind: Activation, center: f64, lengthscale: f64) -> Var {
        self.map(
            a,
            |x| activation_apply(kind, x, center, lengthscale),
            Op::Act {
                src: a.idx,
                kind,
                center,
                lengthscale,
            },
        )
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.nodes.borrow()[a.idx].value.iter().sum();
        self.push(vec![s], 1, 1, Op::Sum(a.idx))
    }

    /// `Σ a_i²` as a scalar.
    pub fn squared_norm(&self, a: Var) -> Var {
        let s = self.nodes.borrow()[a.idx].value.iter().map(|x| x * x).sum();
        self.push(vec![s], 1, 1, Op::SquaredNorm(a.idx))
    }

    /// Views `rows × cols` contiguous entries of `a`, starting at `offset`, as a new matrix.
    pub fn slice(&self, a: Var, offset: usize, rows: usize, cols: usize) -> Result<Var> {
        if offset + rows * cols > a.len() {
            return Err(Error::shape(
                "slice",
                format!("at most {} entries", a.len()),
                format!("{} entries from offset {offset}", rows * cols),
            ));
        }
        let out = self.nodes.borrow()[a.idx].value[offset..offset + rows * cols].to_vec();
        Ok(self.push(out, rows, cols, Op::Slice { src: a.idx, offset }))
    }

    /// `Σ_i log N(value_i | mean_i, std²)` as a scalar.
    pub fn gaussian_log_density(&self, value: Var, mean: Var, std: f64) -> Result<Var> {
        Self::same_shape("gaussian_log_density", value, mean)?;
        if !(std > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "standard deviation must be positive, got {std}"
            )));
        }
        let s = {
            let nodes = self.nodes.borrow();
            super::density::gaussian_log_density_unchecked(
                &nodes[value.idx].value,
                &nodes[mean.idx].value,
                std,
            )
        };
        Ok(self.push(
            vec![s],
            1,
            1,
            Op::GaussLogDensity {
                value: value.idx,
                mean: mean.idx,
                std,
            },
        ))
    }

    /// Closed-form `KL(N(mu, exp(log_std)²) ‖ N(0, prior_var))`, summed over coordinates.
    pub fn kl_diag(&self, mu: Var, log_std: Var, prior_var: f64) -> Result<Var> {
        Self::same_shape("kl_diag", mu, log_std)?;
        let s = {
            let nodes = self.nodes.borrow();
            crate::vi::gaussian::kl_diag_values(
                &nodes[mu.idx].value,
                &nodes[log_std.idx].value,
                prior_var,
            )
        };
        Ok(self.push(
            vec![s],
            1,
            1,
            Op::KlDiag {
                mu: mu.idx,
                log_std: log_std.idx,
                prior_var,
            },
        ))
    }

    /// `mu + exp(log_std) ⊙ eps`.
    pub fn reparam(&self, mu: Var, log_std: Var, eps: &[f64]) -> Result<Var> {
        Self::same_shape("reparam", mu, log_std)?;
        if eps.len() != mu.len() {
            return Err(Error::shape("reparam noise", mu.len(), eps.len()));
        }
        let noise = self.input(eps.to_vec(), mu.rows, mu.cols)?;
        let std = self.exp(log_std);
        let scaled = self.mul(std, noise)?;
        self.add(mu, scaled)
    }

    /// Propagates adjoints from the scalar `output` back to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if !output.is_scalar() {
            return Err(Error::shape(
                "backward",
                "scalar output",
                format!("{}x{}", output.rows, output.cols),
            ));
        }
        let nodes = self.nodes.borrow();
        let sizes: Vec<usize> = nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); nodes.len()];
        grads[output.idx] = vec![1.0];

        fn acc<'g>(grads: &'g mut [Vec<f64>], sizes: &[usize], i: usize) -> &'g mut Vec<f64> {
            if grads[i].is_empty() {
                grads[i] = vec![0.0; sizes[i]];
            }
            &mut grads[i]
        }

        for idx in (0..=output.idx).rev() {
            if grads[idx].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            let node = &nodes[idx];
            match node.op {
                Op::Input => {}
                Op::MatMul { a, b, m, k, n } => {
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    // dA = G · Bᵀ  (m×n · n×k)
                    {
                        let ga = acc(&mut grads, &sizes, a);
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                ga[i * k + p] += dot(grow, brow);
                            }
                        }
                    }
                    // dB = Aᵀ · G  (k×m · m×n)
                    let gb = acc(&mut grads, &sizes, b);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let out = &mut gb[p * n..(p + 1) * n];
                            for (o, &gv) in out.iter_mut().zip(grow) {
                                *o += aip * gv;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, &sizes, a), &g, 1.0);
                    add_into(acc(&mut grads, &sizes, b), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, &sizes, a), &g, 1.0);
                    add_into(acc(&mut grads, &sizes, b), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    let ga = acc(&mut grads, &sizes, a);
                    for ((o, &gv), &y) in ga.iter_mut().zip(&g).zip(bv) {
                        *o += gv * y;
                    }
                    let gb = acc(&mut grads, &sizes, b);
                    for ((o, &gv), &x) in gb.iter_mut().zip(&g).zip(av) {
                        *o += gv * x;
                    }
                }
                Op::AddRow(a, r) => {
                    add_into(acc(&mut grads, &sizes, a), &g, 1.0);
                    let cols = sizes[r];
                    let gr = acc(&mut grads, &sizes, r);
                    for chunk in g.chunks_exact(cols.max(1)) {
                        for (o, &gv) in gr.iter_mut().zip(chunk) {
                            *o += gv;
                        }
                    }
                }
                Op::Scale(a, c) => add_into(acc(&mut grads, &sizes, a), &g, c),
                Op::Exp(a) => {
                    let y = &node.value;
                    let ga = acc(&mut grads, &sizes, a);
                    for ((o, &gv), &yv) in ga.iter_mut().zip(&g).zip(y) {
                        *o += gv * yv;
                    }
                }
                Op::Act {
                    src,
                    kind,
                    center,
                    lengthscale,
                } => {
                    let x = &nodes[src].value;
                    let y = &node.value;
                    let ga = acc(&mut grads, &sizes, src);
                    for (((o, &gv), &xv), &yv) in ga.iter_mut().zip(&g).zip(x).zip(y) {
                        *o += gv * activation_derivative(kind, xv, yv, center, lengthscale);
                    }
                }
                Op::Sum(a) => {
                    let ga = acc(&mut grads, &sizes, a);
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
                Op::SquaredNorm(a) => {
                    let x = &nodes[a].value;
                    let ga = acc(&mut grads, &sizes, a);
                    for (o, &xv) in ga.iter_mut().zip(x) {
                        *o += 2.0 * xv * g[0];
                    }
                }
                Op::Slice { src, offset } => {
                    let gs = acc(&mut grads, &sizes, src);
                    add_into(&mut gs[offset..offset + g.len()], &g, 1.0);
                }
                Op::GaussLogDensity { value, mean, std } => {
                    let inv_var = 1.0 / (std * std);
                    let resid: Vec<f64> = nodes[value]
                        .value
                        .iter()
                        .zip(&nodes[mean].value)
                        .map(|(v, m)| (v - m) * inv_var * g[0])
                        .collect();
                    add_into(acc(&mut grads, &sizes, mean), &resid, 1.0);
                    add_into(acc(&mut grads, &sizes, value), &resid, -1.0);
                }
                Op::KlDiag {
                    mu,
                    log_std,
                    prior_var,
                } => {
                    let mv = &nodes[mu].value;
                    let lv = &nodes[log_std].value;
                    let gm = acc(&mut grads, &sizes, mu);
                    for (o, &m) in gm.iter_mut().zip(mv) {
                        *o += g[0] * m / prior_var;
                    }
                    let gl = acc(&mut grads, &sizes, log_std);
                    for (o, &l) in gl.iter_mut().zip(lv) {
                        *o += g[0] * ((2.0 * l).exp() / prior_var - 1.0);
                    }
                }
            }
            grads[idx] = g;
        }
        Ok(Gradients { grads, sizes })
    }
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A scalar loss of a parameter vector, recorded on a fresh tape.
pub struct GradientRequest<'a> {
    pub params: &'a [f64],
    pub loss: &'a dyn Fn(&Tape, Var) -> Result<Var>,
}

/// Evaluates the loss and its exact gradient with respect to `params`.
pub fn gradient(req: GradientRequest<'_>) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let p = tape.row(req.params);
    let out = (req.loss)(&tape, p)?;
    tape.check_finite()?;
    let value = tape.scalar(out);
    let grads = tape.backward(out)?;
    Ok((value, grads.get(p)))
}
