use super::arch::{Architecture, WeightVector};
use super::matrix::{matmul_into, Matrix};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Forward pass for a single input vector.
pub fn mlp_forward(arch: &Architecture, w: &WeightVector, x: &[f64]) -> Result<Vec<f64>> {
    w.matches(arch)?;
    let xs = Matrix::new(1, x.len(), x.to_vec())?;
    Ok(mlp_forward_batch(arch, &w.values, &xs)?.data)
}

/// Forward pass for every row of `xs` using the raw parameter slice `w`.
pub fn mlp_forward_batch(arch: &Architecture, w: &[f64], xs: &Matrix) -> Result<Matrix> {
    arch.check_weights(w)?;
    if xs.cols != arch.input_dim() {
        return Err(Error::shape("network input", arch.input_dim(), xs.cols));
    }
    let layers = arch.layers();
    let last = layers.len() - 1;
    let mut h = xs.data.clone();
    for (li, l) in layers.iter().enumerate() {
        let mut out = vec![0.0; xs.rows * l.fan_out];
        matmul_into(
            &h,
            &w[l.offset..l.bias_offset()],
            xs.rows,
            l.fan_in,
            l.fan_out,
            &mut out,
        );
        if l.bias {
            let b = &w[l.bias_offset()..l.offset + l.len()];
            for row in out.chunks_exact_mut(l.fan_out) {
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
        if li != last {
            out.iter_mut().for_each(|v| *v = arch.activate(*v));
        }
        h = out;
    }
    Matrix::new(xs.rows, arch.output_dim(), h)
}

/// Records the forward pass of `arch` on the tape. `w` is a row (or any
/// contiguous node) holding the flat weights, `x` is an `n × input_dim` matrix.
pub fn mlp_forward_tape(tape: &Tape, arch: &Architecture, w: Var, x: Var) -> Result<Var> {
    if w.len() != arch.num_params() {
        return Err(Error::shape("weight vector", arch.num_params(), w.len()));
    }
    if x.cols != arch.input_dim() {
        return Err(Error::shape("network input", arch.input_dim(), x.cols));
    }
    let layers = arch.layers();
    let last = layers.len() - 1;
    let mut h = x;
    for (li, l) in layers.iter().enumerate() {
        let weights = tape.slice(w, l.offset, l.fan_in, l.fan_out)?;
        h = tape.matmul(h, weights)?;
        if l.bias {
            let b = tape.slice(w, l.bias_offset(), 1, l.fan_out)?;
            h = tape.add_row(h, b)?;
        }
        if li != last {
            h = tape.activation(h, arch.activation, arch.rbf_center, arch.rbf_lengthscale);
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::Activation;

    #[test]
    fn zero_network_outputs_zero() {
        let a = Architecture::new(vec![1, 1, 1], Activation::Relu).unwrap();
        let w = WeightVector::zeros(&a);
        assert_eq!(mlp_forward(&a, &w, &[5.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn identity_path_through_relu() {
        let a = Architecture::new(vec![1, 1, 1], Activation::Relu).unwrap();
        let w = WeightVector::new(&a, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(mlp_forward(&a, &w, &[2.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn rbf_at_center_passes_unit_weight() {
        let a = Architecture::new(vec![1, 1, 1], Activation::Rbf).unwrap();
        let w = WeightVector::new(&a, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(mlp_forward(&a, &w, &[0.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn rejects_mismatched_input() {
        let a = Architecture::new(vec![2, 3, 1], Activation::Tanh).unwrap();
        let w = WeightVector::zeros(&a);
        let err = mlp_forward(&a, &w, &[1.0]).unwrap_err();
        assert!(err.to_string().contains("network input"));
        let other = Architecture::new(vec![2, 4, 1], Activation::Tanh).unwrap();
        assert!(mlp_forward(&other, &w, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let a = Architecture::new(vec![2, 4, 3, 2], Activation::Rbf).unwrap();
        let w: Vec<f64> = (0..a.num_params()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let xs = Matrix::new(3, 2, vec![0.1, -0.4, 1.2, 0.3, -2.0, 0.5]).unwrap();
        let plain = mlp_forward_batch(&a, &w, &xs).unwrap();
        let t = Tape::new();
        let wv = t.row(&w);
        let xv = t.input(xs.data.clone(), 3, 2).unwrap();
        let out = mlp_forward_tape(&t, &a, wv, xv).unwrap();
        assert_eq!(t.value(out), plain.data);
    }

    #[test]
    fn forward_is_deterministic() {
        let a = Architecture::new(vec![3, 5, 1], Activation::Tanh).unwrap();
        let w = WeightVector::new(&a, (0..a.num_params()).map(|i| (i as f64).sin()).collect()).unwrap();
        let x = [0.3, -0.7, 1.1];
        let y1 = mlp_forward(&a, &w, &x).unwrap();
        let y2 = mlp_forward(&a, &w, &x).unwrap();
        assert_eq!(y1[0].to_bits(), y2[0].to_bits());
    }
}
