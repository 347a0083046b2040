//! Network shapes and flat parameter vectors.
//!
//! Every dense layer is stored as an augmented `(fan_in + 1) × fan_out`
//! matrix: the input is extended with a constant `1`, so the last row of the
//! matrix holds the biases. A [`WeightVector`] is the concatenation of these
//! matrices, layer by layer, each one row-major (the `fan_out` index varies
//! fastest) with the bias row last.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Rbf,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Rbf => "rbf",
            Activation::Tanh => "tanh",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "rbf" => Ok(Activation::Rbf),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

/// Applies a hidden-layer nonlinearity. The RBF bump is `exp(-((x - c) / l)^2)`.
#[inline]
pub fn activation_apply(kind: Activation, x: f64, rbf_center: f64, rbf_lengthscale: f64) -> f64 {
    match kind {
        Activation::Relu => x.max(0.0),
        Activation::Tanh => x.tanh(),
        Activation::Rbf => {
            let u = (x - rbf_center) / rbf_lengthscale;
            (-u * u).exp()
        }
    }
}

/// Derivative of [`activation_apply`] with respect to `x`, given the input and
/// the already computed output.
#[inline]
pub(crate) fn activation_derivative(
    kind: Activation,
    x: f64,
    y: f64,
    rbf_center: f64,
    rbf_lengthscale: f64,
) -> f64 {
    match kind {
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Tanh => 1.0 - y * y,
        Activation::Rbf => {
            let u = (x - rbf_center) / rbf_lengthscale;
            -2.0 * u / rbf_lengthscale * y
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_lengthscale() -> f64 {
    1.0
}

/// Shape of a fully connected network. Hidden layers use `activation`; the
/// output layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub rbf_center: f64,
    #[serde(default = "default_lengthscale")]
    pub rbf_lengthscale: f64,
    /// Whether each layer carries the augmented bias row.
    #[serde(default = "default_true")]
    pub bias: bool,
}

/// Dimensions of one dense layer inside a flat weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub bias: bool,
    /// Offset of the first weight of this layer in the flat vector.
    pub offset: usize,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }

    pub fn len(&self) -> usize {
        (self.fan_in + usize::from(self.bias)) * self.fan_out
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bias_offset(&self) -> usize {
        self.offset + self.weight_len()
    }
}

impl Architecture {
    /// A network with at least one hidden layer and biases on every layer.
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 3 {
            return Err(Error::Architecture(format!(
                "need input, at least one hidden and an output layer, got {layer_sizes:?}"
            )));
        }
        Self::with_layers(layer_sizes, activation, true)
    }

    /// A single affine map `in_dim → out_dim` with no hidden layer. Used for
    /// linear decoders and linear-regression reductions.
    pub fn affine(in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        Self::with_layers(vec![in_dim, out_dim], Activation::Tanh, bias)
    }

    fn with_layers(layer_sizes: Vec<usize>, activation: Activation, bias: bool) -> Result<Self> {
        let arch = Architecture {
            layer_sizes,
            activation,
            rbf_center: 0.0,
            rbf_lengthscale: 1.0,
            bias,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn with_rbf(mut self, center: f64, lengthscale: f64) -> Result<Self> {
        self.rbf_center = center;
        self.rbf_lengthscale = lengthscale;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Architecture(format!(
                "need at least an input and an output layer, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Architecture(format!(
                "layer sizes must be positive, got {:?}",
                self.layer_sizes
            )));
        }
        if !(self.rbf_lengthscale > 0.0 && self.rbf_lengthscale.is_finite()) {
            return Err(Error::Architecture(format!(
                "rbf lengthscale must be positive, got {}",
                self.rbf_lengthscale
            )));
        }
        if !self.rbf_center.is_finite() {
            return Err(Error::Architecture("rbf center must be finite".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated architecture")
    }

    pub fn has_hidden_layer(&self) -> bool {
        self.layer_sizes.len() > 2
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|pair| {
                let shape = LayerShape {
                    fan_in: pair[0],
                    fan_out: pair[1],
                    bias: self.bias,
                    offset,
                };
                offset += shape.len();
                shape
            })
            .collect()
    }

    /// Number of parameters, `Σ (fan_in + 1) · fan_out` with biases.
    pub fn num_params(&self) -> usize {
        self.layers().iter().map(LayerShape::len).sum()
    }

    pub fn activate(&self, x: f64) -> f64 {
        activation_apply(self.activation, x, self.rbf_center, self.rbf_lengthscale)
    }

    /// Stable short hash of everything that determines the meaning of a weight vector.
    pub fn fingerprint(&self) -> String {
        let sizes: Vec<String> = self.layer_sizes.iter().map(usize::to_string).collect();
        let canonical = format!(
            "sizes={};act={};c={:e};l={:e};bias={}",
            sizes.join(","),
            self.activation.name(),
            self.rbf_center,
            self.rbf_lengthscale,
            self.bias
        );
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn check_weights(&self, w: &[f64]) -> Result<()> {
        let expected = self.num_params();
        if w.len() != expected {
            return Err(Error::shape("weight vector", expected, w.len()));
        }
        Ok(())
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sizes: Vec<String> = self.layer_sizes.iter().map(usize::to_string).collect();
        write!(f, "[{}] {}", sizes.join(","), self.activation.name())
    }
}

/// A flat parameter vector bound to the architecture it was built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub values: Vec<f64>,
    pub arch_fingerprint: String,
}

impl WeightVector {
    pub fn new(arch: &Architecture, values: Vec<f64>) -> Result<Self> {
        arch.check_weights(&values)?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(WeightVector {
            values,
            arch_fingerprint: arch.fingerprint(),
        })
    }

    pub fn zeros(arch: &Architecture) -> Self {
        WeightVector {
            values: vec![0.0; arch.num_params()],
            arch_fingerprint: arch.fingerprint(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn matches(&self, arch: &Architecture) -> Result<()> {
        let expected = arch.fingerprint();
        if self.arch_fingerprint != expected {
            return Err(Error::Fingerprint {
                expected,
                found: self.arch_fingerprint.clone(),
            });
        }
        arch.check_weights(&self.values)
    }
}

/// One layer in matrix form: `weights` is `fan_in × fan_out` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMatrices {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    /// Empty when the architecture has no biases.
    pub bias: Vec<f64>,
}

pub fn unflatten(arch: &Architecture, w: &[f64]) -> Result<Vec<LayerMatrices>> {
    arch.check_weights(w)?;
    Ok(arch
        .layers()
        .iter()
        .map(|l| LayerMatrices {
            fan_in: l.fan_in,
            fan_out: l.fan_out,
            weights: w[l.offset..l.bias_offset()].to_vec(),
            bias: w[l.bias_offset()..l.offset + l.len()].to_vec(),
        })
        .collect())
}

pub fn flatten(arch: &Architecture, layers: &[LayerMatrices]) -> Result<WeightVector> {
    let shapes = arch.layers();
    if shapes.len() != layers.len() {
        return Err(Error::shape("layer count", shapes.len(), layers.len()));
    }
    let mut values = Vec::with_capacity(arch.num_params());
    for (shape, layer) in shapes.iter().zip(layers) {
        let bias_len = if shape.bias { shape.fan_out } else { 0 };
        if layer.fan_in != shape.fan_in
            || layer.fan_out != shape.fan_out
            || layer.weights.len() != shape.weight_len()
            || layer.bias.len() != bias_len
        {
            return Err(Error::shape(
                "layer matrices",
                format!("{}x{} (+{bias_len} bias)", shape.fan_in, shape.fan_out),
                format!(
                    "{}x{} with {} weights (+{} bias)",
                    layer.fan_in,
                    layer.fan_out,
                    layer.weights.len(),
                    layer.bias.len()
                ),
            ));
        }
        values.extend_from_slice(&layer.weights);
        values.extend_from_slice(&layer.bias);
    }
    WeightVector::new(arch, values)
}
