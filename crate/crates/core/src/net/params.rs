use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nonlinearity applied after a dense layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    None,
}

/// One dense layer: a row-major `input x output` weight block followed by
/// `output` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: Activation,
    pub input: usize,
    pub output: usize,
}

impl LayerSpec {
    pub const fn new(kind: Activation, input: usize, output: usize) -> Self {
        Self {
            kind,
            input,
            output,
        }
    }

    pub fn param_count(&self) -> usize {
        (self.input + 1) * self.output
    }
}

/// Start of every layer's parameters in the flat vector.
pub fn layer_offsets(layout: &[LayerSpec]) -> Vec<usize> {
    layout
        .iter()
        .scan(0, |acc, l| {
            let at = *acc;
            *acc += l.param_count();
            Some(at)
        })
        .collect()
}

pub fn param_count(layout: &[LayerSpec]) -> usize {
    layout.iter().map(LayerSpec::param_count).sum()
}

/// Flat learnable parameters, stored in single precision.
///
/// Arithmetic happens in double precision on a widened copy; the optimizer
/// rounds its results back so that checkpoints are exact.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub values: Vec<f32>,
    pub layout: Vec<LayerSpec>,
    pub rng_seed: u64,
}

impl NetParams {
    /// Xavier-uniform weights, zero biases.
    pub fn xavier(layout: &[LayerSpec], rng_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut values = Vec::with_capacity(param_count(layout));
        for l in layout {
            let a = (6.0 / (l.input + l.output) as f64).sqrt();
            values.extend((0..l.input * l.output).map(|_| rng.random_range(-a..a) as f32));
            values.extend(std::iter::repeat_n(0.0f32, l.output));
        }
        Self {
            values,
            layout: layout.to_vec(),
            rng_seed,
        }
    }

    pub fn from_values(layout: &[LayerSpec], values: Vec<f32>, rng_seed: u64) -> Result<Self> {
        let expected = param_count(layout);
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                what: "parameter values vs layout",
                expected,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        Ok(Self {
            values,
            layout: layout.to_vec(),
            rng_seed,
        })
    }

    /// Sets a layer's weights and biases to zero.
    pub fn zero_layer(&mut self, layer: usize) {
        let start = layer_offsets(&self.layout)[layer];
        let len = self.layout[layer].param_count();
        self.values[start..start + len].fill(0.0);
    }

    pub fn layer_range(&self, layer: usize) -> std::ops::Range<usize> {
        let start = layer_offsets(&self.layout)[layer];
        start..start + self.layout[layer].param_count()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// Loss gradient aligned with a [`NetParams`] vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
}

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn norm_squared(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Rescales all gradients jointly so their combined norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut Gradient], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

/// Single-vector evaluation of one dense layer.
pub fn dense_forward(params: &[f64], spec: &LayerSpec, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != spec.input {
        return Err(Error::ShapeMismatch {
            what: "dense input width",
            expected: spec.input,
            found: input.len(),
        });
    }
    if params.len() != spec.param_count() {
        return Err(Error::ShapeMismatch {
            what: "dense parameter count",
            expected: spec.param_count(),
            found: params.len(),
        });
    }
    let (w, b) = params.split_at(spec.input * spec.output);
    let mut out = b.to_vec();
    for (i, &x) in input.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(&w[i * spec.output..(i + 1) * spec.output]) {
            *o += x * wij;
        }
    }
    for o in &mut out {
        *o = match spec.kind {
            Activation::Relu => o.max(0.0),
            Activation::Tanh => o.tanh(),
            Activation::None => *o,
        };
    }
    Ok(out)
}
