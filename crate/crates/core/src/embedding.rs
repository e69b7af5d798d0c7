//! A small fully-connected feature extractor with an explicit tape.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{expect_dim, ShapeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation `x` and the output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `d_out × d_in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Parameters of `f_Φ`. With no layers the network is the identity map.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    pub input_dim: usize,
    pub layers: Vec<Layer>,
}

impl EmbeddingParams {
    pub fn identity(dim: usize) -> Self {
        EmbeddingParams { input_dim: dim, layers: Vec::new() }
    }

    /// Layers of widths `dims[0] → dims[1] → …`, hidden layers using
    /// `hidden`, the last one linear. Weights are uniform in `±sqrt(6/(in+out))`,
    /// biases zero.
    pub fn init<R: Rng>(dims: &[usize], hidden: Activation, rng: &mut R) -> Self {
        assert!(!dims.is_empty(), "at least the input width is required");
        let mut layers = Vec::with_capacity(dims.len().saturating_sub(1));
        for (idx, pair) in dims.windows(2).enumerate() {
            let (d_in, d_out) = (pair[0], pair[1]);
            let bound = (6.0 / (d_in + d_out) as f64).sqrt();
            let weight = DMatrix::from_fn(d_out, d_in, |_, _| rng.random_range(-bound..bound));
            let activation = if idx + 2 == dims.len() { Activation::Identity } else { hidden };
            layers.push(Layer { weight, bias: DVector::zeros(d_out), activation });
        }
        EmbeddingParams { input_dim: dims[0], layers }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, Layer::output_dim)
    }

    pub fn validate(&self) -> Result<(), ShapeError> {
        let mut width = self.input_dim;
        for (idx, layer) in self.layers.iter().enumerate() {
            expect_dim(&format!("layer {idx} input width"), layer.input_dim(), width)?;
            expect_dim(&format!("layer {idx} bias length"), layer.bias.len(), layer.output_dim())?;
            width = layer.output_dim();
        }
        if let Some(last) = self.layers.last() {
            if last.activation != Activation::Identity {
                return Err(ShapeError::new("the final layer must be linear"));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters in declaration order: per layer, weight row-major then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            for r in 0..layer.weight.nrows() {
                out.extend(layer.weight.row(r).iter());
            }
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<(), ShapeError> {
        expect_dim("flat parameter count", values.len(), self.num_params())?;
        let mut it = values.iter().copied();
        for layer in &mut self.layers {
            let cols = layer.weight.ncols();
            for r in 0..layer.weight.nrows() {
                for c in 0..cols {
                    layer.weight[(r, c)] = it.next().expect("length checked");
                }
            }
            for b in layer.bias.iter_mut() {
                *b = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// A zero gradient of matching shape.
    pub fn zeros_like(&self) -> EmbeddingGrad {
        EmbeddingGrad {
            layers: self
                .layers
                .iter()
                .map(|l| (DMatrix::zeros(l.weight.nrows(), l.weight.ncols()), DVector::zeros(l.bias.len())))
                .collect(),
        }
    }

    /// Forward pass over the rows of `x`.
    pub fn embed_rows(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<Tape>), ShapeError> {
        let mut out = DMatrix::zeros(x.nrows(), self.output_dim());
        let mut tapes = Vec::with_capacity(x.nrows());
        for r in 0..x.nrows() {
            let (phi, tape) = forward(self, x.row(r).transpose().as_slice())?;
            out.set_row(r, &phi.transpose());
            tapes.push(tape);
        }
        Ok((out, tapes))
    }
}

/// Gradient with the same shape as [`EmbeddingParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrad {
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl EmbeddingGrad {
    pub fn add_assign(&mut self, other: &EmbeddingGrad) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.layers {
            *w *= factor;
            *b *= factor;
        }
    }

    /// Same order as [`EmbeddingParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            for r in 0..w.nrows() {
                out.extend(w.row(r).iter());
            }
            out.extend(b.iter());
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.layers.iter().map(|(w, b)| w.norm_squared() + b.norm_squared()).sum::<f64>().sqrt()
    }
}

/// Per-layer values recorded by [`forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    input: DVector<f64>,
    pre: Vec<DVector<f64>>,
    post: Vec<DVector<f64>>,
}

pub fn forward(params: &EmbeddingParams, x: &[f64]) -> Result<(DVector<f64>, Tape), ShapeError> {
    expect_dim("input length", x.len(), params.input_dim)?;
    let input = DVector::from_column_slice(x);
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut post = Vec::with_capacity(params.layers.len());
    let mut h = input.clone();
    for layer in &params.layers {
        expect_dim("layer input width", layer.input_dim(), h.len())?;
        let z = &layer.weight * &h + &layer.bias;
        let act = layer.activation;
        let a = z.map(|v| act.apply(v));
        pre.push(z);
        post.push(a.clone());
        h = a;
    }
    Ok((h, Tape { input, pre, post }))
}

/// Reverse pass: the gradient of `⟨grad_phi, f_Φ(x)⟩` with respect to Φ.
pub fn backward(params: &EmbeddingParams, tape: &Tape, grad_phi: &[f64]) -> Result<EmbeddingGrad, ShapeError> {
    if tape.pre.len() != params.layers.len() {
        return Err(ShapeError::new("stale tape: layer count differs"));
    }
    expect_dim("output gradient length", grad_phi.len(), params.output_dim())?;
    let mut grads = Vec::with_capacity(params.layers.len());
    let mut upstream = DVector::from_column_slice(grad_phi);
    for (idx, layer) in params.layers.iter().enumerate().rev() {
        let z = &tape.pre[idx];
        let a = &tape.post[idx];
        if z.len() != layer.output_dim() {
            return Err(ShapeError::new(format!("stale tape at layer {idx}")));
        }
        let act = layer.activation;
        let delta = DVector::from_fn(z.len(), |i, _| upstream[i] * act.derivative(z[i], a[i]));
        let input = if idx == 0 { &tape.input } else { &tape.post[idx - 1] };
        if input.len() != layer.input_dim() {
            return Err(ShapeError::new(format!("stale tape at layer {idx}")));
        }
        grads.push((&delta * input.transpose(), delta.clone()));
        upstream = layer.weight.transpose() * delta;
    }
    grads.reverse();
    Ok(EmbeddingGrad { layers: grads })
}
