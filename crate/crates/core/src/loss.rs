//! Softmax cross-entropy on embedded examples, with an optional proximal
//! term `(λ/2)‖W − W₀‖²` around the initialization.
//!
//! Gradients are carried as per-example residuals `p_m − y_m`; the dense
//! `N×d` matrix is `(1/M) Σ (p_m − y_m) φ_mᵀ + λ(W − W₀)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{expect_dim, ShapeError};

pub type Matrix = DMatrix<f64>;
/// Linear classifier weights, `N×d`.
pub type ClassifierWeights = DMatrix<f64>;

/// Embedded examples (rows of `features`) with class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSet {
    features: Matrix,
    labels: Vec<usize>,
    n_classes: usize,
}

impl EmbeddedSet {
    pub fn new(features: Matrix, labels: Vec<usize>, n_classes: usize) -> Result<Self, ShapeError> {
        expect_dim("number of labels", labels.len(), features.nrows())?;
        if features.nrows() == 0 {
            return Err(ShapeError::new("an embedded set needs at least one example"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(ShapeError(format!("label {bad} out of range for {n_classes} classes")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(ShapeError::new("features must be finite"));
        }
        Ok(EmbeddedSet { features, labels, n_classes })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, m: usize) -> DVector<f64> {
        self.features.row(m).transpose()
    }

    /// The `M×N` one-hot label matrix.
    pub fn one_hot(&self) -> Matrix {
        let mut y = Matrix::zeros(self.len(), self.n_classes);
        for (m, &l) in self.labels.iter().enumerate() {
            y[(m, l)] = 1.0;
        }
        y
    }

    /// Same labels, different features.
    pub fn with_features(&self, features: Matrix) -> Result<Self, ShapeError> {
        EmbeddedSet::new(features, self.labels.clone(), self.n_classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default)]
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.0 }
    }
}

impl LossConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        LossConfig { lambda }
    }
}

/// Softmax of a logit vector with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for o in &mut out {
        *o /= total;
    }
    out
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// `softmax(W φ)`.
pub fn softmax_probs(w: &ClassifierWeights, phi: &[f64]) -> Result<Vec<f64>, ShapeError> {
    expect_dim("embedding length", phi.len(), w.ncols())?;
    Ok(softmax(&logits(w, phi)))
}

fn logits(w: &ClassifierWeights, phi: &[f64]) -> Vec<f64> {
    (0..w.nrows())
        .map(|n| w.row(n).iter().zip(phi).map(|(a, b)| a * b).sum())
        .collect()
}

fn check_weights(w: &ClassifierWeights, data: &EmbeddedSet) -> Result<(), ShapeError> {
    expect_dim("classifier rows (classes)", w.nrows(), data.n_classes())?;
    expect_dim("classifier columns (embedding dim)", w.ncols(), data.dim())
}

/// Mean cross-entropy of `data` under `W`, unregularized.
pub fn cross_entropy(w: &ClassifierWeights, data: &EmbeddedSet) -> Result<f64, ShapeError> {
    check_weights(w, data)?;
    let scores = data.features() * w.transpose();
    let mut total = 0.0;
    for (m, &label) in data.labels().iter().enumerate() {
        let row: Vec<f64> = scores.row(m).iter().copied().collect();
        total += log_sum_exp(&row) - row[label];
    }
    Ok(total / data.len() as f64)
}

/// Inner (training) loss with the proximal term.
pub fn inner_loss(
    w: &ClassifierWeights,
    w0: &ClassifierWeights,
    data: &EmbeddedSet,
    cfg: &LossConfig,
) -> Result<f64, ShapeError> {
    check_weights(w0, data)?;
    let ce = cross_entropy(w, data)?;
    if cfg.lambda == 0.0 {
        return Ok(ce);
    }
    Ok(ce + 0.5 * cfg.lambda * (w - w0).norm_squared())
}

/// Probabilities `p_m` for every row, as an `M×N` matrix.
pub fn probabilities(w: &ClassifierWeights, data: &EmbeddedSet) -> Result<Matrix, ShapeError> {
    check_weights(w, data)?;
    let scores = data.features() * w.transpose();
    let mut p = Matrix::zeros(data.len(), data.n_classes());
    for m in 0..data.len() {
        let row: Vec<f64> = scores.row(m).iter().copied().collect();
        for (n, v) in softmax(&row).into_iter().enumerate() {
            p[(m, n)] = v;
        }
    }
    Ok(p)
}

/// The inner gradient in dense form together with its rank-one factors.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerGradient {
    /// `N×d` gradient matrix.
    pub dense: Matrix,
    /// `M×N`; row `m` is `p_m − y_m`.
    pub residuals: Matrix,
}

pub fn inner_grad(
    w: &ClassifierWeights,
    w0: &ClassifierWeights,
    data: &EmbeddedSet,
    cfg: &LossConfig,
) -> Result<InnerGradient, ShapeError> {
    check_weights(w0, data)?;
    let residuals = probabilities(w, data)? - data.one_hot();
    let mut dense = residuals.transpose() * data.features() / data.len() as f64;
    if cfg.lambda != 0.0 {
        dense += (w - w0) * cfg.lambda;
    }
    Ok(InnerGradient { dense, residuals })
}

/// `A = (diag(p) − p pᵀ) / M`.
pub fn curvature_block(p: &[f64], m_total: usize) -> Matrix {
    let n = p.len();
    let scale = 1.0 / m_total as f64;
    Matrix::from_fn(n, n, |a, b| {
        let diag = if a == b { p[a] } else { 0.0 };
        (diag - p[a] * p[b]) * scale
    })
}

/// The `M` curvature blocks of the cross-entropy Hessian.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureBlocks {
    pub blocks: Vec<Matrix>,
}

pub fn curvature(w: &ClassifierWeights, data: &EmbeddedSet) -> Result<CurvatureBlocks, ShapeError> {
    let p = probabilities(w, data)?;
    let m_total = data.len();
    let blocks = (0..m_total)
        .map(|m| {
            let row: Vec<f64> = p.row(m).iter().copied().collect();
            curvature_block(&row, m_total)
        })
        .collect();
    Ok(CurvatureBlocks { blocks })
}

impl CurvatureBlocks {
    /// Dense `Nd×Nd` Hessian `Σ A_m ⊗ φ_m φ_mᵀ + λI` in row-major `vec(W)` order.
    pub fn assemble_hessian(&self, data: &EmbeddedSet, lambda: f64) -> Matrix {
        let n = data.n_classes();
        let d = data.dim();
        let mut h = Matrix::identity(n * d, n * d) * lambda;
        for (m, a) in self.blocks.iter().enumerate() {
            let phi = data.features().row(m);
            for r in 0..n {
                for c in 0..n {
                    let arc = a[(r, c)];
                    if arc == 0.0 {
                        continue;
                    }
                    for x in 0..d {
                        for y in 0..d {
                            h[(r * d + x, c * d + y)] += arc * phi[x] * phi[y];
                        }
                    }
                }
            }
        }
        h
    }
}

/// Partial derivatives of the (unregularized) test loss.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterPartials {
    /// `∂L/∂W(T)`, `N×d`.
    pub v: Matrix,
    /// Row `m` is `∂L/∂φ_m` for the test examples.
    pub grad_phi: Matrix,
}

pub fn outer_partials(w_t: &ClassifierWeights, test: &EmbeddedSet) -> Result<OuterPartials, ShapeError> {
    let residuals = probabilities(w_t, test)? - test.one_hot();
    let scale = 1.0 / test.len() as f64;
    let v = residuals.transpose() * test.features() * scale;
    let grad_phi = &residuals * w_t * scale;
    Ok(OuterPartials { v, grad_phi })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `data` classified correctly by `argmax(W φ)`.
pub fn accuracy(w: &ClassifierWeights, data: &EmbeddedSet) -> Result<f64, ShapeError> {
    check_weights(w, data)?;
    let scores = data.features() * w.transpose();
    let correct = (0..data.len())
        .filter(|&m| {
            let row: Vec<f64> = scores.row(m).iter().copied().collect();
            argmax(&row) == data.labels()[m]
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}
