//! Meta-gradients by projecting the outer-loss partials onto the adapted
//! weights' Jacobians, using only the low-dimensional augmented state.

use crate::dynamics::{adapt, AdaptLimits, AugmentedState, Horizon};
use crate::embedding::{backward, EmbeddingGrad};
use crate::error::{expect_dim, Error, ShapeError};
use crate::loss::{accuracy, cross_entropy, inner_grad, outer_partials, ClassifierWeights, LossConfig, Matrix};
use crate::solver::{SolverConfig, StepStats};
use crate::tasks::Episode;
use crate::trainer::MetaParams;

/// Per-task gradient bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaGradients {
    pub grad_w0: Matrix,
    /// `M×d`, one row per training embedding.
    pub grad_phi_train: Matrix,
    /// `M_test×d`, the direct partials for the test embeddings.
    pub grad_phi_test: Matrix,
    pub grad_embedding: EmbeddingGrad,
    pub grad_t: f64,
    pub grad_log_t: f64,
    /// `⟨∂L_test/∂W, ∇L_train⟩` at `W(T)`.
    pub alignment: f64,
    pub outer_loss: f64,
    pub accuracy: f64,
    pub stats: StepStats,
}

impl MetaGradients {
    pub fn is_finite(&self) -> bool {
        self.grad_w0.iter().all(|v| v.is_finite())
            && self.grad_phi_train.iter().all(|v| v.is_finite())
            && self.grad_phi_test.iter().all(|v| v.is_finite())
            && self.grad_embedding.to_flat().iter().all(|v| v.is_finite())
            && self.grad_t.is_finite()
    }
}

fn check_state(v: &Matrix, state: &AugmentedState, phi: &Matrix) -> Result<(), ShapeError> {
    if !state.tracks_sensitivities() {
        return Err(ShapeError::new("projection needs the sensitivity blocks B and z"));
    }
    expect_dim("rows of V", v.nrows(), state.classes())?;
    expect_dim("training embeddings", phi.nrows(), state.examples())?;
    expect_dim("columns of V", v.ncols(), phi.ncols())
}

/// `C` (`M×N`) with row `j` equal to `Σ_i (V φ_i)ᵀ B[i, j]`.
pub fn shared_c(v: &Matrix, state: &AugmentedState, phi: &Matrix) -> Result<Matrix, ShapeError> {
    check_state(v, state, phi)?;
    let (m_total, n) = (state.examples(), state.classes());
    // Column i of `vphi` is V φ_i.
    let vphi = v * phi.transpose();
    let mut c = Matrix::zeros(m_total, n);
    for j in 0..m_total {
        for i in 0..m_total {
            let b = state.b(i, j);
            for r in 0..n {
                let a = vphi[(r, i)];
                if a == 0.0 {
                    continue;
                }
                for col in 0..n {
                    c[(j, col)] += a * b[r * n + col];
                }
            }
        }
    }
    Ok(c)
}

/// `vec(V)ᵀ dW(T)/dW₀ = V − Cᵀ φ`.
pub fn project_w0(v: &Matrix, state: &AugmentedState, phi: &Matrix) -> Result<Matrix, ShapeError> {
    let c = shared_c(v, state, phi)?;
    Ok(project_w0_with(v, &c, phi))
}

pub fn project_w0_with(v: &Matrix, c: &Matrix, phi: &Matrix) -> Matrix {
    v - c.transpose() * phi
}

/// Row `m` is `vec(V)ᵀ dW(T)/dφ_m = −(s_mᵀ V + C_m W₀ + Σ_j D_{m,j} φ_j)`.
pub fn project_phi(
    v: &Matrix,
    state: &AugmentedState,
    phi: &Matrix,
    w0: &ClassifierWeights,
) -> Result<Matrix, ShapeError> {
    let c = shared_c(v, state, phi)?;
    project_phi_with(v, &c, state, phi, w0)
}

pub fn project_phi_with(
    v: &Matrix,
    c: &Matrix,
    state: &AugmentedState,
    phi: &Matrix,
    w0: &ClassifierWeights,
) -> Result<Matrix, ShapeError> {
    check_state(v, state, phi)?;
    expect_dim("rows of W0", w0.nrows(), v.nrows())?;
    expect_dim("columns of W0", w0.ncols(), v.ncols())?;
    let m_total = state.examples();
    let n = state.classes();
    let vphi = v * phi.transpose();
    // D[m, j] = Σ_i z[i, j, m]ᵀ V φ_i
    let mut dmat = Matrix::zeros(m_total, m_total);
    for i in 0..m_total {
        for j in 0..m_total {
            for m in 0..m_total {
                let z = state.z(i, j, m);
                dmat[(m, j)] += (0..n).map(|r| z[r] * vphi[(r, i)]).sum::<f64>();
            }
        }
    }
    let s = state.s_matrix();
    let out = s * v + c * w0 + dmat * phi;
    Ok(-out)
}

/// `−⟨V, ∇L_train(W(T))⟩`.
pub fn grad_t(v: &Matrix, inner_grad_at_wt: &Matrix) -> f64 {
    -v.dot(inner_grad_at_wt)
}

/// Meta-gradients of one task's test loss with respect to `W₀`, the
/// embedding parameters and `T`.
pub fn task_metagrads(
    meta: &MetaParams,
    episode: &Episode,
    cfg: &LossConfig,
    solver: &SolverConfig,
) -> Result<MetaGradients, Error> {
    let embedding = &meta.embedding;
    let (phi_train, train_tapes) = embedding.embed_rows(episode.train.features())?;
    let (phi_test, test_tapes) = embedding.embed_rows(episode.test.features())?;
    let train = episode.train.with_features(phi_train)?;
    let test = episode.test.with_features(phi_test)?;

    let horizon = Horizon { log_t: meta.log_t };
    let adapted = adapt(&meta.w0, &train, cfg, horizon, solver, true, &AdaptLimits::default())?;
    let outer = outer_partials(&adapted.w_t, &test)?;
    let v = &outer.v;

    let c = shared_c(v, &adapted.state, train.features())?;
    let grad_w0 = project_w0_with(v, &c, train.features());
    let grad_phi_train = project_phi_with(v, &c, &adapted.state, train.features(), &meta.w0)?;

    let inner = inner_grad(&adapted.w_t, &meta.w0, &train, cfg)?;
    let alignment = v.dot(&inner.dense);
    let g_t = -alignment;
    let t = horizon.t();

    let mut grad_embedding = embedding.zeros_like();
    for (m, tape) in train_tapes.iter().enumerate() {
        let row: Vec<f64> = grad_phi_train.row(m).iter().copied().collect();
        grad_embedding.add_assign(&backward(embedding, tape, &row)?);
    }
    for (m, tape) in test_tapes.iter().enumerate() {
        let row: Vec<f64> = outer.grad_phi.row(m).iter().copied().collect();
        grad_embedding.add_assign(&backward(embedding, tape, &row)?);
    }

    Ok(MetaGradients {
        grad_w0,
        grad_phi_train,
        grad_phi_test: outer.grad_phi,
        grad_embedding,
        grad_t: g_t,
        grad_log_t: t * g_t,
        alignment,
        outer_loss: cross_entropy(&adapted.w_t, &test)?,
        accuracy: accuracy(&adapted.w_t, &test)?,
        stats: adapted.stats,
    })
}
