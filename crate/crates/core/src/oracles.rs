//! Brute-force references used to check the meta-gradients: backprop
//! through unrolled gradient descent, the dense forward sensitivity
//! equation, central finite differences, and a demonstration of why
//! integrating a gradient flow backwards in time is unstable.

use crate::dynamics::{adapt, AdaptLimits, Horizon};
use crate::embedding::{backward, EmbeddingParams, Tape};
use crate::error::{expect_dim, Error};
use crate::loss::{
    accuracy, cross_entropy, curvature_block, inner_grad, outer_partials, probabilities, ClassifierWeights,
    EmbeddedSet, LossConfig, Matrix,
};
use crate::meter::Buffer;
use crate::metagrad::MetaGradients;
use crate::solver::{integrate, integrate_checkpoints, FlatState, SolverConfig, StepStats};
use crate::tasks::Episode;
use crate::trainer::MetaParams;

/// Stored iterates of `K` explicit gradient steps.
#[derive(Debug, Clone)]
pub struct UnrollTape {
    n: usize,
    d: usize,
    m: usize,
    pub alpha: f64,
    /// `K + 1` row-major `N×d` iterates.
    iterates: Vec<Buffer>,
    /// `K` row-major `M×N` residual blocks `p − y` at each iterate.
    residuals: Vec<Buffer>,
}

impl UnrollTape {
    pub fn len(&self) -> usize {
        self.iterates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }

    pub fn iterate(&self, k: usize) -> Matrix {
        Matrix::from_row_slice(self.n, self.d, &self.iterates[k])
    }

    pub fn residuals(&self, k: usize) -> Matrix {
        Matrix::from_row_slice(self.m, self.n, &self.residuals[k])
    }

    pub fn last(&self) -> Matrix {
        self.iterate(self.len() - 1)
    }

    pub fn byte_len(&self) -> usize {
        self.iterates.iter().chain(&self.residuals).map(Buffer::byte_len).sum()
    }
}

fn row_major(m: &Matrix) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Runs `W_{k+1} = W_k − α ∇L(W_k)` for `k < K`, keeping every iterate.
pub fn unroll(
    w0: &ClassifierWeights,
    data: &EmbeddedSet,
    cfg: &LossConfig,
    alpha: f64,
    k: usize,
) -> Result<UnrollTape, Error> {
    if !(alpha > 0.0) {
        return Err(Error::Invalid(format!("step size must be positive, got {alpha}")));
    }
    let (n, d, m) = (w0.nrows(), w0.ncols(), data.len());
    let mut iterates = Vec::with_capacity(k + 1);
    let mut residuals = Vec::with_capacity(k);
    let mut w = w0.clone();
    iterates.push(Buffer::from_vec(row_major(&w)));
    for _ in 0..k {
        let g = inner_grad(&w, w0, data, cfg)?;
        residuals.push(Buffer::from_vec(row_major(&g.residuals)));
        w -= g.dense * alpha;
        iterates.push(Buffer::from_vec(row_major(&w)));
    }
    Ok(UnrollTape { n, d, m, alpha, iterates, residuals })
}

struct EmbeddedEpisode {
    train: EmbeddedSet,
    test: EmbeddedSet,
    train_tapes: Vec<Tape>,
    test_tapes: Vec<Tape>,
}

fn embed(meta: &MetaParams, episode: &Episode) -> Result<EmbeddedEpisode, Error> {
    let (phi_train, train_tapes) = meta.embedding.embed_rows(episode.train.features())?;
    let (phi_test, test_tapes) = meta.embedding.embed_rows(episode.test.features())?;
    Ok(EmbeddedEpisode {
        train: episode.train.with_features(phi_train)?,
        test: episode.test.with_features(phi_test)?,
        train_tapes,
        test_tapes,
    })
}

fn embedding_gradient(
    params: &EmbeddingParams,
    e: &EmbeddedEpisode,
    grad_train: &Matrix,
    grad_test: &Matrix,
) -> Result<crate::embedding::EmbeddingGrad, Error> {
    let mut total = params.zeros_like();
    for (tapes, grads) in [(&e.train_tapes, grad_train), (&e.test_tapes, grad_test)] {
        for (m, tape) in tapes.iter().enumerate() {
            let row: Vec<f64> = grads.row(m).iter().copied().collect();
            total.add_assign(&backward(params, tape, &row)?);
        }
    }
    Ok(total)
}

/// Reverse-mode gradients of the test loss through `K` unrolled steps of
/// size `α`. The horizon gradient is reported as `−⟨V, ∇L(W_K)⟩` with
/// `T = Kα`.
pub fn bptt_metagrads(
    meta: &MetaParams,
    episode: &Episode,
    cfg: &LossConfig,
    alpha: f64,
    k: usize,
) -> Result<MetaGradients, Error> {
    let e = embed(meta, episode)?;
    let tape = unroll(&meta.w0, &e.train, cfg, alpha, k)?;
    bptt_from_tape(meta, &e, cfg, &tape)
}

fn bptt_from_tape(
    meta: &MetaParams,
    e: &EmbeddedEpisode,
    cfg: &LossConfig,
    tape: &UnrollTape,
) -> Result<MetaGradients, Error> {
    let phi = e.train.features();
    let m_total = e.train.len();
    let alpha = tape.alpha;
    let lambda = cfg.lambda;
    let w_k = tape.last();
    let outer = outer_partials(&w_k, &e.test)?;

    let mut adj = outer.v.clone();
    let mut grad_w0_direct = Matrix::zeros(adj.nrows(), adj.ncols());
    let mut grad_phi_train = Matrix::zeros(m_total, phi.ncols());
    for step in (0..tape.len() - 1).rev() {
        let w = tape.iterate(step);
        let res = tape.residuals(step);
        let probs = &res + e.train.one_hot();
        let mut prev = adj.clone() * (1.0 - alpha * lambda);
        for m in 0..m_total {
            let phi_m = phi.row(m).transpose();
            let u = &adj * &phi_m;
            let p: Vec<f64> = probs.row(m).iter().copied().collect();
            let au = curvature_block(&p, m_total) * &u;
            prev -= &au * phi_m.transpose() * alpha;
            let r_m = res.row(m).transpose();
            let g_phi = adj.transpose() * &r_m / m_total as f64 + w.transpose() * &au;
            for (x, v) in g_phi.iter().enumerate() {
                grad_phi_train[(m, x)] -= alpha * v;
            }
        }
        grad_w0_direct += &adj * (alpha * lambda);
        adj = prev;
    }
    let grad_w0 = adj + grad_w0_direct;

    let t = alpha * (tape.len() - 1) as f64;
    let inner = inner_grad(&w_k, &meta.w0, &e.train, cfg)?;
    let alignment = outer.v.dot(&inner.dense);
    let grad_embedding = embedding_gradient(&meta.embedding, e, &grad_phi_train, &outer.grad_phi)?;
    Ok(MetaGradients {
        grad_w0,
        grad_phi_train,
        grad_phi_test: outer.grad_phi,
        grad_embedding,
        grad_t: -alignment,
        grad_log_t: -t * alignment,
        alignment,
        outer_loss: cross_entropy(&w_k, &e.test)?,
        accuracy: accuracy(&w_k, &e.test)?,
        stats: StepStats::default(),
    })
}

/// Dense Jacobians of `W(T)` obtained by integrating the full sensitivity
/// equation.
#[derive(Debug, Clone, PartialEq)]
pub struct NaiveSensitivity {
    pub w_t: ClassifierWeights,
    /// `Nd×Nd`, row-major `vec(W)` on both sides.
    pub jac_w0: Matrix,
    /// One `Nd×d` block per training example.
    pub jac_phi: Vec<Matrix>,
}

/// Largest `N·d` accepted by [`naive_forward_sensitivity`].
pub const NAIVE_MAX_ND: usize = 64;

/// Integrates `W`, `dW/dW₀` and every `dW/dφ_m` together. Cost grows as
/// `N²d²`, so the problem size is capped.
pub fn naive_forward_sensitivity(
    meta: &MetaParams,
    episode: &Episode,
    cfg: &LossConfig,
    solver: &SolverConfig,
) -> Result<NaiveSensitivity, Error> {
    let e = embed(meta, episode)?;
    naive_sensitivity_embedded(&meta.w0, &e.train, cfg, meta.t(), solver)
}

/// [`naive_forward_sensitivity`] on already-embedded training data.
pub fn naive_sensitivity_embedded(
    w0: &ClassifierWeights,
    data: &EmbeddedSet,
    cfg: &LossConfig,
    t: f64,
    solver: &SolverConfig,
) -> Result<NaiveSensitivity, Error> {
    let (n, d, m_total) = (w0.nrows(), w0.ncols(), data.len());
    expect_dim("embedding width", data.dim(), d)?;
    let nd = n * d;
    if nd > NAIVE_MAX_ND {
        return Err(Error::Invalid(format!("N·d = {nd} exceeds the dense oracle limit of {NAIVE_MAX_ND}")));
    }
    let phi = data.features().clone();
    let lambda = cfg.lambda;
    // Layout: W (nd), S_W0 (nd×nd), S_φ_m (nd×d) for each m; all row-major.
    let w_len = nd;
    let sw_len = nd * nd;
    let sp_len = nd * d;
    let total = w_len + sw_len + m_total * sp_len;
    let mut y0 = vec![0.0; total];
    y0[..w_len].copy_from_slice(&row_major(w0));
    for k in 0..nd {
        y0[w_len + k * nd + k] = 1.0;
    }
    let one_hot = data.one_hot();
    let rhs = |y: &[f64], dy: &mut [f64]| {
        let w = Matrix::from_row_slice(n, d, &y[..w_len]);
        let probs = probabilities(&w, data).expect("shapes checked");
        let res = &probs - &one_hot;
        let blocks: Vec<Matrix> = (0..m_total)
            .map(|m| curvature_block(&probs.row(m).iter().copied().collect::<Vec<_>>(), m_total))
            .collect();
        let grad = res.transpose() * &phi / m_total as f64 + (&w - w0) * lambda;
        dy[..w_len].copy_from_slice(&row_major(&(-grad)));
        // −H applied to a column x viewed as an N×d matrix X.
        let neg_h = |x: &Matrix| -> Matrix {
            let mut out = x * (-lambda);
            for (m, a) in blocks.iter().enumerate() {
                let phi_m = phi.row(m).transpose();
                out -= a * (x * &phi_m) * phi_m.transpose();
            }
            out
        };
        // S_W0 columns.
        for col in 0..nd {
            let x = Matrix::from_fn(n, d, |r, c| y[w_len + (r * d + c) * nd + col]);
            let mut out = neg_h(&x);
            out[(col / d, col % d)] += lambda;
            for r in 0..n {
                for c in 0..d {
                    dy[w_len + (r * d + c) * nd + col] = out[(r, c)];
                }
            }
        }
        // S_φ_m columns.
        for (m, a) in blocks.iter().enumerate() {
            let base = w_len + sw_len + m * sp_len;
            let aw = a * &w;
            for b in 0..d {
                let x = Matrix::from_fn(n, d, |r, c| y[base + (r * d + c) * d + b]);
                let mut out = neg_h(&x);
                for r in 0..n {
                    out[(r, b)] -= res[(m, r)] / m_total as f64;
                    for c in 0..d {
                        out[(r, c)] -= aw[(r, b)] * phi[(m, c)];
                    }
                }
                for r in 0..n {
                    for c in 0..d {
                        dy[base + (r * d + c) * d + b] = out[(r, c)];
                    }
                }
            }
        }
    };
    let (yt, _) = integrate(rhs, &FlatState::from_slice(&y0)?, 0.0, t, solver)?;
    let v = yt.values();
    let w_t = Matrix::from_row_slice(n, d, &v[..w_len]);
    let jac_w0 = Matrix::from_row_slice(nd, nd, &v[w_len..w_len + sw_len]);
    let jac_phi = (0..m_total)
        .map(|m| {
            let base = w_len + sw_len + m * sp_len;
            Matrix::from_row_slice(nd, d, &v[base..base + sp_len])
        })
        .collect();
    Ok(NaiveSensitivity { w_t, jac_w0, jac_phi })
}

/// Sensitivity `dw(T)/dw₀` of the linear flow `dw/dt = −H w`, by
/// integrating `dS/dt = −H S` from the identity.
pub fn quadratic_sensitivity(h: &Matrix, t: f64, solver: &SolverConfig) -> Result<Matrix, Error> {
    let k = h.nrows();
    expect_dim("Hessian columns", h.ncols(), k)?;
    let y0 = row_major(&Matrix::identity(k, k));
    let rhs = |y: &[f64], dy: &mut [f64]| {
        let s = Matrix::from_row_slice(k, k, y);
        dy.copy_from_slice(&row_major(&(-(h * s))));
    };
    let (yt, _) = integrate(rhs, &FlatState::from_slice(&y0)?, 0.0, t, solver)?;
    Ok(Matrix::from_row_slice(k, k, yt.values()))
}

/// The test loss after adapting already-embedded data for time `t`.
pub fn outer_loss_embedded(
    w0: &ClassifierWeights,
    train: &EmbeddedSet,
    test: &EmbeddedSet,
    cfg: &LossConfig,
    t: f64,
    solver: &SolverConfig,
) -> Result<f64, Error> {
    let limits = AdaptLimits { max_horizon: f64::INFINITY, ..AdaptLimits::default() };
    let adapted = adapt(w0, train, cfg, Horizon::from_t(t), solver, false, &limits)?;
    Ok(cross_entropy(&adapted.w_t, test)?)
}

/// Central differences of the test loss along every coordinate of `W₀`,
/// the train and test embeddings, `Φ` and `T`. `solver` should be accurate
/// well beyond `eps²`.
pub fn finite_diff_metagrads(
    meta: &MetaParams,
    episode: &Episode,
    cfg: &LossConfig,
    solver: &SolverConfig,
    eps: f64,
) -> Result<MetaGradients, Error> {
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("eps must be positive, got {eps}")));
    }
    let e = embed(meta, episode)?;
    let t = meta.t();
    let f = |w0: &Matrix, train: &EmbeddedSet, test: &EmbeddedSet, t: f64| {
        outer_loss_embedded(w0, train, test, cfg, t, solver)
    };
    let central = |plus: f64, minus: f64| (plus - minus) / (2.0 * eps);

    let mut grad_w0 = Matrix::zeros(meta.w0.nrows(), meta.w0.ncols());
    for idx in 0..meta.w0.len() {
        let (r, c) = (idx / meta.w0.ncols(), idx % meta.w0.ncols());
        let mut wp = meta.w0.clone();
        wp[(r, c)] += eps;
        let mut wm = meta.w0.clone();
        wm[(r, c)] -= eps;
        grad_w0[(r, c)] = central(f(&wp, &e.train, &e.test, t)?, f(&wm, &e.train, &e.test, t)?);
    }

    let perturb_set = |set: &EmbeddedSet, r: usize, c: usize, delta: f64| -> Result<EmbeddedSet, Error> {
        let mut x = set.features().clone();
        x[(r, c)] += delta;
        Ok(set.with_features(x)?)
    };
    let mut grad_phi_train = Matrix::zeros(e.train.len(), e.train.dim());
    for r in 0..e.train.len() {
        for c in 0..e.train.dim() {
            let plus = f(&meta.w0, &perturb_set(&e.train, r, c, eps)?, &e.test, t)?;
            let minus = f(&meta.w0, &perturb_set(&e.train, r, c, -eps)?, &e.test, t)?;
            grad_phi_train[(r, c)] = central(plus, minus);
        }
    }
    let mut grad_phi_test = Matrix::zeros(e.test.len(), e.test.dim());
    for r in 0..e.test.len() {
        for c in 0..e.test.dim() {
            let plus = f(&meta.w0, &e.train, &perturb_set(&e.test, r, c, eps)?, t)?;
            let minus = f(&meta.w0, &e.train, &perturb_set(&e.test, r, c, -eps)?, t)?;
            grad_phi_test[(r, c)] = central(plus, minus);
        }
    }

    let base = meta.embedding.to_flat();
    let mut flat_grad = vec![0.0; base.len()];
    for (k, slot) in flat_grad.iter_mut().enumerate() {
        let probe = |delta: f64| -> Result<f64, Error> {
            let mut q = meta.clone();
            let mut flat = base.clone();
            flat[k] += delta;
            q.embedding.set_flat(&flat)?;
            let pe = embed(&q, episode)?;
            f(&q.w0, &pe.train, &pe.test, t)
        };
        *slot = central(probe(eps)?, probe(-eps)?);
    }
    let mut grad_embedding = meta.embedding.zeros_like();
    let mut it = flat_grad.into_iter();
    for (w, b) in &mut grad_embedding.layers {
        let cols = w.ncols();
        for r in 0..w.nrows() {
            for c in 0..cols {
                w[(r, c)] = it.next().expect("sized from the parameters");
            }
        }
        for v in b.iter_mut() {
            *v = it.next().expect("sized from the parameters");
        }
    }

    // Keep both probes at positive horizons.
    let h = eps.min(t / 2.0);
    let grad_t = (f(&meta.w0, &e.train, &e.test, t + h)? - f(&meta.w0, &e.train, &e.test, t - h)?) / (2.0 * h);
    let base_loss = f(&meta.w0, &e.train, &e.test, t)?;
    Ok(MetaGradients {
        grad_w0,
        grad_phi_train,
        grad_phi_test,
        grad_embedding,
        grad_t,
        grad_log_t: t * grad_t,
        alignment: -grad_t,
        outer_loss: base_loss,
        accuracy: f64::NAN,
        stats: StepStats::default(),
    })
}

/// `‖a − b‖ / max(‖b‖, 1e-12)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

/// Relative error of each gradient component of `got` against `reference`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentErrors {
    pub w0: f64,
    pub phi_train: f64,
    pub phi_test: f64,
    pub embedding: f64,
    pub t: f64,
}

impl ComponentErrors {
    pub fn between(got: &MetaGradients, reference: &MetaGradients) -> Self {
        let mat = |a: &Matrix, b: &Matrix| relative_error(&row_major(a), &row_major(b));
        ComponentErrors {
            w0: mat(&got.grad_w0, &reference.grad_w0),
            phi_train: mat(&got.grad_phi_train, &reference.grad_phi_train),
            phi_test: mat(&got.grad_phi_test, &reference.grad_phi_test),
            embedding: relative_error(&got.grad_embedding.to_flat(), &reference.grad_embedding.to_flat()),
            t: relative_error(&[got.grad_t], &[reference.grad_t]),
        }
    }

    pub const NAMES: [&'static str; 5] = ["grad_W0", "grad_phi_train", "grad_phi_test", "grad_Phi", "grad_T"];

    pub fn values(&self) -> [f64; 5] {
        [self.w0, self.phi_train, self.phi_test, self.embedding, self.t]
    }

    pub fn max(&self) -> f64 {
        self.values().into_iter().fold(0.0, f64::max)
    }

    /// Componentwise maximum.
    pub fn worst(&self, other: &Self) -> Self {
        ComponentErrors {
            w0: self.w0.max(other.w0),
            phi_train: self.phi_train.max(other.phi_train),
            phi_test: self.phi_test.max(other.phi_test),
            embedding: self.embedding.max(other.embedding),
            t: self.t.max(other.t),
        }
    }
}

/// A diagonal quadratic problem `dw/dt = −H w`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSpec {
    pub eigenvalues: Vec<f64>,
    pub w0: Vec<f64>,
    pub t: f64,
}

impl QuadraticSpec {
    pub fn validate(&self) -> Result<(), Error> {
        if self.eigenvalues.is_empty() || self.eigenvalues.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Invalid("eigenvalues must be positive and finite".into()));
        }
        expect_dim("initial point length", self.w0.len(), self.eigenvalues.len())?;
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(Error::Invalid(format!("T must be positive, got {}", self.t)));
        }
        Ok(())
    }

    pub fn exact(&self, t: f64) -> Vec<f64> {
        self.w0.iter().zip(&self.eigenvalues).map(|(w, l)| w * (-l * t).exp()).collect()
    }

    pub fn hessian(&self) -> Matrix {
        Matrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.eigenvalues))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointReport {
    pub forward_err: f64,
    pub backward_err: f64,
    /// `max(backward_err, 1e-16) / max(forward_err, 1e-16)`.
    pub ratio: f64,
    pub times: Vec<f64>,
    /// Forward solution at each time.
    pub forward: Vec<Vec<f64>>,
    /// Reconstruction running from `T` back to zero, reported on the same times.
    pub backward: Vec<Vec<f64>>,
}

impl AdjointReport {
    /// Two blocks sharing the time grid: `trajectory,t,w0,w1,…`.
    pub fn csv(&self) -> String {
        let dim = self.forward.first().map_or(0, Vec::len);
        let mut out = String::from("trajectory,t");
        for k in 0..dim {
            out.push_str(&format!(",w{k}"));
        }
        out.push('\n');
        for (name, traj) in [("forward", &self.forward), ("backward", &self.backward)] {
            for (t, w) in self.times.iter().zip(traj) {
                out.push_str(&format!("{name},{t}"));
                for v in w {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
        }
        out
    }
}

const DEMO_POINTS: usize = 51;

/// Integrates the flow forward to `T`, then integrates the same field
/// backward from the computed endpoint, and compares the reconstructed
/// start with the true one.
pub fn adjoint_instability_demo(spec: &QuadraticSpec, solver: &SolverConfig) -> Result<AdjointReport, Error> {
    spec.validate()?;
    let l = spec.eigenvalues.clone();
    let times: Vec<f64> = (0..DEMO_POINTS).map(|k| spec.t * k as f64 / (DEMO_POINTS - 1) as f64).collect();
    let forward_field = |y: &[f64], dy: &mut [f64]| {
        for k in 0..y.len() {
            dy[k] = -l[k] * y[k];
        }
    };
    let (fwd, _) = integrate_checkpoints(forward_field, &FlatState::from_slice(&spec.w0)?, &times, solver)?;
    let forward: Vec<Vec<f64>> = fwd.iter().map(|s| s.values().to_vec()).collect();
    let w_t = forward.last().expect("at least two points").clone();
    let exact_t = spec.exact(spec.t);
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let forward_err = dist(&w_t, &exact_t);

    // Reversed time s = T − t turns dw/dt = −Hw into dw/ds = +Hw.
    let reverse_field = |y: &[f64], dy: &mut [f64]| {
        for k in 0..y.len() {
            dy[k] = l[k] * y[k];
        }
    };
    let (bwd, _) = integrate_checkpoints(reverse_field, &FlatState::from_slice(&w_t)?, &times, solver)?;
    let mut backward: Vec<Vec<f64>> = bwd.iter().map(|s| s.values().to_vec()).collect();
    backward.reverse();
    let backward_err = dist(&backward[0], &spec.w0);
    Ok(AdjointReport {
        forward_err,
        backward_err,
        ratio: backward_err.max(1e-16) / forward_err.max(1e-16),
        times,
        forward,
        backward,
    })
}
