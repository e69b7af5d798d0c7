//! Gradient-flow adaptation of the linear classifier, expressed through the
//! low-dimensional augmented state `{s_m(t), B_t[i,j], z_t[i,j,m]}`.
//!
//! `W(t) = W₀ − Σ_m s_m(t) φ_mᵀ`, and the Jacobians `dW(t)/dW₀`, `dW(t)/dφ_m`
//! are linear in `B` and `z`. Nothing in the right-hand side depends on the
//! embedding dimension `d`: logits are recovered from the Gram matrix and
//! the initial logits `W₀ φ_m`.
//!
//! Flat layout: `s` (`M×N`), then `B` row-major over `(i, j)` with each block
//! an `N×N` row-major matrix, then `z` row-major over `(i, j, m)` with each
//! entry an `N`-vector.

use std::sync::Arc;

use crate::error::{expect_dim, Error, ShapeError};
use crate::loss::{curvature_block, softmax, ClassifierWeights, EmbeddedSet, LossConfig, Matrix};
use crate::solver::{integrate, integrate_checkpoints, FlatState, Layout, Segment, SolverConfig, StepStats};

/// Pairwise inner products of the training embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix(Matrix);

impl GramMatrix {
    pub fn new(phi: &Matrix) -> Self {
        GramMatrix(phi * phi.transpose())
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }
}

/// Adaptation horizon stored as `log T`, so `T > 0` always.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Horizon {
    pub log_t: f64,
}

impl Horizon {
    pub fn from_t(t: f64) -> Self {
        Horizon { log_t: t.ln() }
    }

    pub fn t(&self) -> f64 {
        self.log_t.exp()
    }
}

/// Hard limits checked before any state is allocated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptLimits {
    pub max_horizon: f64,
    pub max_examples: usize,
    /// Upper bound on the number of `f64` entries in the augmented state.
    pub max_state_values: usize,
}

impl Default for AdaptLimits {
    fn default() -> Self {
        AdaptLimits { max_horizon: 100.0, max_examples: 64, max_state_values: 1 << 24 }
    }
}

/// Number of entries in the flattened augmented state.
pub fn augmented_len(m: usize, n: usize, track: bool) -> usize {
    if track {
        m * n + m * m * n * n + m * m * m * n
    } else {
        m * n
    }
}

fn augmented_layout(m: usize, n: usize, track: bool) -> Arc<Layout> {
    let mut segments = vec![Segment::new("s", &[m, n])];
    if track {
        segments.push(Segment::new("B", &[m, m, n, n]));
        segments.push(Segment::new("z", &[m, m, m, n]));
    }
    Arc::new(Layout::new(segments).expect("segment names are distinct"))
}

/// The solution of the augmented system at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    state: FlatState,
    m: usize,
    n: usize,
    track: bool,
}

impl AugmentedState {
    /// The all-zero initial condition.
    pub fn zeros(m: usize, n: usize, track: bool) -> Self {
        AugmentedState { state: FlatState::zeros(augmented_layout(m, n, track)), m, n, track }
    }

    pub fn from_flat(state: FlatState, m: usize, n: usize, track: bool) -> Result<Self, ShapeError> {
        expect_dim("augmented state length", state.len(), augmented_len(m, n, track))?;
        Ok(AugmentedState { state, m, n, track })
    }

    pub fn flat(&self) -> &FlatState {
        &self.state
    }

    pub fn examples(&self) -> usize {
        self.m
    }

    pub fn classes(&self) -> usize {
        self.n
    }

    pub fn tracks_sensitivities(&self) -> bool {
        self.track
    }

    fn b_offset(&self) -> usize {
        self.m * self.n
    }

    fn z_offset(&self) -> usize {
        self.m * self.n + self.m * self.m * self.n * self.n
    }

    pub fn s(&self, m: usize) -> &[f64] {
        &self.state.values()[m * self.n..(m + 1) * self.n]
    }

    /// `s` as an `M×N` matrix.
    pub fn s_matrix(&self) -> Matrix {
        Matrix::from_row_slice(self.m, self.n, &self.state.values()[..self.m * self.n])
    }

    /// Row-major `N×N` block `B[i, j]`; panics when sensitivities are not tracked.
    pub fn b(&self, i: usize, j: usize) -> &[f64] {
        assert!(self.track, "B is not tracked");
        let nn = self.n * self.n;
        let start = self.b_offset() + (i * self.m + j) * nn;
        &self.state.values()[start..start + nn]
    }

    pub fn b_matrix(&self, i: usize, j: usize) -> Matrix {
        Matrix::from_row_slice(self.n, self.n, self.b(i, j))
    }

    /// `z[i, j, m]`, an `N`-vector.
    pub fn z(&self, i: usize, j: usize, m: usize) -> &[f64] {
        assert!(self.track, "z is not tracked");
        let start = self.z_offset() + ((i * self.m + j) * self.m + m) * self.n;
        &self.state.values()[start..start + self.n]
    }

    /// Frobenius norms of the `s`, `B` and `z` parts.
    pub fn norms(&self) -> (f64, f64, f64) {
        let v = self.state.values();
        let norm = |r: std::ops::Range<usize>| v[r].iter().map(|x| x * x).sum::<f64>().sqrt();
        let s = norm(0..self.b_offset());
        if !self.track {
            return (s, 0.0, 0.0);
        }
        (s, norm(self.b_offset()..self.z_offset()), norm(self.z_offset()..v.len()))
    }

    pub fn is_finite(&self) -> bool {
        self.state.values().iter().all(|v| v.is_finite())
    }
}

/// `W₀ − Σ_m s_m φ_mᵀ`.
pub fn reconstruct_w(w0: &ClassifierWeights, s: &Matrix, phi: &Matrix) -> Result<ClassifierWeights, ShapeError> {
    expect_dim("s rows vs embeddings", s.nrows(), phi.nrows())?;
    expect_dim("s columns vs classes", s.ncols(), w0.nrows())?;
    expect_dim("embedding dim", phi.ncols(), w0.ncols())?;
    Ok(w0 - s.transpose() * phi)
}

/// Everything the right-hand side needs for one task, precomputed once.
#[derive(Debug, Clone)]
pub struct TaskSystem {
    m: usize,
    n: usize,
    lambda: f64,
    track: bool,
    /// Row-major `M×M`.
    gram: Vec<f64>,
    /// Row-major `M×N`, logits `W₀ φ_m`.
    base_logits: Vec<f64>,
    /// Row-major `M×N` one-hot labels.
    labels: Vec<f64>,
}

impl TaskSystem {
    pub fn new(
        w0: &ClassifierWeights,
        data: &EmbeddedSet,
        cfg: &LossConfig,
        gram: &GramMatrix,
        track: bool,
    ) -> Result<Self, ShapeError> {
        expect_dim("classifier rows (classes)", w0.nrows(), data.n_classes())?;
        expect_dim("classifier columns (embedding dim)", w0.ncols(), data.dim())?;
        expect_dim("Gram matrix size", gram.size(), data.len())?;
        let m = data.len();
        let n = data.n_classes();
        let base = data.features() * w0.transpose();
        let row_major = |mat: &Matrix| -> Vec<f64> {
            let mut out = Vec::with_capacity(mat.len());
            for r in 0..mat.nrows() {
                out.extend(mat.row(r).iter());
            }
            out
        };
        Ok(TaskSystem {
            m,
            n,
            lambda: cfg.lambda,
            track,
            gram: row_major(gram.matrix()),
            base_logits: row_major(&base),
            labels: row_major(&data.one_hot()),
        })
    }

    pub fn state_len(&self) -> usize {
        augmented_len(self.m, self.n, self.track)
    }

    /// Per-example probabilities at the state `s` (row-major `M×N`).
    fn probabilities(&self, s: &[f64]) -> Vec<f64> {
        let (m_total, n) = (self.m, self.n);
        let mut p = vec![0.0; m_total * n];
        let mut logits = vec![0.0; n];
        for m in 0..m_total {
            logits.copy_from_slice(&self.base_logits[m * n..(m + 1) * n]);
            for k in 0..m_total {
                let g = self.gram[m * m_total + k];
                if g == 0.0 {
                    continue;
                }
                for c in 0..n {
                    logits[c] -= g * s[k * n + c];
                }
            }
            p[m * n..(m + 1) * n].copy_from_slice(&softmax(&logits));
        }
        p
    }

    /// Writes the time derivative of the flat state `y` into `dy`.
    pub fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        let (m_total, n) = (self.m, self.n);
        let inv_m = 1.0 / m_total as f64;
        let s = &y[..m_total * n];
        let p = self.probabilities(s);

        for idx in 0..m_total * n {
            dy[idx] = (p[idx] - self.labels[idx]) * inv_m - self.lambda * s[idx];
        }
        if !self.track {
            return;
        }

        let nn = n * n;
        let a: Vec<Matrix> =
            (0..m_total).map(|m| curvature_block(&p[m * n..(m + 1) * n], m_total)).collect();
        let b_off = m_total * n;
        let z_off = b_off + m_total * m_total * nn;
        let b = &y[b_off..z_off];
        let z = &y[z_off..];

        // dB[i,j] = 1(i=j) A_i − λ B[i,j] − A_i Σ_k G[i,k] B[k,j]
        let mut h = vec![0.0; nn];
        for i in 0..m_total {
            let ai = &a[i];
            for j in 0..m_total {
                h.fill(0.0);
                for k in 0..m_total {
                    let g = self.gram[i * m_total + k];
                    let bkj = &b[(k * m_total + j) * nn..(k * m_total + j + 1) * nn];
                    for (hv, bv) in h.iter_mut().zip(bkj) {
                        *hv += g * bv;
                    }
                }
                let out = &mut dy[b_off + (i * m_total + j) * nn..b_off + (i * m_total + j + 1) * nn];
                let bij = &b[(i * m_total + j) * nn..(i * m_total + j + 1) * nn];
                for r in 0..n {
                    for c in 0..n {
                        let mut acc = 0.0;
                        for q in 0..n {
                            acc += ai[(r, q)] * h[q * n + c];
                        }
                        let diag = if i == j { ai[(r, c)] } else { 0.0 };
                        out[r * n + c] = diag - self.lambda * bij[r * n + c] - acc;
                    }
                }
            }
        }

        // dz[i,j,m] = −A_i (1(i=j) s_m + 1(i=m) s_j + Σ_k G[i,k] z[k,j,m]) − λ z[i,j,m]
        let mut v = vec![0.0; n];
        let zi = |i: usize, j: usize, m: usize| ((i * m_total + j) * m_total + m) * n;
        for i in 0..m_total {
            let ai = &a[i];
            for j in 0..m_total {
                for m in 0..m_total {
                    v.fill(0.0);
                    if i == j {
                        for c in 0..n {
                            v[c] += s[m * n + c];
                        }
                    }
                    if i == m {
                        for c in 0..n {
                            v[c] += s[j * n + c];
                        }
                    }
                    for k in 0..m_total {
                        let g = self.gram[i * m_total + k];
                        let zk = &z[zi(k, j, m)..zi(k, j, m) + n];
                        for c in 0..n {
                            v[c] += g * zk[c];
                        }
                    }
                    let base = z_off + zi(i, j, m);
                    let zijm = &z[zi(i, j, m)..zi(i, j, m) + n];
                    for r in 0..n {
                        let mut acc = 0.0;
                        for c in 0..n {
                            acc += ai[(r, c)] * v[c];
                        }
                        dy[base + r] = -acc - self.lambda * zijm[r];
                    }
                }
            }
        }
    }
}

/// `ds/dt` for the adaptation-only system, as an `M×N` matrix.
pub fn rhs_adapt(
    w0: &ClassifierWeights,
    data: &EmbeddedSet,
    cfg: &LossConfig,
    s: &Matrix,
) -> Result<Matrix, ShapeError> {
    expect_dim("s rows", s.nrows(), data.len())?;
    expect_dim("s columns", s.ncols(), data.n_classes())?;
    let gram = GramMatrix::new(data.features());
    let system = TaskSystem::new(w0, data, cfg, &gram, false)?;
    let mut flat = Vec::with_capacity(s.len());
    for r in 0..s.nrows() {
        flat.extend(s.row(r).iter());
    }
    let mut out = vec![0.0; flat.len()];
    system.rhs(&flat, &mut out);
    Ok(Matrix::from_row_slice(s.nrows(), s.ncols(), &out))
}

/// Time derivative of the full augmented state.
pub fn rhs_full(
    w0: &ClassifierWeights,
    data: &EmbeddedSet,
    cfg: &LossConfig,
    state: &AugmentedState,
    gram: &GramMatrix,
) -> Result<AugmentedState, ShapeError> {
    expect_dim("state examples", state.examples(), data.len())?;
    expect_dim("state classes", state.classes(), data.n_classes())?;
    let system = TaskSystem::new(w0, data, cfg, gram, state.tracks_sensitivities())?;
    let mut out = vec![0.0; state.flat().len()];
    system.rhs(state.flat().values(), &mut out);
    let flat = FlatState::new(Arc::clone(state.flat().layout()), out)
        .map_err(|e| ShapeError(e.to_string()))?;
    AugmentedState::from_flat(flat, state.examples(), state.classes(), state.tracks_sensitivities())
}

/// Result of adapting to one task.
#[derive(Debug, Clone)]
pub struct Adapted {
    pub w_t: ClassifierWeights,
    pub state: AugmentedState,
    pub stats: StepStats,
}

fn check_limits(t: f64, m: usize, n: usize, track: bool, limits: &AdaptLimits) -> Result<(), Error> {
    if !(t > 0.0) {
        return Err(Error::Invalid(format!("horizon must be positive, got {t}")));
    }
    // exp(ln cap) may land one ulp above the cap.
    if !(t <= limits.max_horizon * (1.0 + 1e-12)) {
        return Err(Error::HorizonTooLong { t, cap: limits.max_horizon });
    }
    if m > limits.max_examples {
        return Err(Error::Invalid(format!(
            "{m} training examples exceed the cap of {}",
            limits.max_examples
        )));
    }
    let needed = augmented_len(m, n, track);
    if needed > limits.max_state_values {
        return Err(Error::MemoryBudgetExceeded { needed, budget: limits.max_state_values });
    }
    Ok(())
}

/// Integrates the augmented system (or only `s` when `track` is false) from
/// zero to `T` and reconstructs `W(T)`.
pub fn adapt(
    w0: &ClassifierWeights,
    data: &EmbeddedSet,
    cfg: &LossConfig,
    horizon: Horizon,
    solver: &SolverConfig,
    track: bool,
    limits: &AdaptLimits,
) -> Result<Adapted, Error> {
    let t = horizon.t();
    let (m, n) = (data.len(), data.n_classes());
    check_limits(t, m, n, track, limits)?;
    let gram = GramMatrix::new(data.features());
    let system = TaskSystem::new(w0, data, cfg, &gram, track)?;
    let init = AugmentedState::zeros(m, n, track);
    let (flat, stats) = integrate(|y, dy| system.rhs(y, dy), init.flat(), 0.0, t, solver)?;
    let state = AugmentedState::from_flat(flat, m, n, track)?;
    let w_t = reconstruct_w(w0, &state.s_matrix(), data.features())?;
    Ok(Adapted { w_t, state, stats })
}

/// Like [`adapt`], returning the states at each of the given times
/// (ascending, starting at zero).
pub fn adapt_checkpoints(
    w0: &ClassifierWeights,
    data: &EmbeddedSet,
    cfg: &LossConfig,
    times: &[f64],
    solver: &SolverConfig,
    track: bool,
    limits: &AdaptLimits,
) -> Result<Vec<AugmentedState>, Error> {
    let (m, n) = (data.len(), data.n_classes());
    check_limits(times.last().copied().unwrap_or(0.0), m, n, track, limits)?;
    let gram = GramMatrix::new(data.features());
    let system = TaskSystem::new(w0, data, cfg, &gram, track)?;
    let init = AugmentedState::zeros(m, n, track);
    let (flats, _) = integrate_checkpoints(|y, dy| system.rhs(y, dy), init.flat(), times, solver)?;
    flats
        .into_iter()
        .map(|f| AugmentedState::from_flat(f, m, n, track).map_err(Error::from))
        .collect()
}

/// Dense `dW/dW₀ = I − Σ_{i,j} B[i,j] ⊗ φ_i φ_jᵀ` (`Nd×Nd`, row-major `vec(W)`).
pub fn assemble_jacobian_w0(state: &AugmentedState, phi: &Matrix) -> Matrix {
    let (m_total, n, d) = (state.examples(), state.classes(), phi.ncols());
    let mut jac = Matrix::identity(n * d, n * d);
    for i in 0..m_total {
        for j in 0..m_total {
            let b = state.b(i, j);
            for r in 0..n {
                for c in 0..n {
                    let brc = b[r * n + c];
                    for x in 0..d {
                        for y in 0..d {
                            jac[(r * d + x, c * d + y)] -= brc * phi[(i, x)] * phi[(j, y)];
                        }
                    }
                }
            }
        }
    }
    jac
}

/// Dense `dW/dφ_m` (`Nd×d`):
/// `−[s_m ⊗ I + Σ_i B[i,m] W₀ ⊗ φ_i + Σ_{i,j} z[i,j,m] φ_jᵀ ⊗ φ_i]`.
pub fn assemble_jacobian_phi(state: &AugmentedState, phi: &Matrix, w0: &ClassifierWeights, m: usize) -> Matrix {
    let (m_total, n, d) = (state.examples(), state.classes(), phi.ncols());
    let mut jac = Matrix::zeros(n * d, d);
    let s_m = state.s(m);
    for r in 0..n {
        for x in 0..d {
            jac[(r * d + x, x)] -= s_m[r];
        }
    }
    for i in 0..m_total {
        let bw = state.b_matrix(i, m) * w0;
        for r in 0..n {
            for x in 0..d {
                for y in 0..d {
                    jac[(r * d + x, y)] -= bw[(r, y)] * phi[(i, x)];
                }
            }
        }
        for j in 0..m_total {
            let z = state.z(i, j, m);
            for r in 0..n {
                for x in 0..d {
                    for y in 0..d {
                        jac[(r * d + x, y)] -= z[r] * phi[(j, y)] * phi[(i, x)];
                    }
                }
            }
        }
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{inner_grad, inner_loss};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(seed: u64, m: usize, n: usize, d: usize) -> (Matrix, EmbeddedSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = Matrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0));
        let labels = (0..m).map(|i| i % n).collect();
        let w0 = Matrix::from_fn(n, d, |_, _| rng.random_range(-0.5..0.5));
        (w0, EmbeddedSet::new(phi, labels, n).unwrap())
    }

    #[test]
    fn reconstruct_closed_forms() {
        let w0 = Matrix::from_fn(2, 3, |r, c| (r * 3 + c) as f64);
        let phi = Matrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        assert_eq!(reconstruct_w(&w0, &Matrix::zeros(1, 2), &phi).unwrap(), w0);
        let s = Matrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let w = reconstruct_w(&w0, &s, &phi).unwrap();
        let mut expected = w0.clone();
        expected[(0, 0)] -= 1.0;
        assert_eq!(w, expected);
        assert!(reconstruct_w(&w0, &Matrix::zeros(2, 2), &phi).is_err());
    }

    #[test]
    fn rhs_adapt_at_zero_state() {
        let phi = Matrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 2.0]);
        let data = EmbeddedSet::new(phi, vec![0, 0], 2).unwrap();
        let w0 = Matrix::zeros(2, 2);
        let ds = rhs_adapt(&w0, &data, &LossConfig::default(), &Matrix::zeros(2, 2)).unwrap();
        for m in 0..2 {
            assert!((ds[(m, 0)] + 0.25).abs() < 1e-15);
            assert!((ds[(m, 1)] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn rhs_adapt_with_exact_fit_is_pure_decay() {
        // With saturated predictions the residual vanishes and ds/dt = −λ s.
        let phi = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let data = EmbeddedSet::new(phi, vec![0, 1], 2).unwrap();
        let w0 = Matrix::from_row_slice(2, 2, &[2000.0, -2000.0, -2000.0, 2000.0]);
        let s = Matrix::from_row_slice(2, 2, &[0.1, -0.2, 0.3, 0.05]);
        let ds = rhs_adapt(&w0, &data, &LossConfig::with_lambda(10.0), &s).unwrap();
        assert!((&ds + &s * 10.0).amax() < 1e-15);
    }

    #[test]
    fn rhs_full_at_zero_state() {
        let (_, data) = instance(3, 3, 2, 3);
        let w0 = Matrix::zeros(2, 3);
        let gram = GramMatrix::new(data.features());
        let state = AugmentedState::zeros(3, 2, true);
        let d = rhs_full(&w0, &data, &LossConfig::default(), &state, &gram).unwrap();
        let expected_a = (Matrix::identity(2, 2) / 2.0 - Matrix::from_element(2, 2, 0.25)) / 3.0;
        for i in 0..3 {
            for j in 0..3 {
                let blk = d.b_matrix(i, j);
                if i == j {
                    assert!((&blk - &expected_a).amax() < 1e-15);
                } else {
                    assert_eq!(blk.amax(), 0.0);
                }
                for m in 0..3 {
                    assert!(d.z(i, j, m).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn state_size_is_independent_of_horizon() {
        let (w0, data) = instance(4, 4, 3, 5);
        let limits = AdaptLimits::default();
        for t in [0.01, 1.0, 10.0] {
            let out = adapt(&w0, &data, &LossConfig::default(), Horizon::from_t(t), &SolverConfig::default(), true, &limits)
                .unwrap();
            assert_eq!(out.state.flat().len(), 4 * 3 + 16 * 9 + 64 * 3);
        }
    }

    #[test]
    fn tiny_horizon_is_identity() {
        let (w0, data) = instance(5, 4, 3, 5);
        let out = adapt(
            &w0,
            &data,
            &LossConfig::default(),
            Horizon::from_t(1e-12),
            &SolverConfig::default(),
            true,
            &AdaptLimits::default(),
        )
        .unwrap();
        assert!((&out.w_t - &w0).amax() <= 1e-10);
        let (s, b, z) = out.state.norms();
        assert!(s <= 1e-10 && b <= 1e-10 && z <= 1e-10);
    }

    #[test]
    fn euler_adaptation_is_gradient_descent() {
        let (w0, data) = instance(6, 6, 3, 8);
        let cfg = LossConfig::with_lambda(0.1);
        let out = adapt(&w0, &data, &cfg, Horizon::from_t(0.1), &SolverConfig::euler(0.01), false, &AdaptLimits::default())
            .unwrap();
        assert_eq!(out.stats.accepted_steps, 10);
        let mut w = w0.clone();
        for _ in 0..10 {
            w -= inner_grad(&w, &w0, &data, &cfg).unwrap().dense * 0.01;
        }
        assert!((&out.w_t - &w).amax() <= 1e-12);
    }

    #[test]
    fn dopri5_agrees_with_fine_euler() {
        let (w0, data) = instance(7, 6, 3, 5);
        let cfg = LossConfig::default();
        let limits = AdaptLimits::default();
        let a = adapt(&w0, &data, &cfg, Horizon::from_t(1.0), &SolverConfig::dopri5(1e-8, 1e-10), false, &limits)
            .unwrap();
        let b = adapt(&w0, &data, &cfg, Horizon::from_t(1.0), &SolverConfig::euler(1e-4), false, &limits).unwrap();
        assert!((&a.w_t - &b.w_t).amax() <= 1e-5);
    }

    #[test]
    fn reconstruction_matches_direct_integration_of_w() {
        let (w0, data) = instance(8, 5, 3, 4);
        let cfg = LossConfig::with_lambda(0.2);
        let solver = SolverConfig::dopri5(1e-9, 1e-11);
        let t = 2.0;
        let out = adapt(&w0, &data, &cfg, Horizon::from_t(t), &solver, false, &AdaptLimits::default()).unwrap();
        // Oracle: integrate dW/dt = −∇L(W) directly in the N×d space.
        let (n, d) = (3, 4);
        let y0 = FlatState::from_slice(w0.transpose().as_slice()).unwrap();
        let field = |y: &[f64], dy: &mut [f64]| {
            let w = Matrix::from_row_slice(n, d, y);
            let g = inner_grad(&w, &w0, &data, &cfg).unwrap().dense;
            for r in 0..n {
                for c in 0..d {
                    dy[r * d + c] = -g[(r, c)];
                }
            }
        };
        let (yt, _) = integrate(field, &y0, 0.0, t, &solver).unwrap();
        let direct = Matrix::from_row_slice(n, d, yt.values());
        let rel = (&direct - &out.w_t).norm() / direct.norm();
        assert!(rel <= 10.0 * 1e-9 * 10.0, "relative error {rel}");
    }

    #[test]
    fn equilibrium_has_vanishing_flow() {
        // Duplicated embeddings with conflicting labels keep the minimiser
        // finite; the ridge term makes it unique.
        let phi = Matrix::from_row_slice(4, 2, &[1.0, 0.2, 1.0, 0.2, -0.4, 1.0, -0.4, 1.0]);
        let data = EmbeddedSet::new(phi, vec![0, 1, 1, 0], 2).unwrap();
        let w0 = Matrix::from_row_slice(2, 2, &[0.3, -0.2, 0.1, 0.4]);
        let cfg = LossConfig::with_lambda(0.5);
        let out = adapt(&w0, &data, &cfg, Horizon::from_t(100.0), &SolverConfig::dopri5(1e-10, 1e-12), false, &AdaptLimits::default())
            .unwrap();
        let g = inner_grad(&out.w_t, &w0, &data, &cfg).unwrap();
        assert!(g.dense.norm() <= 1e-6, "gradient norm {}", g.dense.norm());
        let ds = rhs_adapt(&w0, &data, &cfg, &out.state.s_matrix()).unwrap();
        // The residuals themselves need not vanish; their combination with φ does.
        assert!((ds.transpose() * data.features()).norm() <= 1e-6);
    }

    #[test]
    fn inner_loss_decreases_along_trajectory() {
        let (w0, data) = instance(9, 6, 3, 5);
        let cfg = LossConfig::with_lambda(0.05);
        let times = [0.0, 0.5, 1.0, 2.0, 4.0];
        let states =
            adapt_checkpoints(&w0, &data, &cfg, &times, &SolverConfig::dopri5(1e-8, 1e-10), false, &AdaptLimits::default())
                .unwrap();
        let losses: Vec<f64> = states
            .iter()
            .map(|s| {
                let w = reconstruct_w(&w0, &s.s_matrix(), data.features()).unwrap();
                inner_loss(&w, &w0, &data, &cfg).unwrap()
            })
            .collect();
        for pair in losses.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-7);
        }
    }

    #[test]
    fn limits_are_checked_before_integration() {
        let (w0, data) = instance(10, 4, 3, 5);
        let err = adapt(&w0, &data, &LossConfig::default(), Horizon::from_t(150.0), &SolverConfig::default(), true, &AdaptLimits::default())
            .unwrap_err();
        assert!(matches!(err, Error::HorizonTooLong { .. }));
        let tight = AdaptLimits { max_state_values: 10, ..AdaptLimits::default() };
        let err = adapt(&w0, &data, &LossConfig::default(), Horizon::from_t(1.0), &SolverConfig::default(), true, &tight)
            .unwrap_err();
        assert!(matches!(err, Error::MemoryBudgetExceeded { .. }));
    }
}
