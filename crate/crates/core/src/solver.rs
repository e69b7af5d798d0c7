//! Integration of autonomous ODEs `dy/dt = f(y)` over flat `f64` state.
//!
//! Three schemes are provided: explicit Euler and classic RK4 with a fixed
//! step, and the Dormand–Prince 5(4) embedded pair with adaptive step control.
//! Every right-hand-side evaluation is counted against `max_evals`.

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meter::Buffer;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("integration interval is reversed: t0 = {t0}, t1 = {t1}")]
    ReversedInterval { t0: f64, t1: f64 },
    #[error("evaluation budget of {max_evals} exceeded at t = {t}")]
    BudgetExceeded { max_evals: u64, t: f64 },
    #[error("non-finite state encountered at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("invalid state layout: {0}")]
    Layout(String),
}

/// A named, shaped view onto a contiguous range of a [`FlatState`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        Segment { name: name.into(), shape: shape.to_vec() }
    }

    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered list of segments; offsets are implied by order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    offsets: Vec<usize>,
    total: usize,
}

impl Layout {
    pub fn new(segments: Vec<Segment>) -> Result<Self, SolverError> {
        let mut seen = HashSet::new();
        let mut offsets = Vec::with_capacity(segments.len());
        let mut total = 0;
        for seg in &segments {
            if !seen.insert(seg.name.clone()) {
                return Err(SolverError::Layout(format!("duplicate segment name `{}`", seg.name)));
            }
            offsets.push(total);
            total += seg.size();
        }
        Ok(Layout { segments, offsets, total })
    }

    /// A single unnamed vector segment of length `len`.
    pub fn vector(len: usize) -> Self {
        Layout { segments: vec![Segment::new("y", &[len])], offsets: vec![0], total: len }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let idx = self.segments.iter().position(|s| s.name == name)?;
        let start = self.offsets[idx];
        Some(start..start + self.segments[idx].size())
    }
}

/// Integration state: a flat value vector plus its named layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatState {
    values: Buffer,
    layout: Arc<Layout>,
}

impl FlatState {
    pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self, SolverError> {
        if values.len() != layout.len() {
            return Err(SolverError::Layout(format!(
                "layout expects {} values, got {}",
                layout.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonFiniteState { t: f64::NAN });
        }
        Ok(FlatState { values: Buffer::from_vec(values), layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        FlatState { values: Buffer::zeros(layout.len()), layout }
    }

    pub fn from_slice(values: &[f64]) -> Result<Self, SolverError> {
        Self::new(Arc::new(Layout::vector(values.len())), values.to_vec())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn byte_len(&self) -> usize {
        self.values.byte_len()
    }

    /// Named view; panics if the segment does not exist.
    pub fn view(&self, name: &str) -> &[f64] {
        let range = self.layout.range(name).unwrap_or_else(|| panic!("no segment `{name}`"));
        &self.values[range]
    }

    pub fn view_mut(&mut self, name: &str) -> &mut [f64] {
        let range = self.layout.range(name).unwrap_or_else(|| panic!("no segment `{name}`"));
        &mut self.values[range]
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values.into_vec()
    }

    fn with_values(&self, values: Buffer) -> Self {
        FlatState { values, layout: Arc::clone(&self.layout) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    /// Step length for `euler` and `rk4`.
    #[serde(default = "default_fixed_step")]
    pub fixed_step: f64,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_atol")]
    pub atol: f64,
    #[serde(default = "default_max_evals")]
    pub max_evals: u64,
}

fn default_fixed_step() -> f64 {
    0.01
}
fn default_rtol() -> f64 {
    1e-6
}
fn default_atol() -> f64 {
    1e-8
}
fn default_max_evals() -> u64 {
    10_000_000
}

impl SolverConfig {
    pub fn euler(step: f64) -> Self {
        SolverConfig { method: Method::Euler, fixed_step: step, ..Self::default() }
    }

    pub fn rk4(step: f64) -> Self {
        SolverConfig { method: Method::Rk4, fixed_step: step, ..Self::default() }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        SolverConfig { method: Method::Dopri5, rtol, atol, ..Self::default() }
    }

    pub fn with_max_evals(mut self, max_evals: u64) -> Self {
        self.max_evals = max_evals;
        self
    }

    /// Tolerances used for the high-accuracy gradient checks.
    pub fn precise() -> Self {
        Self::dopri5(1e-10, 1e-12)
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if self.max_evals == 0 {
            return Err(SolverError::InvalidConfig("max_evals must be at least 1".into()));
        }
        match self.method {
            Method::Euler | Method::Rk4 => {
                if !(self.fixed_step > 0.0 && self.fixed_step.is_finite()) {
                    return Err(SolverError::InvalidConfig(format!(
                        "fixed_step must be positive, got {}",
                        self.fixed_step
                    )));
                }
            }
            Method::Dopri5 => {
                if !(self.rtol > 0.0 && self.atol > 0.0) {
                    return Err(SolverError::InvalidConfig(format!(
                        "rtol and atol must be positive, got {} and {}",
                        self.rtol, self.atol
                    )));
                }
            }
        }
        Ok(())
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::Dopri5,
            fixed_step: default_fixed_step(),
            rtol: default_rtol(),
            atol: default_atol(),
            max_evals: default_max_evals(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    pub rhs_evals: u64,
    pub accepted_steps: u64,
    pub rejected_steps: u64,
}

impl StepStats {
    pub fn merge(&mut self, other: StepStats) {
        self.rhs_evals += other.rhs_evals;
        self.accepted_steps += other.accepted_steps;
        self.rejected_steps += other.rejected_steps;
    }
}

/// Counts evaluations and rejects non-finite derivatives.
struct Counted<'a, F> {
    rhs: &'a F,
    stats: StepStats,
    max_evals: u64,
}

impl<F: Fn(&[f64], &mut [f64])> Counted<'_, F> {
    fn eval(&mut self, t: f64, y: &[f64], out: &mut [f64]) -> Result<(), SolverError> {
        if self.stats.rhs_evals >= self.max_evals {
            return Err(SolverError::BudgetExceeded { max_evals: self.max_evals, t });
        }
        self.stats.rhs_evals += 1;
        (self.rhs)(y, out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonFiniteState { t });
        }
        Ok(())
    }
}

fn check_finite(y: &[f64], t: f64) -> Result<(), SolverError> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SolverError::NonFiniteState { t })
    }
}

/// Integrates `dy/dt = rhs(y)` from `t0` to `t1` and returns the final state.
pub fn integrate<F>(
    rhs: F,
    y0: &FlatState,
    t0: f64,
    t1: f64,
    config: &SolverConfig,
) -> Result<(FlatState, StepStats), SolverError>
where
    F: Fn(&[f64], &mut [f64]),
{
    config.validate()?;
    if !(t1 >= t0) {
        return Err(SolverError::ReversedInterval { t0, t1 });
    }
    check_finite(y0.values(), t0)?;
    let mut counted = Counted { rhs: &rhs, stats: StepStats::default(), max_evals: config.max_evals };
    let mut y = y0.values.clone();
    match config.method {
        Method::Euler | Method::Rk4 => fixed_step(&mut counted, &mut y, t0, t1, config)?,
        Method::Dopri5 => dopri5(&mut counted, &mut y, t0, t1, config)?,
    }
    Ok((y0.with_values(y), counted.stats))
}

/// Integrates through each time in `times` (ascending, starting at the initial
/// time) and returns the state at every one of them, including the first.
pub fn integrate_checkpoints<F>(
    rhs: F,
    y0: &FlatState,
    times: &[f64],
    config: &SolverConfig,
) -> Result<(Vec<FlatState>, StepStats), SolverError>
where
    F: Fn(&[f64], &mut [f64]),
{
    let mut out = Vec::with_capacity(times.len());
    let mut stats = StepStats::default();
    let Some(&first) = times.first() else {
        return Ok((out, stats));
    };
    out.push(y0.clone());
    let mut t_prev = first;
    for &t in &times[1..] {
        let (next, s) = integrate(&rhs, out.last().expect("non-empty"), t_prev, t, config)?;
        stats.merge(s);
        out.push(next);
        t_prev = t;
    }
    Ok((out, stats))
}

/// Number of fixed steps for a span, and whether they are all of equal length.
///
/// A span within 1e-9 (relative) of an integer multiple of the step is taken
/// as exactly that many full steps; otherwise the final step is shortened.
pub fn fixed_step_count(span: f64, step: f64) -> (u64, bool) {
    if span <= 0.0 {
        return (0, true);
    }
    let ratio = span / step;
    let nearest = ratio.round();
    if nearest >= 1.0 && (ratio - nearest).abs() <= 1e-9 * nearest {
        (nearest as u64, true)
    } else {
        (ratio.ceil() as u64, false)
    }
}

fn fixed_step<F: Fn(&[f64], &mut [f64])>(
    counted: &mut Counted<'_, F>,
    y: &mut [f64],
    t0: f64,
    t1: f64,
    config: &SolverConfig,
) -> Result<(), SolverError> {
    let n = y.len();
    let (steps, uniform) = fixed_step_count(t1 - t0, config.fixed_step);
    let mut k1 = Buffer::zeros(n);
    let (mut k2, mut k3, mut k4, mut tmp) = if config.method == Method::Rk4 {
        (Buffer::zeros(n), Buffer::zeros(n), Buffer::zeros(n), Buffer::zeros(n))
    } else {
        (Buffer::zeros(0), Buffer::zeros(0), Buffer::zeros(0), Buffer::zeros(0))
    };
    let mut t = t0;
    for step in 0..steps {
        let h = if uniform || step + 1 < steps { config.fixed_step } else { t1 - t };
        match config.method {
            Method::Euler => {
                counted.eval(t, y, &mut k1)?;
                for (yi, ki) in y.iter_mut().zip(k1.iter()) {
                    *yi += h * ki;
                }
            }
            Method::Rk4 => {
                counted.eval(t, y, &mut k1)?;
                axpy_into(&mut tmp, y, 0.5 * h, &k1);
                counted.eval(t + 0.5 * h, &tmp, &mut k2)?;
                axpy_into(&mut tmp, y, 0.5 * h, &k2);
                counted.eval(t + 0.5 * h, &tmp, &mut k3)?;
                axpy_into(&mut tmp, y, h, &k3);
                counted.eval(t + h, &tmp, &mut k4)?;
                for i in 0..n {
                    y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
            Method::Dopri5 => unreachable!("adaptive method routed elsewhere"),
        }
        t = if step + 1 == steps { t1 } else { t + h };
        check_finite(y, t)?;
        counted.stats.accepted_steps += 1;
    }
    Ok(())
}

fn axpy_into(out: &mut [f64], y: &[f64], a: f64, k: &[f64]) {
    for ((o, yi), ki) in out.iter_mut().zip(y).zip(k) {
        *o = yi + a * ki;
    }
}

// Dormand–Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

fn dopri5<F: Fn(&[f64], &mut [f64])>(
    counted: &mut Counted<'_, F>,
    y: &mut [f64],
    t0: f64,
    t1: f64,
    config: &SolverConfig,
) -> Result<(), SolverError> {
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(());
    }
    let n = y.len();
    let mut k: Vec<Buffer> = (0..7).map(|_| Buffer::zeros(n)).collect();
    let mut stage = Buffer::zeros(n);
    let mut y_new = Buffer::zeros(n);

    let mut h = (span / 100.0).max(1e-8).min(span);
    let mut t = t0;
    let (first, _) = k.split_at_mut(1);
    counted.eval(t, y, &mut first[0])?;

    while t < t1 {
        let last = h >= t1 - t;
        if last {
            h = t1 - t;
        }
        // Stages 2..7; k[0] holds f(y) from the previous accepted step.
        for i in 0..n {
            stage[i] = y[i] + h * A21 * k[0][i];
        }
        eval_stage(counted, t, &stage, &mut k, 1)?;
        for i in 0..n {
            stage[i] = y[i] + h * (A31 * k[0][i] + A32 * k[1][i]);
        }
        eval_stage(counted, t, &stage, &mut k, 2)?;
        for i in 0..n {
            stage[i] = y[i] + h * (A41 * k[0][i] + A42 * k[1][i] + A43 * k[2][i]);
        }
        eval_stage(counted, t, &stage, &mut k, 3)?;
        for i in 0..n {
            stage[i] = y[i] + h * (A51 * k[0][i] + A52 * k[1][i] + A53 * k[2][i] + A54 * k[3][i]);
        }
        eval_stage(counted, t, &stage, &mut k, 4)?;
        for i in 0..n {
            stage[i] = y[i]
                + h * (A61 * k[0][i] + A62 * k[1][i] + A63 * k[2][i] + A64 * k[3][i] + A65 * k[4][i]);
        }
        eval_stage(counted, t, &stage, &mut k, 5)?;
        for i in 0..n {
            y_new[i] = y[i]
                + h * (B1 * k[0][i] + B3 * k[2][i] + B4 * k[3][i] + B5 * k[4][i] + B6 * k[5][i]);
        }
        eval_stage(counted, t, &y_new, &mut k, 6)?;

        let mut acc = 0.0;
        for i in 0..n {
            let e = h
                * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i]
                    + E7 * k[6][i]);
            let scale = config.atol + config.rtol * y[i].abs().max(y_new[i].abs());
            acc += (e / scale).powi(2);
        }
        let err = if n == 0 { 0.0 } else { (acc / n as f64).sqrt() };
        if !err.is_finite() {
            return Err(SolverError::NonFiniteState { t });
        }
        let factor = if err == 0.0 {
            MAX_FACTOR
        } else {
            (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
        };

        if err <= 1.0 {
            y.copy_from_slice(&y_new);
            t = if last { t1 } else { t + h };
            counted.stats.accepted_steps += 1;
            k.swap(0, 6);
            h *= factor;
        } else {
            counted.stats.rejected_steps += 1;
            h *= factor;
            if h < f64::EPSILON * t.abs().max(1.0) {
                return Err(SolverError::InvalidConfig(format!(
                    "step size underflow at t = {t}; tolerances too strict"
                )));
            }
        }
    }
    Ok(())
}

fn eval_stage<F: Fn(&[f64], &mut [f64])>(
    counted: &mut Counted<'_, F>,
    t: f64,
    stage: &[f64],
    k: &mut [Buffer],
    idx: usize,
) -> Result<(), SolverError> {
    check_finite(stage, t)?;
    counted.eval(t, stage, &mut k[idx])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(y: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(y) {
            *o = -v;
        }
    }

    #[test]
    fn zero_field_leaves_state_unchanged() {
        let y0 = FlatState::from_slice(&[1.5, -2.0, 3.25]).unwrap();
        for cfg in [SolverConfig::euler(0.1), SolverConfig::rk4(0.5), SolverConfig::dopri5(1e-6, 1e-8)] {
            let (y, stats) = integrate(|_, out: &mut [f64]| out.fill(0.0), &y0, 0.0, 7.0, &cfg).unwrap();
            assert_eq!(y.values(), y0.values());
            assert!(stats.accepted_steps >= 1);
        }
    }

    #[test]
    fn dopri5_exponential_decay() {
        let y0 = FlatState::from_slice(&[1.0]).unwrap();
        let (y, stats) = integrate(decay, &y0, 0.0, 1.0, &SolverConfig::dopri5(1e-8, 1e-10)).unwrap();
        assert!((y.values()[0] - (-1.0f64).exp()).abs() < 1e-6);
        assert!(stats.rhs_evals >= stats.accepted_steps);
    }

    #[test]
    fn euler_matches_recurrence() {
        let y0 = FlatState::from_slice(&[1.0]).unwrap();
        let (y, stats) = integrate(decay, &y0, 0.0, 0.1, &SolverConfig::euler(0.01)).unwrap();
        assert!((y.values()[0] - 0.99f64.powi(10)).abs() < 1e-12);
        assert_eq!(stats.accepted_steps, 10);
        assert_eq!(stats.rhs_evals, 10);
        assert_eq!(stats.rejected_steps, 0);
    }

    #[test]
    fn fixed_step_shortens_final_step() {
        assert_eq!(fixed_step_count(0.25, 0.1), (3, false));
        assert_eq!(fixed_step_count(0.1, 0.01), (10, true));
        let y0 = FlatState::from_slice(&[1.0]).unwrap();
        let (y, _) = integrate(|_, out: &mut [f64]| out[0] = 1.0, &y0, 0.0, 0.25, &SolverConfig::euler(0.1))
            .unwrap();
        assert!((y.values()[0] - 1.25).abs() < 1e-15);
    }

    #[test]
    fn budget_is_enforced() {
        let y0 = FlatState::from_slice(&[1.0]).unwrap();
        let cfg = SolverConfig::euler(0.01).with_max_evals(5);
        let err = integrate(decay, &y0, 0.0, 1.0, &cfg).unwrap_err();
        assert!(matches!(err, SolverError::BudgetExceeded { max_evals: 5, .. }));
    }

    #[test]
    fn non_finite_derivative_is_reported() {
        let y0 = FlatState::from_slice(&[1.0]).unwrap();
        let err = integrate(|_, out: &mut [f64]| out[0] = f64::NAN, &y0, 0.0, 1.0, &SolverConfig::rk4(0.1))
            .unwrap_err();
        assert!(matches!(err, SolverError::NonFiniteState { .. }));
    }

    #[test]
    fn reversed_interval_is_rejected() {
        let y0 = FlatState::from_slice(&[1.0]).unwrap();
        assert!(matches!(
            integrate(decay, &y0, 1.0, 0.0, &SolverConfig::default()),
            Err(SolverError::ReversedInterval { .. })
        ));
    }

    #[test]
    fn layout_rejects_duplicates_and_views_segments() {
        assert!(Layout::new(vec![Segment::new("a", &[2]), Segment::new("a", &[3])]).is_err());
        let layout = Arc::new(Layout::new(vec![Segment::new("a", &[2]), Segment::new("b", &[2, 3])]).unwrap());
        let mut st = FlatState::zeros(layout);
        st.view_mut("b")[5] = 4.0;
        assert_eq!(st.len(), 8);
        assert_eq!(st.values()[7], 4.0);
        assert_eq!(st.view("a"), &[0.0, 0.0]);
    }
}
