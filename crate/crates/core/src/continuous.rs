//! Integrators for the two controlled stochastic Schrödinger equations.
//!
//! * diffusive: explicit Euler–Maruyama on `dρ = L dt + Θ dW`, with trace
//!   renormalization and PSD repair after every step;
//! * jump: exact thinning of a homogeneous Poisson field of height `K` over
//!   the state-dependent intensity `Tr J`, with RK4 on `dρ = R dt` between
//!   candidate times and `ρ ← J/Tr J` at accepted ones.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{time_control_grid, ControlBounds, ModelSpec};
use crate::qcore::{check_state, psd_repair, Matrix2, QubitState};
use crate::rng::{substream, Purpose};
use crate::strategy::{Strategy, StrategyKind};

/// Largest admissible diffusive step.
pub const MAX_DIFFUSIVE_DT: f64 = 1e-2;
/// Default RK4 step between candidate jump times.
pub const DEFAULT_ODE_DT: f64 = 1e-4;
/// Repair tolerance per unit of step size; Euler steps from pure states leave
/// the ball by `O(dt)`.
pub const REPAIR_TOL_PER_DT: f64 = 100.0;
const MAX_REPAIR_TOL: f64 = 0.25;
/// Largest accepted intensity bound.
pub const MAX_INTENSITY: f64 = 1e6;
/// Largest accepted Poisson-field area.
pub const MAX_FIELD_AREA: f64 = 1e7;

/// Default repair tolerance for step `dt`.
pub fn repair_tolerance(dt: f64) -> f64 {
    (REPAIR_TOL_PER_DT * dt).clamp(crate::qcore::POSITIVITY_TOL, MAX_REPAIR_TOL)
}

/// Homogeneous Poisson point process on `[t0, t1] × [0, height]`.
#[derive(Clone, Debug, Serialize)]
pub struct PoissonField {
    pub t0: f64,
    pub t1: f64,
    pub height: f64,
    pub seed: u64,
    pub sample: u64,
    points: Vec<(f64, f64)>,
}

impl PoissonField {
    /// Points `(tᵢ, ξᵢ)` sorted by time.
    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn area(&self) -> f64 {
        (self.t1 - self.t0) * self.height
    }

    pub fn count_in(&self, t_lo: f64, t_hi: f64, mark_hi: f64) -> usize {
        self.points.iter().filter(|(t, x)| *t >= t_lo && *t < t_hi && *x <= mark_hi).count()
    }
}

/// Samples the field for sample `sample` of `seed`: a `Poisson(area)` count of
/// i.i.d. uniform points, sorted by time.
pub fn sample_poisson_field(t0: f64, t1: f64, height: f64, seed: u64, sample: u64) -> Result<PoissonField> {
    if !(t1 >= t0 && height >= 0.0 && t0.is_finite() && t1.is_finite() && height.is_finite()) {
        return Err(Error::config(format!("invalid field rectangle [{t0}, {t1}] x [0, {height}]")));
    }
    let area = (t1 - t0) * height;
    if area >= MAX_FIELD_AREA {
        return Err(Error::config(format!("Poisson field area {area} too large")));
    }
    let mut rng = substream(seed, sample, Purpose::PoissonField);
    let count = if area > 0.0 {
        Poisson::new(area).map_err(|e| Error::config(e.to_string()))?.sample(&mut rng) as usize
    } else {
        0
    };
    let mut points: Vec<(f64, f64)> = (0..count)
        .map(|_| (t0 + (t1 - t0) * rng.random::<f64>(), height * rng.random::<f64>()))
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(PoissonField { t0, t1, height, seed, sample, points })
}

/// Drift, jump operator and intensity bound of a jump equation.
pub trait JumpDynamics: Sync {
    fn bounds(&self) -> ControlBounds;
    /// `R(t, u, ρ)`
    fn drift(&self, t: f64, u: f64, rho: &Matrix2) -> Matrix2;
    /// Unnormalized post-jump operator `J(t, u, ρ)`; `Tr J` is the intensity.
    fn jump(&self, t: f64, u: f64, rho: &Matrix2) -> Matrix2;
    /// `K ≥ Tr J(t, u, ρ)` for every state on `[0, horizon]`.
    fn intensity_bound(&self, horizon: f64) -> Result<f64>;
}

impl JumpDynamics for ModelSpec {
    fn bounds(&self) -> ControlBounds {
        self.bounds
    }

    #[inline]
    fn drift(&self, t: f64, u: f64, rho: &Matrix2) -> Matrix2 {
        self.superop_r(t, u, rho)
    }

    #[inline]
    fn jump(&self, t: f64, u: f64, rho: &Matrix2) -> Matrix2 {
        self.superop_j(t, u, rho)
    }

    fn intensity_bound(&self, horizon: f64) -> Result<f64> {
        intensity_bound(self, horizon)
    }
}

/// `1.01 · max λ_max(C*C)` over a 101×101 grid of `[0, horizon] × bounds`.
pub fn intensity_bound(model: &ModelSpec, horizon: f64) -> Result<f64> {
    let k = grid_max(horizon, model.bounds, |t, u| {
        let c = model.c(t, u);
        (c.adjoint() * c).hermitian_eigenvalues().1
    });
    finish_bound(k)
}

pub(crate) fn grid_max(horizon: f64, bounds: ControlBounds, f: impl Fn(f64, f64) -> f64) -> f64 {
    time_control_grid(horizon, bounds, 101)
        .into_iter()
        .map(|(t, u)| f(t, u))
        .fold(0.0, |a, b| if b.is_nan() { f64::NAN } else { a.max(b) })
}

pub(crate) fn finish_bound(k: f64) -> Result<f64> {
    if !k.is_finite() || k > MAX_INTENSITY {
        return Err(Error::config(format!("intensity bound {k} is unbounded or too large")));
    }
    Ok(1.01 * k.max(0.0))
}

/// State snapshot along a continuous path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PathRecord {
    pub step: usize,
    pub t: f64,
    pub state: QubitState,
    pub u: f64,
    /// Driving signal at `t`: `W_t` for diffusive paths, `N̄_t` for jump paths.
    pub signal: f64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct IntegratorConfig {
    /// Euler step (diffusive) or RK4 step (jump).
    pub dt: f64,
    pub horizon: f64,
    pub rho0: QubitState,
    /// Keep every `record_every`-th grid step; the final step is always kept.
    pub record_every: usize,
    /// PSD-repair tolerance; `None` uses [`repair_tolerance`].
    pub repair_tol: Option<f64>,
}

impl IntegratorConfig {
    pub fn new(dt: f64, horizon: f64, rho0: QubitState) -> Self {
        IntegratorConfig { dt, horizon, rho0, record_every: 1, repair_tol: None }
    }

    pub fn with_record_every(mut self, k: usize) -> Self {
        self.record_every = k.max(1);
        self
    }

    /// Number of grid steps; the effective step is `horizon / steps`.
    pub fn steps(&self) -> usize {
        let x = self.horizon / self.dt;
        ((x - 1e-9 * x.max(1.0)).ceil().max(1.0)) as usize
    }

    pub fn effective_dt(&self) -> f64 {
        self.horizon / self.steps() as f64
    }

    fn tol(&self) -> f64 {
        self.repair_tol.unwrap_or_else(|| repair_tolerance(self.dt))
    }

    fn keeps(&self, step: usize, last: usize) -> bool {
        step == last || step % self.record_every == 0
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.horizon > 0.0 && self.dt.is_finite() && self.horizon.is_finite()) {
            return Err(Error::config(format!("need dt > 0 and horizon > 0 (got {}, {})", self.dt, self.horizon)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DiffusivePath {
    pub seed: u64,
    pub sample: u64,
    pub dt: f64,
    pub records: Vec<PathRecord>,
    /// Steps where PSD repair changed the state.
    pub repairs: usize,
    /// Largest `|Tr ρ − 1|` before renormalization.
    pub max_trace_drift: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub t: f64,
    pub mark: f64,
    /// `Tr J` at the left limit.
    pub rate: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct JumpPath {
    pub seed: u64,
    pub sample: u64,
    pub dt: f64,
    pub bound: f64,
    pub records: Vec<PathRecord>,
    pub candidates: Vec<Candidate>,
    pub jump_times: Vec<f64>,
    /// `∫ Tr J ds` over each inter-jump interval ending at an accepted jump.
    pub compensator_gaps: Vec<f64>,
    /// States right after each accepted jump.
    pub post_jump_states: Vec<QubitState>,
    pub repairs: usize,
    /// Largest `|Tr ρ − 1|` before renormalization, per unit time.
    pub max_trace_drift_rate: f64,
}

impl JumpPath {
    pub fn jump_count(&self) -> usize {
        self.jump_times.len()
    }

    pub fn final_state(&self) -> &QubitState {
        &self.records.last().expect("path has a final record").state
    }
}

impl DiffusivePath {
    pub fn final_state(&self) -> &QubitState {
        &self.records.last().expect("path has a final record").state
    }
}

#[inline]
fn open_or_feedback(strategy: &Strategy, t: f64, rho: &Matrix2, bounds: &ControlBounds) -> Result<f64> {
    match &strategy.kind {
        StrategyKind::Deterministic(f) => bounds.check(f(t)),
        StrategyKind::Markovian(f) => bounds.check(f(t, &QubitState::new_unchecked(*rho))),
        StrategyKind::Adapted(_) => Err(Error::config(format!(
            "history-dependent strategy '{}' cannot drive a continuous integrator",
            strategy.label
        ))),
    }
}

/// Renormalizes the trace and repairs; returns the state, the pre-normalization
/// trace drift and whether repair changed anything.
#[inline]
fn settle(raw: &Matrix2, tol: f64, dt: f64) -> Result<(QubitState, f64, bool)> {
    let tr = raw.trace().re;
    let drift = (tr - 1.0).abs();
    if !(tr > 0.0) {
        return Err(Error::drift(format!("trace collapsed to {tr}; reduce the step size")));
    }
    let m = raw.scale(1.0 / tr);
    if check_state(&m).is_ok() {
        return Ok((QubitState::new_unchecked(m), drift, false));
    }
    let fixed = psd_repair(&m, tol)
        .map_err(|e| Error::drift(format!("{e} (step {dt:e}); reduce the step size")))?;
    Ok((fixed, drift, true))
}

/// Euler–Maruyama path of `dρ = L(t,u,ρ)dt + Θ(t,u,ρ)dW`.
pub fn integrate_diffusive(
    model: &ModelSpec,
    strategy: &Strategy,
    cfg: &IntegratorConfig,
    seed: u64,
    sample: u64,
) -> Result<DiffusivePath> {
    cfg.validate()?;
    if cfg.dt > MAX_DIFFUSIVE_DT {
        return Err(Error::config(format!("diffusive dt {} exceeds {MAX_DIFFUSIVE_DT}", cfg.dt)));
    }
    let steps = cfg.steps();
    let dt = cfg.effective_dt();
    let sdt = dt.sqrt();
    let tol = cfg.tol();
    let bounds = model.bounds;
    let mut rng = substream(seed, sample, Purpose::Noise);
    let mut rho = cfg.rho0;
    let mut w = 0.0;
    let mut repairs = 0;
    let mut max_drift = 0.0f64;
    let mut records = Vec::with_capacity(steps / cfg.record_every + 2);
    for k in 0..=steps {
        let t = k as f64 * dt;
        let u = open_or_feedback(strategy, t, rho.matrix(), &bounds)?;
        if cfg.keeps(k, steps) {
            records.push(PathRecord { step: k, t, state: rho, u, signal: w });
        }
        if k == steps {
            break;
        }
        let dw: f64 = sdt * rng.sample::<f64, _>(StandardNormal);
        let m = rho.matrix();
        let raw = *m + model.superop_l(t, u, m).scale(dt) + model.superop_theta(t, u, m).scale(dw);
        let (next, drift, repaired) = settle(&raw, tol, dt)?;
        max_drift = max_drift.max(drift);
        repairs += usize::from(repaired);
        rho = next;
        w += dw;
    }
    Ok(DiffusivePath { seed, sample, dt, records, repairs, max_trace_drift: max_drift })
}

pub fn integrate_diffusive_ensemble(
    model: &ModelSpec,
    strategy: &Strategy,
    cfg: &IntegratorConfig,
    samples: usize,
    seed: u64,
) -> Result<Vec<DiffusivePath>> {
    (0..samples as u64)
        .into_par_iter()
        .map(|i| integrate_diffusive(model, strategy, cfg, seed, i))
        .collect()
}

/// One RK4 step of the drift, carrying `Λ = ∫ Tr J` along.
#[inline]
fn rk4_step<D: JumpDynamics + ?Sized>(
    dynamics: &D,
    strategy: &Strategy,
    t: f64,
    h: f64,
    rho: &Matrix2,
) -> Result<(Matrix2, f64)> {
    let bounds = dynamics.bounds();
    let f = |s: f64, r: &Matrix2| -> Result<(Matrix2, f64)> {
        let u = open_or_feedback(strategy, s, r, &bounds)?;
        Ok((dynamics.drift(s, u, r), dynamics.jump(s, u, r).trace().re))
    };
    let (k1, g1) = f(t, rho)?;
    let (k2, g2) = f(t + 0.5 * h, &(*rho + k1.scale(0.5 * h)))?;
    let (k3, g3) = f(t + 0.5 * h, &(*rho + k2.scale(0.5 * h)))?;
    let (k4, g4) = f(t + h, &(*rho + k3.scale(h)))?;
    let next = *rho + (k1 + k2.scale(2.0) + k3.scale(2.0) + k4).scale(h / 6.0);
    Ok((next, h / 6.0 * (g1 + 2.0 * g2 + 2.0 * g3 + g4)))
}

/// Thinning integrator for the jump equation.
///
/// Samples a Poisson field of height `K = intensity_bound`; between candidate
/// times the state follows `dρ = R dt` (RK4, step `cfg.dt`); at a candidate
/// `(tᵢ, ξᵢ)` the jump is accepted iff `ξᵢ < Tr J(tᵢ−, u, ρ(tᵢ−))`.
pub fn integrate_jump<D: JumpDynamics + ?Sized>(
    dynamics: &D,
    strategy: &Strategy,
    cfg: &IntegratorConfig,
    seed: u64,
    sample: u64,
) -> Result<JumpPath> {
    cfg.validate()?;
    let bound = dynamics.intensity_bound(cfg.horizon)?;
    let field = sample_poisson_field(0.0, cfg.horizon, bound, seed, sample)?;
    integrate_jump_on_field(dynamics, strategy, cfg, &field)
}

/// [`integrate_jump`] on a given field; the field height is the thinning bound.
pub fn integrate_jump_on_field<D: JumpDynamics + ?Sized>(
    dynamics: &D,
    strategy: &Strategy,
    cfg: &IntegratorConfig,
    field: &PoissonField,
) -> Result<JumpPath> {
    cfg.validate()?;
    let steps = cfg.steps();
    let dt = cfg.effective_dt();
    let tol = cfg.tol();
    let bounds = dynamics.bounds();
    let mut rho = cfg.rho0;
    let mut t = 0.0;
    let mut lambda = 0.0;
    let mut lambda_at_last_jump = 0.0;
    let mut repairs = 0;
    let mut max_drift_rate = 0.0f64;
    let mut candidates = Vec::new();
    let mut jump_times = Vec::new();
    let mut gaps = Vec::new();
    let mut post_jump = Vec::new();
    let mut records = Vec::with_capacity(steps / cfg.record_every + 2);
    let mut next_point = 0usize;
    let points = field.points();

    let record = |records: &mut Vec<PathRecord>, k: usize, t: f64, rho: &QubitState, n: usize| -> Result<()> {
        let u = open_or_feedback(strategy, t, rho.matrix(), &bounds)?;
        records.push(PathRecord { step: k, t, state: *rho, u, signal: n as f64 });
        Ok(())
    };
    record(&mut records, 0, 0.0, &rho, 0)?;

    for k in 1..=steps {
        let t_grid = k as f64 * dt;
        // Advance through candidates inside (t, t_grid], then to t_grid.
        loop {
            let target = match points.get(next_point) {
                Some(&(tc, _)) if tc <= t_grid => tc,
                _ => t_grid,
            };
            let h = target - t;
            if h > 0.0 {
                let (raw, dl) = rk4_step(dynamics, strategy, t, h, rho.matrix())?;
                let (next, drift, repaired) = settle(&raw, tol, h)?;
                max_drift_rate = max_drift_rate.max(drift / h);
                repairs += usize::from(repaired);
                rho = next;
                lambda += dl;
                t = target;
            }
            if target < t_grid || points.get(next_point).is_some_and(|&(tc, _)| tc == t_grid) {
                let (tc, mark) = points[next_point];
                next_point += 1;
                let u = open_or_feedback(strategy, tc, rho.matrix(), &bounds)?;
                let j = dynamics.jump(tc, u, rho.matrix());
                let rate = j.trace().re;
                let accepted = mark < rate && rate > crate::model::JUMP_RATE_EPS;
                candidates.push(Candidate { t: tc, mark, rate, accepted });
                if accepted {
                    rho = QubitState::normalize(&j)?;
                    jump_times.push(tc);
                    gaps.push(lambda - lambda_at_last_jump);
                    lambda_at_last_jump = lambda;
                    post_jump.push(rho);
                }
                if target < t_grid {
                    continue;
                }
            }
            break;
        }
        t = t_grid;
        if cfg.keeps(k, steps) {
            record(&mut records, k, t, &rho, jump_times.len())?;
        }
    }
    Ok(JumpPath {
        seed: field.seed,
        sample: field.sample,
        dt,
        bound: field.height,
        records,
        candidates,
        jump_times,
        compensator_gaps: gaps,
        post_jump_states: post_jump,
        repairs,
        max_trace_drift_rate: max_drift_rate,
    })
}

pub fn integrate_jump_ensemble<D: JumpDynamics + ?Sized>(
    dynamics: &D,
    strategy: &Strategy,
    cfg: &IntegratorConfig,
    samples: usize,
    seed: u64,
) -> Result<Vec<JumpPath>> {
    (0..samples as u64)
        .into_par_iter()
        .map(|i| integrate_jump(dynamics, strategy, cfg, seed, i))
        .collect()
}

/// RK4 solution of the master equation `dη = L(t, u(t), η) dt` under an
/// open-loop strategy.
pub fn solve_master_equation(
    model: &ModelSpec,
    strategy: &Strategy,
    rho0: &Matrix2,
    dt: f64,
    horizon: f64,
) -> Result<Matrix2> {
    let cfg = IntegratorConfig::new(dt, horizon, QubitState::maximally_mixed());
    let steps = cfg.steps();
    let h = cfg.effective_dt();
    let bounds = model.bounds;
    let u_at = |t: f64| -> Result<f64> {
        match &strategy.kind {
            StrategyKind::Deterministic(f) => bounds.check(f(t)),
            _ => Err(Error::config("the master equation needs an open-loop strategy")),
        }
    };
    let f = |t: f64, r: &Matrix2| -> Result<Matrix2> { Ok(model.superop_l(t, u_at(t)?, r)) };
    let mut eta = *rho0;
    for k in 0..steps {
        let t = k as f64 * h;
        let k1 = f(t, &eta)?;
        let k2 = f(t + 0.5 * h, &(eta + k1.scale(0.5 * h)))?;
        let k3 = f(t + 0.5 * h, &(eta + k2.scale(0.5 * h)))?;
        let k4 = f(t + h, &(eta + k3.scale(h)))?;
        eta = eta + (k1 + k2.scale(2.0) + k3.scale(2.0) + k4).scale(h / 6.0);
    }
    Ok(eta)
}
