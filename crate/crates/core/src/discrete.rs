//! The controlled repeated-measurement Markov chain on the qubit.
//!
//! At step `k → k+1` (time `k/n`, interaction length `h = 1/n`) the chain draws
//! outcome `i` with probability `Tr ℒᵢ(ρ_k)` and moves to `ℒᵢ(ρ_k) / Tr ℒᵢ(ρ_k)`.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::continuous::PoissonField;
use crate::error::{Error, Result};
use crate::model::{ControlBounds, MeasurementSuperops, ModelSpec, ObservableKind, ObservableSpec};
use crate::qcore::{Matrix2, QubitState};
use crate::rng::{substream, Purpose};
use crate::strategy::Strategy;

/// Branches with trace at or below this are never selected.
pub const BRANCH_EPS: f64 = 1e-14;

/// Anything that supplies unnormalized branch operators for one step.
pub trait ChainDynamics: Sync {
    fn bounds(&self) -> ControlBounds;

    /// `(ℒ₀(ρ), ℒ₁(ρ))` for the step leaving time `k/n` with control `u`.
    fn branches(&self, k: usize, n: usize, u: f64, rho: &Matrix2) -> Result<(Matrix2, Matrix2)>;

    fn observable_kind(&self) -> Option<ObservableKind> {
        None
    }
}

/// A model paired with the measured observable.
#[derive(Clone, Copy, Debug)]
pub struct MeasuredModel<'a> {
    pub model: &'a ModelSpec,
    pub obs: &'a ObservableSpec,
}

impl<'a> MeasuredModel<'a> {
    pub fn new(model: &'a ModelSpec, obs: &'a ObservableSpec) -> Self {
        MeasuredModel { model, obs }
    }

    pub fn superops(&self, h: f64, t: f64, u: f64) -> Result<MeasurementSuperops> {
        let (l00, l10) = self.model.kraus_column(h, t, u)?;
        Ok(MeasurementSuperops::new(l00, l10, self.obs))
    }
}

impl ChainDynamics for MeasuredModel<'_> {
    fn bounds(&self) -> ControlBounds {
        self.model.bounds
    }

    #[inline]
    fn branches(&self, k: usize, n: usize, u: f64, rho: &Matrix2) -> Result<(Matrix2, Matrix2)> {
        let h = 1.0 / n as f64;
        Ok(self.superops(h, k as f64 * h, u)?.both(rho))
    }

    fn observable_kind(&self) -> Option<ObservableKind> {
        Some(self.obs.kind)
    }
}

/// Measured eigenvalue index with its probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Outcome {
    pub index: u8,
    /// Probability of the realized branch.
    pub prob: f64,
    /// Probability of outcome 1 (`q`); `1 − q = p`.
    pub q: f64,
}

/// Selects a branch with one uniform draw and normalizes it.
#[inline]
pub(crate) fn select_branch(l0: &Matrix2, l1: &Matrix2, uniform: f64) -> Result<(QubitState, Outcome)> {
    let p = l0.trace().re;
    let q = l1.trace().re;
    let can0 = p > BRANCH_EPS;
    let can1 = q > BRANCH_EPS;
    let index = match (can0, can1) {
        (false, false) => {
            return Err(Error::model(format!("both branch probabilities vanish (p = {p:e}, q = {q:e})")))
        }
        (true, false) => 0,
        (false, true) => 1,
        (true, true) => u8::from(uniform < q),
    };
    let (branch, prob) = if index == 1 { (l1, q) } else { (l0, p) };
    let state = QubitState::normalize(branch)?;
    Ok((state, Outcome { index, prob, q }))
}

/// One measurement step from `rho` at time `t` with control `u` and step `h`.
pub fn measure_step(
    rho: &QubitState,
    t: f64,
    u: f64,
    h: f64,
    model: &ModelSpec,
    obs: &ObservableSpec,
    rng: &mut impl Rng,
) -> Result<(QubitState, Outcome)> {
    let ops = MeasuredModel::new(model, obs).superops(h, t, u)?;
    let (l0, l1) = ops.both(rho.matrix());
    select_branch(&l0, &l1, rng.random::<f64>())
}

/// Which steps of a chain to keep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Recording {
    /// Keep every `every`-th step (the final step is always kept).
    pub every: usize,
}

impl Recording {
    pub const ALL: Recording = Recording { every: 1 };

    pub fn every(k: usize) -> Self {
        Recording { every: k.max(1) }
    }

    pub fn final_only() -> Self {
        Recording { every: usize::MAX }
    }

    fn keeps(&self, step: usize, last: usize) -> bool {
        step == last || step % self.every == 0
    }
}

/// Shared setup of a discrete run.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ChainConfig {
    /// Interactions per unit time.
    pub n: usize,
    pub horizon: f64,
    pub rho0: QubitState,
    pub recording: Recording,
}

impl ChainConfig {
    pub fn new(n: usize, horizon: f64, rho0: QubitState) -> Self {
        ChainConfig { n, horizon, rho0, recording: Recording::ALL }
    }

    pub fn with_recording(mut self, recording: Recording) -> Self {
        self.recording = recording;
        self
    }

    /// `⌊nT⌋`
    pub fn steps(&self) -> usize {
        steps_for(self.n, self.horizon)
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("n must be at least 1"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::config(format!("horizon {} must be positive", self.horizon)));
        }
        Ok(())
    }
}

/// `⌊n·t⌋` robust to `n·t` landing a hair below an integer.
pub fn steps_for(n: usize, t: f64) -> usize {
    let x = n as f64 * t;
    (x + 1e-9 * x.abs().max(1.0)).floor().max(0.0) as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DiscreteRecord {
    pub step: usize,
    pub t: f64,
    pub state: QubitState,
    /// Control applied on the step leaving this state.
    pub u: f64,
    /// Outcome of the measurement that produced this state; `None` at step 0.
    pub outcome: Option<Outcome>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiscreteTrajectory {
    pub n: usize,
    pub horizon: f64,
    pub seed: u64,
    pub sample: u64,
    pub observable: Option<ObservableKind>,
    pub records: Vec<DiscreteRecord>,
    /// Number of outcome-1 events over the whole run, including unrecorded steps.
    pub ones: usize,
}

impl DiscreteTrajectory {
    pub fn final_state(&self) -> &QubitState {
        &self.records.last().expect("trajectory has a final record").state
    }

    /// Recorded state at `step`, if kept.
    pub fn state_at_step(&self, step: usize) -> Option<&QubitState> {
        self.records.iter().find(|r| r.step == step).map(|r| &r.state)
    }
}

/// Simulates one chain with the sample-`sample` substream of `seed`.
pub fn simulate_chain<D: ChainDynamics + ?Sized>(
    dynamics: &D,
    strategy: &Strategy,
    cfg: &ChainConfig,
    seed: u64,
    sample: u64,
) -> Result<DiscreteTrajectory> {
    let mut rng = substream(seed, sample, Purpose::Chain);
    run_chain(dynamics, strategy, cfg, seed, sample, |_, _, l0, l1| {
        let draw = rng.random::<f64>();
        select_branch(l0, l1, draw)
    })
}

/// Core loop shared by the plain and the Poisson-coupled chain. `select` maps
/// `(k, ρ_k, ℒ₀, ℒ₁)` to the next state and outcome.
fn run_chain<D, F>(
    dynamics: &D,
    strategy: &Strategy,
    cfg: &ChainConfig,
    seed: u64,
    sample: u64,
    mut select: F,
) -> Result<DiscreteTrajectory>
where
    D: ChainDynamics + ?Sized,
    F: FnMut(usize, &QubitState, &Matrix2, &Matrix2) -> Result<(QubitState, Outcome)>,
{
    cfg.validate()?;
    let n = cfg.n;
    let steps = cfg.steps();
    let bounds = dynamics.bounds();
    let h = 1.0 / n as f64;
    let mut history = if strategy.is_adapted() { vec![cfg.rho0] } else { Vec::new() };
    let mut records = Vec::with_capacity(steps / cfg.recording.every.max(1) + 2);
    let mut rho = cfg.rho0;
    let mut outcome = None;
    let mut ones = 0;
    for k in 0..=steps {
        let t = k as f64 * h;
        let u = if strategy.is_adapted() {
            strategy.control_with_history(k, t, &history, &bounds)?
        } else {
            strategy.control(t, &rho, &bounds)?
        };
        if cfg.recording.keeps(k, steps) {
            records.push(DiscreteRecord { step: k, t, state: rho, u, outcome });
        }
        if k == steps {
            break;
        }
        let (l0, l1) = dynamics.branches(k, n, u, rho.matrix())?;
        let (next, o) = select(k, &rho, &l0, &l1)?;
        ones += usize::from(o.index);
        rho = next;
        outcome = Some(o);
        if strategy.is_adapted() {
            history.push(rho);
        }
    }
    Ok(DiscreteTrajectory {
        n,
        horizon: cfg.horizon,
        seed,
        sample,
        observable: dynamics.observable_kind(),
        records,
        ones,
    })
}

/// `samples` independent chains, sample `i` on substream `i`. Output order is
/// the sample order regardless of scheduling.
pub fn simulate_chains<D: ChainDynamics + ?Sized>(
    dynamics: &D,
    strategy: &Strategy,
    cfg: &ChainConfig,
    samples: usize,
    seed: u64,
) -> Result<Vec<DiscreteTrajectory>> {
    (0..samples as u64)
        .into_par_iter()
        .map(|i| simulate_chain(dynamics, strategy, cfg, seed, i))
        .collect()
}

/// Normalized increment `X_k` and the rescaled walk `W_n(k/n)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Increment {
    pub step: usize,
    pub x: f64,
    pub w: f64,
}

/// `X_{k+1} = (𝟏₁ − q)/√(qp)` and `W_n(t) = n^{-1/2} Σ_{i ≤ ⌊nt⌋} X_i`.
///
/// Needs a trajectory recorded at every step.
pub fn increments(traj: &DiscreteTrajectory) -> Result<Vec<Increment>> {
    if traj.observable == Some(ObservableKind::Diagonal) {
        return Err(Error::DegenerateObservable(
            "increments need a non-diagonal observable (q stays O(1/n) for a diagonal one)".into(),
        ));
    }
    let scale = 1.0 / (traj.n as f64).sqrt();
    let mut w = 0.0;
    let mut out = Vec::with_capacity(traj.records.len());
    let mut prev_step = 0;
    for rec in traj.records.iter().skip(1) {
        if rec.step != prev_step + 1 {
            return Err(Error::config("increments need every step recorded"));
        }
        prev_step = rec.step;
        let o = rec.outcome.expect("steps after the first carry outcomes");
        let q = o.q;
        let p = 1.0 - q;
        if !(q > 0.0 && p > 0.0) {
            return Err(Error::DegenerateObservable(format!(
                "outcome probabilities (p, q) = ({p}, {q}) at step {}",
                rec.step
            )));
        }
        let x = (f64::from(o.index) - q) / (q * p).sqrt();
        w += scale * x;
        out.push(Increment { step: rec.step, x, w });
    }
    Ok(out)
}

/// `[W_n, W_n]_t = (1/n) Σ_{i ≤ ⌊nt⌋} X_i²`.
pub fn quadratic_variation(incs: &[Increment], n: usize, t: f64) -> f64 {
    let last = steps_for(n, t);
    incs.iter().take_while(|i| i.step <= last).map(|i| i.x * i.x).sum::<f64>() / n as f64
}

/// Height of the region `G_k(η)`: `−n ln Tr ℒ₀(η)`.
pub fn coupling_height(l0: &Matrix2, n: usize) -> Result<f64> {
    let p = l0.trace().re;
    if !(p > 0.0) {
        return Err(Error::model(format!("Tr L0 = {p:e} is not positive")));
    }
    Ok((-(n as f64) * p.ln()).max(0.0))
}

/// Bound on `−n ln Tr ℒ₀` over states, sampled on a `(t,u)` grid with a 1% margin:
/// `Tr ℒ₀(ρ) ≥ λ_min(L₀₀*L₀₀)` for a diagonal observable.
pub fn coupling_field_height(model: &ModelSpec, n: usize, horizon: f64) -> Result<f64> {
    let h = 1.0 / n as f64;
    let mut worst = 0.0f64;
    for (t, u) in crate::model::time_control_grid(horizon, model.bounds, 101) {
        let (l00, _) = model.kraus_column(h, t, u)?;
        let (lmin, _) = (l00.adjoint() * l00).hermitian_eigenvalues();
        if !(lmin > 0.0) {
            return Err(Error::model("L00 is singular; the coupling region is unbounded"));
        }
        worst = worst.max(-(n as f64) * lmin.ln());
    }
    Ok(worst * 1.01)
}

/// The chain realized on the probability space of a Poisson field: step `k`
/// reports outcome 1 iff the field has a point in
/// `[k/n, (k+1)/n) × [0, −n ln Tr ℒ₀(ρ_k)]`.
pub fn coupled_chain(
    model: &ModelSpec,
    obs: &ObservableSpec,
    strategy: &Strategy,
    cfg: &ChainConfig,
    field: &PoissonField,
) -> Result<DiscreteTrajectory> {
    if !obs.is_diagonal() {
        return Err(Error::config("the Poisson coupling needs a diagonal observable"));
    }
    let horizon = cfg.steps() as f64 / cfg.n as f64;
    if field.t0 > 0.0 || field.t1 < horizon - 1e-12 {
        return Err(Error::config(format!(
            "Poisson field covers [{}, {}] but the chain runs on [0, {horizon}]",
            field.t0, field.t1
        )));
    }
    let dynamics = MeasuredModel::new(model, obs);
    let n = cfg.n;
    let mut cursor = 0usize;
    run_chain(&dynamics, strategy, cfg, field.seed, field.sample, |k, _, l0, l1| {
        let height = coupling_height(l0, n)?;
        if height > field.height {
            return Err(Error::config(format!(
                "coupling region height {height} exceeds the Poisson field height {}",
                field.height
            )));
        }
        let lo = k as f64 / n as f64;
        let hi = (k + 1) as f64 / n as f64;
        let points = field.points();
        while cursor < points.len() && points[cursor].0 < lo {
            cursor += 1;
        }
        let mut hit = false;
        let mut i = cursor;
        while i < points.len() && points[i].0 < hi {
            if points[i].1 <= height {
                hit = true;
                break;
            }
            i += 1;
        }
        let q = l1.trace().re;
        let nu = hit && q > BRANCH_EPS;
        // ρ̃ = ℒ₀ + ℒ₁ + (ℒ₁/q − ℒ₀/p)(ν − q) reduces to the normalized branch.
        let (branch, prob, index) = if nu { (l1, q, 1) } else { (l0, l0.trace().re, 0) };
        let state = QubitState::normalize(branch)?;
        Ok((state, Outcome { index, prob, q }))
    })
}

/// Deterministic iteration of the averaged map `ρ ↦ ℒ₀(ρ) + ℒ₁(ρ)` under an
/// open-loop strategy; the chain's mean follows it exactly.
pub fn mean_chain_state<D: ChainDynamics + ?Sized>(
    dynamics: &D,
    strategy: &Strategy,
    cfg: &ChainConfig,
) -> Result<Matrix2> {
    let bounds = dynamics.bounds();
    let mut rho = *cfg.rho0.matrix();
    let h = 1.0 / cfg.n as f64;
    for k in 0..cfg.steps() {
        let u = match &strategy.kind {
            crate::strategy::StrategyKind::Deterministic(f) => bounds.check(f(k as f64 * h))?,
            _ => return Err(Error::config("mean iteration needs an open-loop strategy")),
        };
        let (l0, l1) = dynamics.branches(k, cfg.n, u, &rho)?;
        rho = l0 + l1;
    }
    Ok(rho)
}
