//! Finite-horizon optimal control of the measurement chain.
//!
//! The value recursion is
//! `V^k(ρ) = min_u { p V^{k+1}(ℒ₀ρ/p) + q V^{k+1}(ℒ₁ρ/q) + c(k, ρ, u) }`,
//! `V^N = φ`. It is solved three ways: on a Cartesian Bloch-ball grid with
//! trilinear interpolation, exactly on the reachable outcome tree of one
//! initial state, and by enumerating every feedback strategy on that tree.
//! The continuous-time side is covered by the generator of the diffusive
//! equation and a Monte Carlo martingale check.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::continuous::{integrate_diffusive, IntegratorConfig};
use crate::discrete::{simulate_chain, ChainConfig, MeasuredModel, BRANCH_EPS};
use crate::error::{Error, Result};
use crate::model::{MeasurementSuperops, ModelSpec, ObservableSpec};
use crate::qcore::{from_bloch, BlochVector, Matrix2, QubitState};
use crate::strategy::Strategy;

/// Controls whose values differ by at most this are tied; ties go to the
/// smaller control.
pub const TIE_TOL: f64 = 1e-12;
/// Largest strategy count `brute_force_tree` will enumerate.
pub const BRUTE_FORCE_LIMIT: f64 = 1e6;
/// Central finite-difference step for derivative-free test functions.
pub const FD_STEP: f64 = 1e-5;

type RunningFn = dyn Fn(usize, &BlochVector, f64) -> f64 + Send + Sync;
type TerminalFn = dyn Fn(&BlochVector) -> f64 + Send + Sync;

/// Running cost `c(k, v, u)` and terminal cost `φ(v)` on Bloch vectors.
#[derive(Clone)]
pub struct CostSpec {
    pub running: Arc<RunningFn>,
    pub terminal: Arc<TerminalFn>,
    pub label: String,
}

impl CostSpec {
    pub fn new(
        label: impl Into<String>,
        running: impl Fn(usize, &BlochVector, f64) -> f64 + Send + Sync + 'static,
        terminal: impl Fn(&BlochVector) -> f64 + Send + Sync + 'static,
    ) -> Self {
        CostSpec { running: Arc::new(running), terminal: Arc::new(terminal), label: label.into() }
    }

    #[inline]
    pub fn c(&self, k: usize, v: &BlochVector, u: f64) -> f64 {
        (self.running)(k, v, u)
    }

    #[inline]
    pub fn phi(&self, v: &BlochVector) -> f64 {
        (self.terminal)(v)
    }

    /// Adds `shift` to the running cost.
    pub fn shifted(&self, shift: f64) -> Self {
        let running = self.running.clone();
        CostSpec {
            running: Arc::new(move |k, v, u| running(k, v, u) + shift),
            terminal: self.terminal.clone(),
            label: format!("{}+{shift}", self.label),
        }
    }

    /// Sampled finiteness check on `[-1,1]³ ∩ ball` × 5 controls.
    pub fn validate(&self, controls: &[f64], horizon: usize) -> Result<()> {
        let pts: Vec<f64> = (0..5).map(|i| -1.0 + 0.5 * i as f64).collect();
        for &x in &pts {
            for &y in &pts {
                for &z in &pts {
                    let v = BlochVector::new(x, y, z);
                    if v.norm() > 1.0 {
                        continue;
                    }
                    if !self.phi(&v).is_finite() {
                        return Err(Error::config(format!("terminal cost not finite at {v:?}")));
                    }
                    for k in [0, horizon.saturating_sub(1)] {
                        for &u in controls {
                            if !self.c(k, &v, u).is_finite() {
                                return Err(Error::config(format!("running cost not finite at {v:?}, u = {u}")));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for CostSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CostSpec").field("label", &self.label).finish()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum RunningCostJson {
    Zero,
    Constant { value: f64 },
    /// `weight · u²`
    QuadraticControl { weight: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalCostJson {
    Constant { value: f64 },
    /// `1 − Tr[ρ σ] = ½(1 − v·target)`
    OneMinusFidelity { target: [f64; 3] },
    /// `1 − v·target`
    OneMinusBloch { target: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostJson {
    #[serde(default = "zero_running")]
    pub running: RunningCostJson,
    pub terminal: TerminalCostJson,
}

fn zero_running() -> RunningCostJson {
    RunningCostJson::Zero
}

impl CostJson {
    pub fn to_cost(&self) -> Result<CostSpec> {
        let finite = |x: f64, what: &str| {
            if x.is_finite() {
                Ok(x)
            } else {
                Err(Error::config(format!("{what} must be finite")))
            }
        };
        let label = serde_json::to_string(self).unwrap_or_default();
        let running: Arc<RunningFn> = match self.running {
            RunningCostJson::Zero => Arc::new(|_, _, _| 0.0),
            RunningCostJson::Constant { value } => {
                let c = finite(value, "running cost")?;
                Arc::new(move |_, _, _| c)
            }
            RunningCostJson::QuadraticControl { weight } => {
                let w = finite(weight, "control weight")?;
                Arc::new(move |_, _, u| w * u * u)
            }
        };
        let target = |t: [f64; 3]| -> Result<BlochVector> {
            let v = BlochVector::from_array(t);
            if !t.iter().all(|x| x.is_finite()) || v.norm() > 1.0 + 1e-12 {
                return Err(Error::config(format!("target {t:?} is not a Bloch vector")));
            }
            Ok(v)
        };
        let dot = |a: &BlochVector, b: &BlochVector| a.x * b.x + a.y * b.y + a.z * b.z;
        let terminal: Arc<TerminalFn> = match self.terminal {
            TerminalCostJson::Constant { value } => {
                let c = finite(value, "terminal cost")?;
                Arc::new(move |_| c)
            }
            TerminalCostJson::OneMinusFidelity { target: t } => {
                let t = target(t)?;
                Arc::new(move |v| 0.5 * (1.0 - dot(v, &t)))
            }
            TerminalCostJson::OneMinusBloch { target: t } => {
                let t = target(t)?;
                Arc::new(move |v| 1.0 - dot(v, &t))
            }
        };
        Ok(CostSpec { running, terminal, label })
    }
}

pub fn parse_cost(text: &str) -> Result<CostSpec> {
    let json: CostJson = serde_json::from_str(text).map_err(|e| Error::config(format!("cost file: {e}")))?;
    json.to_cost()
}

/// Cartesian grid of spacing `δ` over `[-1,1]³`; points outside the ball are
/// masked and take the value of their nearest interior point.
#[derive(Clone, Debug)]
pub struct BlochGrid {
    pub per_axis: usize,
    pub spacing: f64,
    valid: Vec<bool>,
    nearest: Vec<usize>,
}

impl BlochGrid {
    /// Spacing is adjusted so that `2/δ` is an integer.
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::config(format!("grid spacing {delta} outside (0, 1]")));
        }
        let cells = (2.0 / delta).round().max(1.0) as usize;
        if cells > 400 {
            return Err(Error::config(format!("grid spacing {delta} too fine")));
        }
        let per_axis = cells + 1;
        let spacing = 2.0 / cells as f64;
        let mut grid = BlochGrid { per_axis, spacing, valid: Vec::new(), nearest: Vec::new() };
        let total = per_axis.pow(3);
        grid.valid = (0..total).map(|i| grid.point(i).norm() <= 1.0 + 1e-12).collect();
        grid.nearest = (0..total).map(|i| if grid.valid[i] { i } else { grid.nearest_valid(i) }).collect();
        Ok(grid)
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    #[inline]
    fn coord(&self, i: usize) -> f64 {
        -1.0 + self.spacing * i as f64
    }

    #[inline]
    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.per_axis + j) * self.per_axis + k
    }

    fn split(&self, idx: usize) -> (usize, usize, usize) {
        let m = self.per_axis;
        (idx / (m * m), (idx / m) % m, idx % m)
    }

    pub fn point(&self, idx: usize) -> BlochVector {
        let (i, j, k) = self.split(idx);
        BlochVector::new(self.coord(i), self.coord(j), self.coord(k))
    }

    pub fn is_valid(&self, idx: usize) -> bool {
        self.valid[idx]
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.valid[i]).collect()
    }

    fn nearest_valid(&self, idx: usize) -> usize {
        let p = self.point(idx);
        let r = p.norm();
        let s = 1.0 / r;
        let to_cell = |x: f64| ((x * s + 1.0) / self.spacing).round() as isize;
        let c = [to_cell(p.x), to_cell(p.y), to_cell(p.z)];
        let m = self.per_axis as isize;
        let mut best = (f64::INFINITY, usize::MAX);
        for di in -2..=2 {
            for dj in -2..=2 {
                for dk in -2..=2 {
                    let (i, j, k) = (c[0] + di, c[1] + dj, c[2] + dk);
                    if i < 0 || j < 0 || k < 0 || i >= m || j >= m || k >= m {
                        continue;
                    }
                    let q = self.index(i as usize, j as usize, k as usize);
                    if !self.valid[q] {
                        continue;
                    }
                    let w = self.point(q);
                    let d = (w.x - p.x).powi(2) + (w.y - p.y).powi(2) + (w.z - p.z).powi(2);
                    if d < best.0 || (d == best.0 && q < best.1) {
                        best = (d, q);
                    }
                }
            }
        }
        debug_assert!(best.1 != usize::MAX);
        best.1
    }

    /// Copies interior values onto the masked exterior.
    fn fill(&self, values: &mut [f64]) {
        for i in 0..values.len() {
            if !self.valid[i] {
                values[i] = values[self.nearest[i]];
            }
        }
    }

    /// Trilinear interpolation of `values` (full length, exterior filled) at `v`.
    #[inline]
    pub fn interpolate(&self, values: &[f64], v: &BlochVector) -> f64 {
        let m = self.per_axis;
        let locate = |x: f64| -> (usize, f64) {
            let s = ((x + 1.0) / self.spacing).clamp(0.0, (m - 1) as f64);
            let i = (s.floor() as usize).min(m - 2);
            (i, s - i as f64)
        };
        let (i, fx) = locate(v.x);
        let (j, fy) = locate(v.y);
        let (k, fz) = locate(v.z);
        let at = |a: usize, b: usize, c: usize| values[self.index(i + a, j + b, k + c)];
        let lerp = |a: f64, b: f64, w: f64| a + (b - a) * w;
        let c00 = lerp(at(0, 0, 0), at(1, 0, 0), fx);
        let c10 = lerp(at(0, 1, 0), at(1, 1, 0), fx);
        let c01 = lerp(at(0, 0, 1), at(1, 0, 1), fx);
        let c11 = lerp(at(0, 1, 1), at(1, 1, 1), fx);
        lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
    }

    /// Largest `|V(p) − V(q)| / δ` over axis-adjacent interior pairs.
    fn lipschitz(&self, values: &[f64]) -> f64 {
        let m = self.per_axis;
        let mut lip = 0.0f64;
        for idx in 0..self.len() {
            if !self.valid[idx] {
                continue;
            }
            let (i, j, k) = self.split(idx);
            for (a, b, c) in [(i + 1, j, k), (i, j + 1, k), (i, j, k + 1)] {
                if a < m && b < m && c < m {
                    let q = self.index(a, b, c);
                    if self.valid[q] {
                        lip = lip.max((values[idx] - values[q]).abs() / self.spacing);
                    }
                }
            }
        }
        lip
    }
}

/// One outcome branch: probability and normalized state (absent when the
/// probability vanishes).
#[inline]
fn branches(ops: &MeasurementSuperops, rho: &Matrix2) -> [(f64, Option<Matrix2>); 2] {
    let (l0, l1) = ops.both(rho);
    let one = |l: Matrix2| {
        let p = l.trace().re;
        if p > BRANCH_EPS {
            (p, Some(l.scale(1.0 / p)))
        } else {
            (0.0, None)
        }
    };
    [one(l0), one(l1)]
}

#[inline]
fn bloch(m: &Matrix2) -> BlochVector {
    let [x, y, z] = m.bloch_components();
    BlochVector::new(x, y, z)
}

/// Per-stage, per-control measurement maps `ℒᵢ` for step `1/n` at time `k/n`.
fn stage_superops(
    model: &ModelSpec,
    obs: &ObservableSpec,
    horizon: usize,
    n: usize,
    controls: &[f64],
) -> Result<Vec<Vec<MeasurementSuperops>>> {
    let chain = MeasuredModel::new(model, obs);
    let h = 1.0 / n as f64;
    (0..horizon)
        .map(|k| controls.iter().map(|&u| chain.superops(h, k as f64 * h, u)).collect())
        .collect()
}

fn check_controls(model: &ModelSpec, controls: &[f64]) -> Result<Vec<f64>> {
    if controls.is_empty() {
        return Err(Error::config("control grid is empty"));
    }
    let mut c: Vec<f64> = controls.iter().map(|&u| model.bounds.check(u)).collect::<Result<_>>()?;
    c.sort_by(f64::total_cmp);
    c.dedup();
    Ok(c)
}

/// `argmin` over ascending controls with ties toward the smallest control.
#[inline]
fn argmin(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 - TIE_TOL {
            best = (i, v);
        }
    }
    best
}

/// Value and policy arrays from [`hjb_backward`].
#[derive(Clone, Debug)]
pub struct ValueGrid {
    pub horizon: usize,
    pub n: usize,
    pub grid: Arc<BlochGrid>,
    pub controls: Vec<f64>,
    /// `values[k]` for `k = 0..=N`, full grid length with filled exterior.
    pub values: Vec<Vec<f64>>,
    /// `policy[k]` for `k = 0..N`.
    pub policy: Arc<Vec<Vec<f64>>>,
    /// Largest grid finite-difference slope over all stages.
    pub lipschitz: f64,
}

impl ValueGrid {
    pub fn value(&self, k: usize, v: &BlochVector) -> f64 {
        self.grid.interpolate(&self.values[k], v)
    }

    /// Interpolation budget `N · δ · Lip`.
    pub fn interpolation_budget(&self) -> f64 {
        self.horizon as f64 * self.grid.spacing * self.lipschitz
    }

    pub fn policy(&self) -> Policy {
        Policy { grid: self.grid.clone(), controls: self.policy.clone(), n: self.n, bounds: (self.controls[0], *self.controls.last().unwrap()) }
    }

    /// `(k, x, y, z, V, u)` rows over interior grid points; `u` is empty at `k = N`.
    pub fn rows(&self) -> Vec<(usize, BlochVector, f64, Option<f64>)> {
        let mut out = Vec::new();
        for k in 0..=self.horizon {
            for idx in self.grid.valid_indices() {
                let u = self.policy.get(k).map(|p| p[idx]);
                out.push((k, self.grid.point(idx), self.values[k][idx], u));
            }
        }
        out
    }
}

/// Grid policy `u*^k(v)` by trilinear interpolation.
#[derive(Clone, Debug)]
pub struct Policy {
    grid: Arc<BlochGrid>,
    controls: Arc<Vec<Vec<f64>>>,
    n: usize,
    bounds: (f64, f64),
}

impl Policy {
    pub fn lookup(&self, k: usize, v: &BlochVector) -> f64 {
        let k = k.min(self.controls.len() - 1);
        self.grid.interpolate(&self.controls[k], v).clamp(self.bounds.0, self.bounds.1)
    }

    /// The policy as a feedback strategy on the chain with `n` steps per unit time.
    pub fn to_strategy(&self) -> Strategy {
        let p = self.clone();
        let n = self.n as f64;
        Strategy::markovian("hjb-policy", move |t, rho| p.lookup((t * n).round() as usize, &rho.to_bloch()))
    }
}

/// Backward recursion on the Bloch-ball grid of spacing `delta`.
pub fn hjb_backward(
    model: &ModelSpec,
    obs: &ObservableSpec,
    cost: &CostSpec,
    horizon: usize,
    n: usize,
    controls: &[f64],
    delta: f64,
) -> Result<ValueGrid> {
    if horizon == 0 || n == 0 {
        return Err(Error::config("horizon and n must be at least 1"));
    }
    let controls = check_controls(model, controls)?;
    cost.validate(&controls, horizon)?;
    let grid = Arc::new(BlochGrid::new(delta)?);
    let ops = stage_superops(model, obs, horizon, n, &controls)?;
    let interior = grid.valid_indices();

    let mut terminal: Vec<f64> = (0..grid.len()).map(|i| if grid.is_valid(i) { cost.phi(&grid.point(i)) } else { 0.0 }).collect();
    grid.fill(&mut terminal);
    let mut values = vec![Vec::new(); horizon + 1];
    let mut policy = vec![Vec::new(); horizon];
    values[horizon] = terminal;

    for k in (0..horizon).rev() {
        let next = &values[k + 1];
        let last = k + 1 == horizon;
        let continuation = |v: &BlochVector| if last { cost.phi(v) } else { grid.interpolate(next, v) };
        let solved: Vec<(f64, f64)> = interior
            .par_iter()
            .map(|&idx| {
                let v = grid.point(idx);
                let rho = *from_bloch(v)?.matrix();
                let (i, best) = argmin(ops[k].iter().zip(&controls).map(|(op, &u)| {
                    let mut total = cost.c(k, &v, u);
                    for (p, s) in branches(op, &rho) {
                        if let Some(s) = s {
                            total += p * continuation(&bloch(&s));
                        }
                    }
                    total
                }));
                if !best.is_finite() {
                    return Err(Error::config(format!("non-finite cost-to-go at stage {k}, {v:?}")));
                }
                Ok((best, controls[i]))
            })
            .collect::<Result<_>>()?;
        let mut v = vec![0.0; grid.len()];
        let mut u = vec![0.0; grid.len()];
        for (&idx, &(val, ctl)) in interior.iter().zip(&solved) {
            v[idx] = val;
            u[idx] = ctl;
        }
        grid.fill(&mut v);
        grid.fill(&mut u);
        values[k] = v;
        policy[k] = u;
    }
    let lipschitz = values.iter().map(|v| grid.lipschitz(v)).fold(0.0, f64::max);
    Ok(ValueGrid { horizon, n, grid, controls, values, policy: Arc::new(policy), lipschitz })
}

/// Optimal value over the reachable outcome tree of `rho0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TreeSolution {
    pub value: f64,
    pub first_control: f64,
}

/// The recursion evaluated exactly on the outcome tree of `rho0` (no grid).
pub fn exact_tree_value(
    model: &ModelSpec,
    obs: &ObservableSpec,
    cost: &CostSpec,
    horizon: usize,
    n: usize,
    controls: &[f64],
    rho0: &QubitState,
) -> Result<TreeSolution> {
    if horizon == 0 || n == 0 {
        return Err(Error::config("horizon and n must be at least 1"));
    }
    let controls = check_controls(model, controls)?;
    let ops = stage_superops(model, obs, horizon, n, &controls)?;
    fn go(k: usize, rho: &Matrix2, ops: &[Vec<MeasurementSuperops>], controls: &[f64], cost: &CostSpec) -> (f64, usize) {
        let v = bloch(rho);
        if k == ops.len() {
            return (cost.phi(&v), 0);
        }
        let (i, best) = argmin(ops[k].iter().zip(controls).map(|(op, &u)| {
            let mut total = cost.c(k, &v, u);
            for (p, s) in branches(op, rho) {
                if let Some(s) = s {
                    total += p * go(k + 1, &s, ops, controls, cost).0;
                }
            }
            total
        }));
        (best, i)
    }
    let (value, i) = go(0, rho0.matrix(), &ops, &controls, cost);
    if !value.is_finite() {
        return Err(Error::config("non-finite optimal cost"));
    }
    Ok(TreeSolution { value, first_control: controls[i] })
}

/// Result of exhaustive strategy enumeration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BruteForce {
    pub value: f64,
    /// Control per outcome-history node in heap order: node 1 is the root,
    /// node `2i + b` follows node `i` with outcome `b`.
    pub table: Vec<f64>,
    pub strategies: usize,
}

/// Expected cost of every feedback strategy on the outcome tree; returns the
/// best. A strategy assigns one control to each of the `2^N − 1` histories.
pub fn brute_force_tree(
    model: &ModelSpec,
    obs: &ObservableSpec,
    cost: &CostSpec,
    horizon: usize,
    n: usize,
    controls: &[f64],
    rho0: &QubitState,
) -> Result<BruteForce> {
    if horizon == 0 || n == 0 {
        return Err(Error::config("horizon and n must be at least 1"));
    }
    let controls = check_controls(model, controls)?;
    let nodes = (1usize << horizon) - 1;
    let count = (controls.len() as f64).powi(nodes as i32);
    if horizon > 4 || controls.len() > 3 || count > BRUTE_FORCE_LIMIT {
        return Err(Error::config(format!(
            "brute force needs N <= 4, at most 3 controls and <= 1e6 strategies (got {count})"
        )));
    }
    let count = count as usize;
    let ops = stage_superops(model, obs, horizon, n, &controls)?;
    fn eval(node: usize, k: usize, rho: &Matrix2, choice: &[usize], ops: &[Vec<MeasurementSuperops>], controls: &[f64], cost: &CostSpec) -> f64 {
        let v = bloch(rho);
        if k == ops.len() {
            return cost.phi(&v);
        }
        let ci = choice[node - 1];
        let mut total = cost.c(k, &v, controls[ci]);
        for (b, (p, s)) in branches(&ops[k][ci], rho).into_iter().enumerate() {
            if let Some(s) = s {
                total += p * eval(2 * node + b, k + 1, &s, choice, ops, controls, cost);
            }
        }
        total
    }
    let radix = controls.len();
    let (best_value, best_code) = (0..count)
        .into_par_iter()
        .map(|code| {
            let mut choice = vec![0usize; nodes];
            let mut c = code;
            for slot in choice.iter_mut() {
                *slot = c % radix;
                c /= radix;
            }
            (eval(1, 0, rho0.matrix(), &choice, &ops, &controls, cost), code)
        })
        .reduce(|| (f64::INFINITY, usize::MAX), |a, b| if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a });
    let mut table = Vec::with_capacity(nodes);
    let mut c = best_code;
    for _ in 0..nodes {
        table.push(controls[c % radix]);
        c /= radix;
    }
    Ok(BruteForce { value: best_value, table, strategies: count })
}

/// Monte Carlo mean and standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
    pub samples: usize,
}

pub(crate) fn mean_se(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Monte Carlo estimate of `E[Σ_{k<N} c(k, ρ_k, u_k) + φ(ρ_N)]`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_strategy_mc(
    model: &ModelSpec,
    obs: &ObservableSpec,
    strategy: &Strategy,
    cost: &CostSpec,
    horizon: usize,
    n: usize,
    rho0: &QubitState,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if samples < 100 {
        return Err(Error::config(format!("need at least 100 samples (got {samples})")));
    }
    if horizon == 0 || n == 0 {
        return Err(Error::config("horizon and n must be at least 1"));
    }
    let dynamics = MeasuredModel::new(model, obs);
    let cfg = ChainConfig::new(n, horizon as f64 / n as f64, *rho0);
    if cfg.steps() != horizon {
        return Err(Error::config("horizon / n does not give an integer step count"));
    }
    let costs: Vec<f64> = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let traj = simulate_chain(&dynamics, strategy, &cfg, seed, i)?;
            let r = &traj.records;
            let running: f64 = r[..horizon].iter().map(|rec| cost.c(rec.step, &rec.state.to_bloch(), rec.u)).sum();
            Ok(running + cost.phi(&r[horizon].state.to_bloch()))
        })
        .collect::<Result<_>>()?;
    let (mean, se) = mean_se(&costs);
    Ok(McEstimate { mean, se, samples })
}

/// Scalar test function on ℝ³; derivatives default to central differences.
pub trait ScalarField: Sync {
    fn value(&self, v: &[f64; 3]) -> f64;

    fn gradient(&self, v: &[f64; 3]) -> [f64; 3] {
        let mut g = [0.0; 3];
        for (i, gi) in g.iter_mut().enumerate() {
            let (mut a, mut b) = (*v, *v);
            a[i] += FD_STEP;
            b[i] -= FD_STEP;
            *gi = (self.value(&a) - self.value(&b)) / (2.0 * FD_STEP);
        }
        g
    }

    fn hessian(&self, v: &[f64; 3]) -> [[f64; 3]; 3] {
        let mut hm = [[0.0; 3]; 3];
        let h = FD_STEP;
        for i in 0..3 {
            for j in 0..3 {
                let at = |si: f64, sj: f64| {
                    let mut w = *v;
                    w[i] += si * h;
                    w[j] += sj * h;
                    self.value(&w)
                };
                hm[i][j] = if i == j {
                    (at(1.0, 0.0) - 2.0 * self.value(v) + at(-1.0, 0.0)) / (h * h)
                } else {
                    (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h * h)
                };
            }
        }
        hm
    }
}

/// A field given by a closure, differentiated numerically.
pub struct FnField<F>(pub F);

impl<F: Fn(&[f64; 3]) -> f64 + Sync> ScalarField for FnField<F> {
    fn value(&self, v: &[f64; 3]) -> f64 {
        (self.0)(v)
    }
}

/// `f(v) = v_axis`, with exact derivatives.
pub struct Coordinate(pub usize);

impl ScalarField for Coordinate {
    fn value(&self, v: &[f64; 3]) -> f64 {
        v[self.0]
    }

    fn gradient(&self, _v: &[f64; 3]) -> [f64; 3] {
        let mut g = [0.0; 3];
        g[self.0] = 1.0;
        g
    }

    fn hessian(&self, _v: &[f64; 3]) -> [[f64; 3]; 3] {
        [[0.0; 3]; 3]
    }
}

/// Generator of the diffusive equation on Bloch coordinates:
/// `½ Σ Θᵢ Θⱼ ∂ᵢ∂ⱼ f + Σ Lᵢ ∂ᵢ f` at `Φ(v)`.
pub fn generator_apply(f: &dyn ScalarField, t: f64, u: f64, v: &BlochVector, model: &ModelSpec) -> Result<f64> {
    Ok(generator_at(f, t, u, from_bloch(*v)?.matrix(), model))
}

/// [`generator_apply`] at a state given as a matrix; no ball check, so states
/// on the sphere up to rounding are accepted.
fn generator_at(f: &dyn ScalarField, t: f64, u: f64, rho: &Matrix2, model: &ModelSpec) -> f64 {
    let l = model.superop_l(t, u, rho).bloch_components();
    let th = model.superop_theta(t, u, rho).bloch_components();
    let x = rho.bloch_components();
    let g = f.gradient(&x);
    let h = f.hessian(&x);
    let mut out = 0.0;
    for i in 0..3 {
        out += l[i] * g[i];
        for j in 0..3 {
            out += 0.5 * th[i] * th[j] * h[i][j];
        }
    }
    out
}

/// Residual statistics on one window `[t0, t1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WindowResidual {
    pub t0: f64,
    pub t1: f64,
    pub mean: f64,
    pub se: f64,
}

/// Estimates `E[f(ρ_{t₁}) − f(ρ_{t₀}) − ∫_{t₀}^{t₁} 𝒜f(ρ_s) ds]` on each window
/// of `t_grid` over `samples` diffusive paths with constant control `u`; the
/// integral is the left Riemann sum on the integrator grid.
#[allow(clippy::too_many_arguments)]
pub fn martingale_residual(
    model: &ModelSpec,
    u: f64,
    f: &dyn ScalarField,
    rho0: &QubitState,
    t_grid: &[f64],
    dt: f64,
    samples: usize,
    seed: u64,
) -> Result<Vec<WindowResidual>> {
    if t_grid.len() < 2 || t_grid.windows(2).any(|w| w[1] <= w[0]) || t_grid[0] != 0.0 {
        return Err(Error::config("time grid must start at 0 and increase"));
    }
    if samples < 2 {
        return Err(Error::config("need at least 2 samples"));
    }
    let u = model.bounds.check(u)?;
    let horizon = *t_grid.last().unwrap();
    let cfg = IntegratorConfig::new(dt, horizon, *rho0);
    let step_dt = cfg.effective_dt();
    let edges: Vec<usize> = t_grid.iter().map(|&t| (t / step_dt).round() as usize).collect();
    if edges.iter().zip(t_grid).any(|(&k, &t)| (k as f64 * step_dt - t).abs() > 1e-9) {
        return Err(Error::config("window edges must lie on the integrator grid"));
    }
    let strategy = Strategy::constant(u);
    let windows = edges.len() - 1;
    let per_path: Vec<Vec<f64>> = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let path = integrate_diffusive(model, &strategy, &cfg, seed, i)?;
            let fv: Vec<f64> = path.records.iter().map(|r| f.value(&r.state.to_bloch().to_array())).collect();
            let gen: Vec<f64> = path.records.iter().map(|r| generator_at(f, r.t, u, r.state.matrix(), model)).collect();
            Ok((0..windows)
                .map(|w| {
                    let (a, b) = (edges[w], edges[w + 1]);
                    let integral: f64 = gen[a..b].iter().sum::<f64>() * step_dt;
                    fv[b] - fv[a] - integral
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok((0..windows)
        .map(|w| {
            let xs: Vec<f64> = per_path.iter().map(|p| p[w]).collect();
            let (mean, se) = mean_se(&xs);
            WindowResidual { t0: t_grid[w], t1: t_grid[w + 1], mean, se }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use approx::assert_abs_diff_eq;

    fn desk_cost() -> CostSpec {
        CostJson {
            running: RunningCostJson::QuadraticControl { weight: 0.01 },
            terminal: TerminalCostJson::OneMinusBloch { target: [1.0, 0.0, 0.0] },
        }
        .to_cost()
        .unwrap()
    }

    #[test]
    fn constant_terminal_cost_propagates() {
        let cost = CostSpec::new("three", |_, _, _| 0.0, |_| 3.0);
        let g = hjb_backward(&ModelSpec::desk(), &ObservableSpec::diagonal(), &cost, 3, 4, &[-1.0, 0.0, 1.0], 0.25).unwrap();
        for k in 0..=3 {
            for idx in g.grid.valid_indices() {
                assert_abs_diff_eq!(g.values[k][idx], 3.0, epsilon = 1e-12);
            }
        }
        // all controls tie; the smallest wins
        assert!(g.policy.iter().all(|p| g.grid.valid_indices().iter().all(|&i| p[i] == -1.0)));
    }

    #[test]
    fn depth_one_matches_enumeration() {
        let model = ModelSpec::desk();
        let obs = ObservableSpec::nondiagonal(0.6).unwrap();
        let cost = desk_cost();
        let controls = [-1.0, -0.5, 0.0, 0.5, 1.0];
        let g = hjb_backward(&model, &obs, &cost, 1, 4, &controls, 0.25).unwrap();
        for idx in g.grid.valid_indices() {
            let v = g.grid.point(idx);
            let rho = from_bloch(v).unwrap();
            let direct = exact_tree_value(&model, &obs, &cost, 1, 4, &controls, &rho).unwrap().value;
            assert_abs_diff_eq!(g.values[0][idx], direct, epsilon = 1e-12);
        }
    }

    #[test]
    fn tree_dp_matches_brute_force() {
        let model = ModelSpec::desk();
        let cost = desk_cost();
        let rho0 = QubitState::excited();
        for obs in [ObservableSpec::diagonal(), ObservableSpec::nondiagonal(0.4).unwrap()] {
            for horizon in 1..=3 {
                let dp = exact_tree_value(&model, &obs, &cost, horizon, 4, &[-1.0, 1.0], &rho0).unwrap();
                let bf = brute_force_tree(&model, &obs, &cost, horizon, 4, &[-1.0, 1.0], &rho0).unwrap();
                assert_abs_diff_eq!(dp.value, bf.value, epsilon = 1e-12);
                assert_eq!(bf.strategies, 1 << ((1 << horizon) - 1));
            }
        }
    }

    #[test]
    fn brute_force_limits() {
        let model = ModelSpec::desk();
        let obs = ObservableSpec::diagonal();
        let cost = desk_cost();
        let rho0 = QubitState::excited();
        assert!(brute_force_tree(&model, &obs, &cost, 5, 4, &[0.0], &rho0).is_err());
        assert!(brute_force_tree(&model, &obs, &cost, 2, 4, &[-1.0, 0.0, 0.5, 1.0], &rho0).is_err());
        // a single strategy: value is its expected cost
        let one = brute_force_tree(&model, &obs, &cost, 1, 4, &[0.5], &rho0).unwrap();
        let dp = exact_tree_value(&model, &obs, &cost, 1, 4, &[0.5], &rho0).unwrap();
        assert_eq!(one.value, dp.value);
    }

    #[test]
    fn grid_interpolation_is_exact_for_affine_fields() {
        let grid = BlochGrid::new(0.125).unwrap();
        let f = |v: &BlochVector| 0.3 + 2.0 * v.x - v.y + 0.5 * v.z;
        let vals: Vec<f64> = (0..grid.len()).map(|i| f(&grid.point(i))).collect();
        for v in [BlochVector::new(0.1, 0.2, -0.3), BlochVector::new(-0.55, 0.01, 0.4)] {
            assert_abs_diff_eq!(grid.interpolate(&vals, &v), f(&v), epsilon = 1e-12);
        }
    }

    #[test]
    fn exterior_points_take_nearby_interior_values() {
        let grid = BlochGrid::new(0.25).unwrap();
        for i in 0..grid.len() {
            let j = grid.nearest[i];
            assert!(grid.is_valid(j));
            let (p, q) = (grid.point(i), grid.point(j));
            let d = ((p.x - q.x).powi(2) + (p.y - q.y).powi(2) + (p.z - q.z).powi(2)).sqrt();
            assert!(d <= (p.norm() - 1.0).max(0.0) + 2.0 * grid.spacing, "{p:?} -> {q:?}");
        }
    }

    #[test]
    fn generator_examples() {
        let model = ModelSpec::desk();
        let v = BlochVector::new(0.3, -0.2, 0.5);
        let rho = *from_bloch(v).unwrap().matrix();
        let l = model.superop_l(0.2, 0.4, &rho).bloch_components();
        let th = model.superop_theta(0.2, 0.4, &rho).bloch_components();
        assert_eq!(generator_apply(&FnField(|_: &[f64; 3]| 2.5), 0.2, 0.4, &v, &model).unwrap().abs() < 1e-6, true);
        assert_abs_diff_eq!(generator_apply(&Coordinate(0), 0.2, 0.4, &v, &model).unwrap(), l[0], epsilon = 1e-15);
        let sq = generator_apply(&FnField(|x: &[f64; 3]| x[0] * x[0]), 0.2, 0.4, &v, &model).unwrap();
        assert_abs_diff_eq!(sq, th[0] * th[0] + 2.0 * v.x * l[0], epsilon = 1e-6);
    }

    #[test]
    fn mc_of_constant_cost_has_zero_error() {
        let cost = CostSpec::new("k", |_, _, _| 0.0, |_| 1.5);
        let est = evaluate_strategy_mc(
            &ModelSpec::desk(),
            &ObservableSpec::diagonal(),
            &Strategy::constant(0.0),
            &cost,
            3,
            4,
            &QubitState::excited(),
            100,
            1,
        )
        .unwrap();
        assert_eq!(est.mean, 1.5);
        assert_eq!(est.se, 0.0);
    }

    #[test]
    fn parses_cost_json() {
        let c = parse_cost(r#"{"running":{"form":"quadratic_control","weight":0.01},"terminal":{"form":"one_minus_bloch","target":[1,0,0]}}"#).unwrap();
        assert_abs_diff_eq!(c.c(0, &BlochVector::new(0.0, 0.0, 0.0), 0.5), 0.0025);
        assert_abs_diff_eq!(c.phi(&BlochVector::new(0.25, 0.0, 0.0)), 0.75);
        let f = parse_cost(r#"{"terminal":{"form":"one_minus_fidelity","target":[0,0,1]}}"#).unwrap();
        assert_abs_diff_eq!(f.phi(&BlochVector::new(0.0, 0.0, 1.0)), 0.0);
        assert!(parse_cost(r#"{"terminal":{"form":"one_minus_bloch","target":[2,0,0]}}"#).is_err());
        assert!(parse_cost(r#"{"terminal":{"form":"nope"}}"#).is_err());
    }
}
