//! Resonance fluorescence: an atom driven by a laser channel and watched by a
//! photon counter. The laser enters through the coherent reference state of
//! its auxiliary; measurement happens on the counter only.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use crate::continuous::{finish_bound, integrate_jump_ensemble, IntegratorConfig, JumpDynamics, JumpPath};
use crate::discrete::{simulate_chains, ChainConfig, ChainDynamics, DiscreteTrajectory};
use crate::error::{Error, Result};
use crate::model::{block_gram_schmidt, first_order_columns, ControlBounds};
use crate::qcore::{Matrix2, QubitState, C64};
use crate::strategy::Strategy;

/// Coherent reference state `(1, h; h̄, |h|²) / (1 + |h|²)` of the laser auxiliary.
pub fn laser_state(hval: C64) -> QubitState {
    let n = 1.0 / (1.0 + hval.norm_sqr());
    QubitState::new_unchecked(Matrix2::new(
        C64::new(n, 0.0),
        hval * n,
        hval.conj() * n,
        C64::new(hval.norm_sqr() * n, 0.0),
    ))
}

type EnvelopeFn = dyn Fn(f64) -> C64 + Send + Sync;

/// Laser intensity envelope `f(t)`, in units of √rate.
#[derive(Clone)]
pub enum LaserProfile {
    Constant(C64),
    /// `amp · sin(freq · t)`
    Sine { amp: f64, freq: f64 },
    /// Piecewise-linear through `(t, f)` knots, constant beyond the ends.
    Table(Vec<(f64, C64)>),
    Custom(Arc<EnvelopeFn>),
}

impl LaserProfile {
    pub fn constant(v: f64) -> Self {
        LaserProfile::Constant(C64::new(v, 0.0))
    }

    pub fn off() -> Self {
        LaserProfile::constant(0.0)
    }

    #[inline]
    pub fn eval(&self, t: f64) -> C64 {
        match self {
            LaserProfile::Constant(v) => *v,
            LaserProfile::Sine { amp, freq } => C64::new(amp * (freq * t).sin(), 0.0),
            LaserProfile::Table(knots) => interpolate(knots, t),
            LaserProfile::Custom(f) => f(t),
        }
    }

    /// Largest `|f|` on a 1001-point sample of `[0, horizon]`; errors on
    /// non-finite values.
    pub fn sampled_bound(&self, horizon: f64) -> Result<f64> {
        let mut m = 0.0f64;
        for i in 0..=1000 {
            let v = self.eval(horizon * i as f64 / 1000.0);
            if !(v.re.is_finite() && v.im.is_finite()) {
                return Err(Error::config(format!("laser envelope is not finite near t = {}", horizon * i as f64 / 1000.0)));
            }
            m = m.max(v.norm());
        }
        Ok(m)
    }

    /// `const:<re>[:<im>]`, `sin:<amp>:<freq>`, or a path to a CSV table with
    /// columns `t, Re f, Im f`.
    pub fn parse(text: &str) -> Result<Self> {
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::config(format!("bad number '{s}' in laser '{text}'")));
        let parts: Vec<&str> = text.split(':').collect();
        match parts.as_slice() {
            ["const", re] => Ok(LaserProfile::Constant(C64::new(num(re)?, 0.0))),
            ["const", re, im] => Ok(LaserProfile::Constant(C64::new(num(re)?, num(im)?))),
            ["sin", amp, freq] => Ok(LaserProfile::Sine { amp: num(amp)?, freq: num(freq)? }),
            ["const" | "sin", ..] => Err(Error::config(format!("malformed laser envelope '{text}'"))),
            _ => LaserProfile::from_csv_file(Path::new(text)),
        }
    }

    pub fn from_csv_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read laser table {}: {e}", path.display())))?;
        LaserProfile::from_csv(&text)
    }

    /// Rows `t,re,im`; a non-numeric first row is taken as a header.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut knots = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed: std::result::Result<Vec<f64>, _> = cols.iter().map(|c| c.parse::<f64>()).collect();
            match parsed {
                Ok(v) if v.len() == 3 && v.iter().all(|x| x.is_finite()) => knots.push((v[0], C64::new(v[1], v[2]))),
                Err(_) if knots.is_empty() && i == 0 => continue,
                _ => return Err(Error::config(format!("laser table line {}: expected 't,re,im'", i + 1))),
            }
        }
        if knots.is_empty() {
            return Err(Error::config("laser table has no rows"));
        }
        if knots.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::config("laser table times must be strictly increasing"));
        }
        Ok(LaserProfile::Table(knots))
    }
}

fn interpolate(knots: &[(f64, C64)], t: f64) -> C64 {
    let i = knots.partition_point(|k| k.0 <= t);
    if i == 0 {
        return knots[0].1;
    }
    if i == knots.len() {
        return knots[i - 1].1;
    }
    let (t0, v0) = knots[i - 1];
    let (t1, v1) = knots[i];
    v0 + (v1 - v0) * ((t - t0) / (t1 - t0))
}

impl fmt::Debug for LaserProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LaserProfile::Constant(v) => write!(f, "Constant({v})"),
            LaserProfile::Sine { amp, freq } => write!(f, "Sine {{ amp: {amp}, freq: {freq} }}"),
            LaserProfile::Table(k) => write!(f, "Table({} knots)", k.len()),
            LaserProfile::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Atom Hamiltonian with laser (`L₁₀`) and counter (`L₂₀`) couplings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FluorescenceModel {
    pub hamiltonian: Matrix2,
    pub l10: Matrix2,
    pub l20: Matrix2,
}

impl FluorescenceModel {
    pub fn new(hamiltonian: Matrix2, l10: Matrix2, l20: Matrix2) -> Result<Self> {
        if hamiltonian.hermiticity_defect() > crate::qcore::HERMITIAN_TOL {
            return Err(Error::model("fluorescence Hamiltonian is not Hermitian"));
        }
        if ![hamiltonian, l10, l20].iter().all(Matrix2::is_finite) {
            return Err(Error::model("fluorescence operators must be finite"));
        }
        Ok(FluorescenceModel { hamiltonian, l10, l20 })
    }

    /// `H = 0`, `L₁₀ = k_l σ⁻`, `L₂₀ = k_c σ⁻`.
    pub fn decay(k_l: f64, k_c: f64) -> Self {
        FluorescenceModel { hamiltonian: Matrix2::zero(), l10: Matrix2::sigma_minus().scale(k_l), l20: Matrix2::sigma_minus().scale(k_c) }
    }

    /// All 4×4 blocks `L_{uv}` of the interaction unitary for step `h`, with
    /// `u, v` indexing `laser + 2·counter`.
    pub fn unitary_blocks(&self, h: f64) -> Result<[[Matrix2; 4]; 4]> {
        self.blocks(h, 4)
    }

    fn blocks(&self, h: f64, ncols: usize) -> Result<[[Matrix2; 4]; 4]> {
        if !(h > 0.0 && h <= 1.0) {
            return Err(Error::config(format!("time step {h} outside (0, 1]")));
        }
        let mut cols = first_order_columns(h, &self.hamiltonian, &[self.l10, self.l20, Matrix2::zero()], ncols);
        block_gram_schmidt(&mut cols)?;
        let mut out = [[Matrix2::zero(); 4]; 4];
        for (v, col) in cols.iter().enumerate() {
            for (u, b) in col.iter().enumerate() {
                out[u][v] = *b;
            }
        }
        Ok(out)
    }

    /// Unconditional limit generator.
    pub fn lindblad(&self, f: C64, rho: &Matrix2) -> Matrix2 {
        self.drift(f, rho) + self.jump(rho) - rho.scale(self.jump(rho).trace().re)
    }

    /// `R_fl = −i[H,ρ] − ½{Σ Lᵢ₀*Lᵢ₀, ρ} + L₁₀ρL₁₀* + [f̄L₁₀ − fL₁₀*, ρ] + Tr[L₂₀ρL₂₀*]ρ`
    #[inline]
    pub fn drift(&self, f: C64, rho: &Matrix2) -> Matrix2 {
        let l = &self.l10;
        let sum = l.adjoint() * *l + self.l20.adjoint() * self.l20;
        let drive = l.scale_c(f.conj()) - l.adjoint().scale_c(f);
        self.hamiltonian.commutator(rho).scale_c(C64::new(0.0, -1.0)) - sum.anticommutator(rho).scale(0.5)
            + l.sandwich(rho)
            + drive.commutator(rho)
            + rho.scale(self.jump(rho).trace().re)
    }

    /// `J_fl = L₂₀ρL₂₀*`
    #[inline]
    pub fn jump(&self, rho: &Matrix2) -> Matrix2 {
        self.l20.sandwich(rho)
    }
}

/// Blocks `L_{u0}, L_{u1}` and the laser state for one step.
#[derive(Clone, Copy, Debug)]
pub struct FluorescenceSuperops {
    /// `cols[u] = (L_{u0}, L_{u1})`
    pub cols: [(Matrix2, Matrix2); 4],
    pub laser: QubitState,
}

impl FluorescenceSuperops {
    /// `α_uv = (a L_{u0}ρ + b L_{u1}ρ) L_{v0}* + (c L_{u0}ρ + d L_{u1}ρ) L_{v1}*`
    /// with `(a, b; c, d)` the laser state.
    #[inline]
    pub fn alpha(&self, u: usize, v: usize, rho: &Matrix2) -> Matrix2 {
        let m = self.laser.matrix();
        let (lu0, lu1) = self.cols[u];
        let (lv0, lv1) = self.cols[v];
        let r0 = lu0 * *rho;
        let r1 = lu1 * *rho;
        (r0.scale_c(m.a00) + r1.scale_c(m.a01)) * lv0.adjoint() + (r0.scale_c(m.a10) + r1.scale_c(m.a11)) * lv1.adjoint()
    }

    /// `ℒ₀ = α₀₀ + α₁₁` (counter silent), `ℒ₁ = α₂₂ + α₃₃` (counter clicked).
    pub fn apply(&self, i: usize, rho: &Matrix2) -> Matrix2 {
        match i {
            0 => self.alpha(0, 0, rho) + self.alpha(1, 1, rho),
            _ => self.alpha(2, 2, rho) + self.alpha(3, 3, rho),
        }
    }

    pub fn both(&self, rho: &Matrix2) -> (Matrix2, Matrix2) {
        (self.apply(0, rho), self.apply(1, rho))
    }
}

/// Branch maps for the step leaving `k/n`, laser intensity `h = f(k/n)/√n`.
pub fn fluorescence_superops(k: usize, n: usize, f: &LaserProfile, m: &FluorescenceModel) -> Result<FluorescenceSuperops> {
    let blocks = m.blocks(1.0 / n as f64, 2)?;
    Ok(superops_from(&blocks, k, n, f))
}

fn superops_from(blocks: &[[Matrix2; 4]; 4], k: usize, n: usize, f: &LaserProfile) -> FluorescenceSuperops {
    let hval = f.eval(k as f64 / n as f64) / (n as f64).sqrt();
    let cols = std::array::from_fn(|u| (blocks[u][0], blocks[u][1]));
    FluorescenceSuperops { cols, laser: laser_state(hval) }
}

/// Discrete fluorescence chain at a fixed `n`; the unitary depends only on
/// `n`, so its blocks are built once.
#[derive(Clone, Debug)]
pub struct FluorescenceChain {
    pub model: FluorescenceModel,
    pub laser: LaserProfile,
    pub n: usize,
    blocks: [[Matrix2; 4]; 4],
}

impl FluorescenceChain {
    pub fn new(model: FluorescenceModel, laser: LaserProfile, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("n must be positive"));
        }
        let blocks = model.blocks(1.0 / n as f64, 2)?;
        Ok(FluorescenceChain { model, laser, n, blocks })
    }

    pub fn superops(&self, k: usize) -> FluorescenceSuperops {
        superops_from(&self.blocks, k, self.n, &self.laser)
    }
}

impl ChainDynamics for FluorescenceChain {
    fn bounds(&self) -> ControlBounds {
        ControlBounds::default()
    }

    #[inline]
    fn branches(&self, k: usize, n: usize, _u: f64, rho: &Matrix2) -> Result<(Matrix2, Matrix2)> {
        if n != self.n {
            return Err(Error::config(format!("chain built for n = {} driven with n = {n}", self.n)));
        }
        Ok(self.superops(k).both(rho))
    }
}

/// The jump-equation limit of the fluorescence chain.
#[derive(Clone, Debug)]
pub struct FluorescenceLimit {
    pub model: FluorescenceModel,
    pub laser: LaserProfile,
}

impl FluorescenceLimit {
    pub fn new(model: FluorescenceModel, laser: LaserProfile) -> Self {
        FluorescenceLimit { model, laser }
    }
}

impl JumpDynamics for FluorescenceLimit {
    fn bounds(&self) -> ControlBounds {
        ControlBounds::default()
    }

    #[inline]
    fn drift(&self, t: f64, _u: f64, rho: &Matrix2) -> Matrix2 {
        self.model.drift(self.laser.eval(t), rho)
    }

    #[inline]
    fn jump(&self, _t: f64, _u: f64, rho: &Matrix2) -> Matrix2 {
        self.model.jump(rho)
    }

    fn intensity_bound(&self, _horizon: f64) -> Result<f64> {
        let l = self.model.l20;
        finish_bound((l.adjoint() * l).hermitian_eigenvalues().1)
    }
}

/// `samples` discrete fluorescence runs on `[0, horizon]`.
pub fn simulate_fluorescence_discrete(
    model: &FluorescenceModel,
    laser: &LaserProfile,
    cfg: &ChainConfig,
    samples: usize,
    seed: u64,
) -> Result<Vec<DiscreteTrajectory>> {
    let chain = FluorescenceChain::new(*model, laser.clone(), cfg.n)?;
    simulate_chains(&chain, &Strategy::constant(0.0), cfg, samples, seed)
}

/// `samples` paths of the jump-equation limit.
pub fn integrate_fluorescence_limit(
    model: &FluorescenceModel,
    laser: &LaserProfile,
    cfg: &IntegratorConfig,
    samples: usize,
    seed: u64,
) -> Result<Vec<JumpPath>> {
    let limit = FluorescenceLimit::new(*model, laser.clone());
    integrate_jump_ensemble(&limit, &Strategy::constant(0.0), cfg, samples, seed)
}

/// Histogram and moments of per-run event counts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhotonStatistics {
    pub runs: usize,
    pub histogram: BTreeMap<usize, usize>,
    pub mean: f64,
    /// Unbiased sample variance (0 for a single run).
    pub variance: f64,
}

impl PhotonStatistics {
    pub fn runs_with_at_least(&self, k: usize) -> usize {
        self.histogram.range(k..).map(|(_, c)| c).sum()
    }
}

pub fn photon_statistics(counts: &[usize]) -> Result<PhotonStatistics> {
    if counts.is_empty() {
        return Err(Error::config("photon statistics need at least one run"));
    }
    let mut histogram = BTreeMap::new();
    for &c in counts {
        *histogram.entry(c).or_insert(0) += 1;
    }
    let m = counts.len() as f64;
    let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / m;
    let variance = if counts.len() > 1 {
        counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    Ok(PhotonStatistics { runs: counts.len(), histogram, mean, variance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn laser_state_examples() {
        assert_eq!(*laser_state(c(0.0, 0.0)).matrix(), Matrix2::diag(1.0, 0.0));
        let m = *laser_state(c(1.0, 0.0)).matrix();
        assert!((m - Matrix2::from_real(0.5, 0.5, 0.5, 0.5)).max_abs() < 1e-15);
        for h in [c(0.3, -2.0), c(-7.0, 0.1), c(1e-4, 1e-4)] {
            let m = *laser_state(h).matrix();
            assert!(m.det().norm() < 1e-14);
            assert!((m.trace() - 1.0).norm() < 1e-14);
        }
    }

    #[test]
    fn trivial_model_is_identity() {
        let m = FluorescenceModel::new(Matrix2::zero(), Matrix2::zero(), Matrix2::zero()).unwrap();
        let s = fluorescence_superops(3, 100, &LaserProfile::off(), &m).unwrap();
        let rho = Matrix2::from_real(0.3, 0.1, 0.1, 0.7);
        let (l0, l1) = s.both(&rho);
        assert!((l0 - rho).max_abs() < 1e-15);
        assert_eq!(l1.max_abs(), 0.0);
    }

    #[test]
    fn click_rate_matches_jump_intensity() {
        let m = FluorescenceModel::new(
            Matrix2::sigma_z().scale(0.3),
            Matrix2::sigma_minus().scale(0.6),
            Matrix2::new(c(0.1, 0.0), c(0.8, 0.2), c(0.0, 0.0), c(-0.2, 0.1)),
        )
        .unwrap();
        let rho = *crate::qcore::from_bloch(crate::qcore::BlochVector::new(0.1, -0.3, 0.5)).unwrap().matrix();
        let laser = LaserProfile::constant(1.0);
        for n in [256usize, 4096, 65536] {
            let s = fluorescence_superops(0, n, &laser, &m).unwrap();
            let rate = n as f64 * s.apply(1, &rho).trace().re;
            assert!((rate - m.jump(&rho).trace().re).abs() <= 10.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn chain_mean_generator_matches_limit() {
        let m = FluorescenceModel::new(
            Matrix2::sigma_x().scale(0.4),
            Matrix2::new(c(0.0, 0.0), c(0.7, -0.2), c(0.1, 0.0), c(0.0, 0.0)),
            Matrix2::sigma_minus().scale(0.5),
        )
        .unwrap();
        let f = c(0.8, 0.3);
        let laser = LaserProfile::Constant(f);
        let rho = *crate::qcore::from_bloch(crate::qcore::BlochVector::new(-0.2, 0.4, 0.3)).unwrap().matrix();
        let exact = m.lindblad(f, &rho);
        let n = 1usize << 20;
        let s = fluorescence_superops(0, n, &laser, &m).unwrap();
        let (l0, l1) = s.both(&rho);
        let approx = (l0 + l1 - rho).scale(n as f64);
        assert!((approx - exact).max_abs() < 1e-2, "{approx} vs {exact}");
    }

    #[test]
    fn drift_is_traceless() {
        let m = FluorescenceModel::decay(0.6, 0.8);
        let rho = Matrix2::from_real(0.4, 0.2, 0.2, 0.6);
        assert!(m.drift(c(2.0, -1.0), &rho).trace().norm() < 1e-14);
    }

    #[test]
    fn parses_laser_envelopes() {
        assert_eq!(LaserProfile::parse("const:2").unwrap().eval(5.0), c(2.0, 0.0));
        assert_eq!(LaserProfile::parse("const:1:-1").unwrap().eval(0.0), c(1.0, -1.0));
        let s = LaserProfile::parse("sin:2:3").unwrap();
        assert_abs_diff_eq!(s.eval(0.5).re, 2.0 * 1.5f64.sin());
        assert!(LaserProfile::parse("sin:2").is_err());
        let t = LaserProfile::from_csv("t,re,im\n0,0,0\n1,2,-2\n").unwrap();
        assert_eq!(t.eval(0.25), c(0.5, -0.5));
        assert_eq!(t.eval(7.0), c(2.0, -2.0));
        assert!(LaserProfile::from_csv("0,0,0\n0,1,1\n").is_err());
    }

    #[test]
    fn photon_statistics_counts() {
        let s = photon_statistics(&[0, 0, 0]).unwrap();
        assert_eq!(s.histogram, BTreeMap::from([(0, 3)]));
        assert_eq!(s.variance, 0.0);
        let s = photon_statistics(&[0, 1, 2, 1]).unwrap();
        assert_eq!(s.mean, 1.0);
        assert_abs_diff_eq!(s.variance, 2.0 / 3.0);
        assert_eq!(s.runs_with_at_least(2), 1);
        assert!(photon_statistics(&[]).is_err());
    }
}
