//! Statistics for the discrete-to-continuous convergence experiments.
//!
//! Convergence in distribution is probed at fixed times with per-coordinate
//! two-sample Kolmogorov–Smirnov distances between an ensemble of discrete
//! chains and an ensemble of the matching continuous reference integrator.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::continuous::{integrate_diffusive_ensemble, integrate_jump_ensemble, IntegratorConfig, PathRecord};
use crate::discrete::{simulate_chains, steps_for, ChainConfig, MeasuredModel, Recording};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ObservableSpec};
use crate::qcore::{BlochVector, QubitState};
use crate::strategy::Strategy;

/// Standard deviation of the Kolmogorov distribution.
pub const KOLMOGOROV_SD: f64 = 0.2603;

/// Two-sample KS statistic `sup |F_a − F_b|`.
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::config("KS distance needs two nonempty samples"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let x = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Kolmogorov survival function `Q(λ) = 2 Σ (−1)^{j−1} e^{−2j²λ²}`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 * sum.abs() {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Asymptotic p-value of a KS statistic `d` with effective size `ne`, with
/// the usual small-sample correction.
fn ks_pvalue(d: f64, ne: f64) -> f64 {
    let s = ne.sqrt();
    kolmogorov_sf((s + 0.12 + 0.11 / s) * d)
}

/// Two-sample KS test: `(D, p)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let d = ks_distance(a, b)?;
    let (m, n) = (a.len() as f64, b.len() as f64);
    Ok((d, ks_pvalue(d, m * n / (m + n))))
}

/// One-sample KS test against a continuous CDF: `(D, p)`.
pub fn ks_one_sample(xs: &[f64], cdf: impl Fn(f64) -> f64) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::config("KS test needs a nonempty sample"));
    }
    let mut xs = xs.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    Ok((d, ks_pvalue(d, n)))
}

/// Standard deviation of the two-sample KS statistic for `m` vs `m` samples
/// under the null.
pub fn ks_noise(m: usize) -> f64 {
    KOLMOGOROV_SD * (2.0 / m as f64).sqrt()
}

/// Null quantile of the two-sample statistic, by bisection on [`kolmogorov_sf`].
pub fn ks_null_quantile(m: usize, n: usize, level: f64) -> f64 {
    let ne = (m * n) as f64 / (m + n) as f64;
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if ks_pvalue(mid, ne) > 1.0 - level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Pearson χ² goodness of fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ChiSquareFit {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// χ² fit of integer counts to `Poisson(lambda)`. Bins are merged left to
/// right until each expects at least 5; the last bin is the upper tail.
pub fn poisson_chi_square(counts: &[usize], lambda: f64) -> Result<ChiSquareFit> {
    if counts.is_empty() || !(lambda > 0.0) {
        return Err(Error::config("Poisson fit needs counts and a positive rate"));
    }
    let m = counts.len() as f64;
    let max = *counts.iter().max().unwrap();
    let mut observed = vec![0usize; max + 1];
    for &c in counts {
        observed[c] += 1;
    }
    // (expected, observed) per merged bin
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let mut pmf = (-lambda).exp();
    let mut cdf = 0.0;
    let mut acc = (0.0, 0.0);
    let mut k = 0usize;
    loop {
        acc.0 += m * pmf;
        acc.1 += observed.get(k).copied().unwrap_or(0) as f64;
        cdf += pmf;
        let tail = m * (1.0 - cdf);
        if acc.0 >= 5.0 && tail >= 5.0 {
            bins.push(acc);
            acc = (0.0, 0.0);
        }
        k += 1;
        pmf *= lambda / k as f64;
        if tail < 5.0 {
            let rest: usize = observed.iter().skip(k).sum();
            acc.0 += tail.max(0.0);
            acc.1 += rest as f64;
            break;
        }
    }
    match bins.last_mut() {
        Some(last) if acc.0 < 5.0 => {
            last.0 += acc.0;
            last.1 += acc.1;
        }
        _ => bins.push(acc),
    }
    if bins.len() < 2 {
        return Err(Error::config("too few samples for a χ² fit"));
    }
    let statistic: f64 = bins.iter().map(|(e, o)| (o - e).powi(2) / e).sum();
    let dof = bins.len() - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::config(e.to_string()))?;
    Ok(ChiSquareFit { statistic, dof, p_value: dist.sf(statistic) })
}

/// Sample mean and unbiased covariance of Bloch vectors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Moments {
    pub mean: [f64; 3],
    pub covariance: [[f64; 3]; 3],
    pub samples: usize,
}

pub fn empirical_moments(samples: &[BlochVector]) -> Result<Moments> {
    if samples.len() < 2 {
        return Err(Error::config("moments need at least two samples"));
    }
    let m = samples.len() as f64;
    let mut mean = [0.0; 3];
    for s in samples {
        for (a, x) in mean.iter_mut().zip(s.to_array()) {
            *a += x / m;
        }
    }
    let mut covariance = [[0.0; 3]; 3];
    for s in samples {
        let d = s.to_array();
        for i in 0..3 {
            for j in 0..3 {
                covariance[i][j] += (d[i] - mean[i]) * (d[j] - mean[j]) / (m - 1.0);
            }
        }
    }
    Ok(Moments { mean, covariance, samples: samples.len() })
}

/// Bloch vectors of the records at time `t`, one per path.
pub fn bloch_at_time<'a>(paths: impl IntoIterator<Item = &'a [PathRecord]>, t: f64) -> Result<Vec<BlochVector>> {
    paths
        .into_iter()
        .map(|recs| {
            recs.iter()
                .find(|r| (r.t - t).abs() <= 1e-9 * t.max(1.0))
                .map(|r| r.state.to_bloch())
                .ok_or_else(|| Error::config(format!("no record at t = {t}")))
        })
        .collect()
}

/// Reference-integrator settings of a convergence study.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReferenceSettings {
    /// Euler step (diffusive) or RK4 step (jump).
    pub dt: f64,
}

impl Default for ReferenceSettings {
    fn default() -> Self {
        ReferenceSettings { dt: 1e-4 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceConfig {
    pub n_list: Vec<usize>,
    pub times: Vec<f64>,
    pub samples: usize,
    pub reference: ReferenceSettings,
    pub rho0: QubitState,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    Diffusive,
    Jump,
}

/// Distances for one `(n, t)` pair.
#[derive(Clone, Debug, Serialize)]
pub struct Checkpoint {
    pub n: usize,
    pub t: f64,
    /// KS per Bloch coordinate.
    pub ks: [f64; 3],
    pub ks_max: f64,
    /// `|mean_discrete − mean_reference|` per coordinate.
    pub mean_gap: [f64; 3],
    /// Largest entrywise covariance difference.
    pub covariance_gap: f64,
}

/// Trend of `max KS` across the `n` list at one time.
#[derive(Clone, Debug, Serialize)]
pub struct Trend {
    pub t: f64,
    pub ks_max: Vec<f64>,
    /// Each step changes by at most `+2·noise`.
    pub non_increasing_within_noise: bool,
    /// First minus last exceeds `2·noise`.
    pub improves_beyond_noise: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub model: String,
    pub observable: String,
    pub strategy: String,
    pub reference: ReferenceKind,
    pub reference_settings: ReferenceSettings,
    pub n_list: Vec<usize>,
    pub times: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    /// Seed of each discrete ensemble, aligned with `n_list`.
    pub chain_seeds: Vec<u64>,
    pub ks_noise: f64,
    pub checkpoints: Vec<Checkpoint>,
    pub trends: Vec<Trend>,
    /// Raw Bloch samples: `(n, t, samples)`; `n = 0` marks the reference.
    #[serde(skip)]
    pub raw: Vec<(usize, f64, Vec<BlochVector>)>,
}

impl ConvergenceReport {
    pub fn checkpoint(&self, n: usize, t: f64) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.n == n && (c.t - t).abs() < 1e-12)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Stride that lands on every checkpoint step.
fn stride(steps: &[usize]) -> usize {
    steps.iter().fold(0, |g, &s| gcd(g, s)).max(1)
}

fn coordinate(samples: &[BlochVector], axis: usize) -> Vec<f64> {
    samples.iter().map(|v| v.get(axis)).collect()
}

/// Reference ensemble at each checkpoint time.
fn reference_samples(
    model: &ModelSpec,
    obs: &ObservableSpec,
    strategy: &Strategy,
    cfg: &ConvergenceConfig,
    horizon: f64,
) -> Result<(ReferenceKind, Vec<Vec<BlochVector>>)> {
    let base = IntegratorConfig::new(cfg.reference.dt, horizon, cfg.rho0);
    let dt = base.effective_dt();
    let steps: Vec<usize> = cfg.times.iter().map(|&t| (t / dt).round() as usize).collect();
    if steps.iter().zip(&cfg.times).any(|(&k, &t)| (k as f64 * dt - t).abs() > 1e-9) {
        return Err(Error::config("checkpoint times must lie on the reference grid"));
    }
    let icfg = base.with_record_every(stride(&steps));
    let pick = |recs: &[PathRecord], k: usize| -> Result<BlochVector> {
        recs.iter()
            .find(|r| r.step == k)
            .map(|r| r.state.to_bloch())
            .ok_or_else(|| Error::config("reference checkpoint not recorded"))
    };
    if obs.is_diagonal() {
        let paths = integrate_jump_ensemble(model, strategy, &icfg, cfg.samples, cfg.seed)?;
        let per_time = steps.iter().map(|&k| paths.iter().map(|p| pick(&p.records, k)).collect()).collect::<Result<_>>()?;
        Ok((ReferenceKind::Jump, per_time))
    } else {
        let paths = integrate_diffusive_ensemble(model, strategy, &icfg, cfg.samples, cfg.seed)?;
        let per_time = steps.iter().map(|&k| paths.iter().map(|p| pick(&p.records, k)).collect()).collect::<Result<_>>()?;
        Ok((ReferenceKind::Diffusive, per_time))
    }
}

/// Discrete ensembles for every `n` against one reference ensemble.
///
/// Diagonal observables are compared with the jump integrator, non-diagonal
/// ones with the diffusive integrator. The reference uses `seed`; the chain
/// ensemble for the `i`-th entry of `n_list` uses `seed + 1 + i`.
pub fn run_convergence(
    model: &ModelSpec,
    obs: &ObservableSpec,
    strategy: &Strategy,
    cfg: &ConvergenceConfig,
) -> Result<ConvergenceReport> {
    if cfg.n_list.is_empty() || cfg.times.is_empty() {
        return Err(Error::config("need at least one n and one checkpoint time"));
    }
    if cfg.samples < 2 {
        return Err(Error::config("need at least two samples"));
    }
    if cfg.times.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::config("checkpoint times must be positive"));
    }
    if !obs.is_diagonal() && (obs.p0.a00.re.abs() < 1e-15 || obs.p1.a00.re.abs() < 1e-15) {
        return Err(Error::DegenerateObservable(
            "the non-diagonal observable needs both projectors to overlap the reference state".into(),
        ));
    }
    let horizon = cfg.times.iter().copied().fold(0.0, f64::max);
    let (reference, ref_samples) = reference_samples(model, obs, strategy, cfg, horizon)?;
    let dynamics = MeasuredModel::new(model, obs);
    let mut checkpoints = Vec::new();
    let mut chain_seeds = Vec::new();
    let mut raw: Vec<(usize, f64, Vec<BlochVector>)> = Vec::new();
    for (ti, &t) in cfg.times.iter().enumerate() {
        raw.push((0, t, ref_samples[ti].clone()));
    }
    let ref_moments: Vec<Moments> = ref_samples.iter().map(|s| empirical_moments(s)).collect::<Result<_>>()?;
    for (i, &n) in cfg.n_list.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(1 + i as u64);
        chain_seeds.push(seed);
        let steps: Vec<usize> = cfg.times.iter().map(|&t| steps_for(n, t)).collect();
        let ccfg = ChainConfig::new(n, horizon, cfg.rho0).with_recording(Recording::every(stride(&steps)));
        let chains = simulate_chains(&dynamics, strategy, &ccfg, cfg.samples, seed)?;
        for (ti, &t) in cfg.times.iter().enumerate() {
            let samples: Vec<BlochVector> = chains
                .iter()
                .map(|c| c.state_at_step(steps[ti]).map(QubitState::to_bloch))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::config("chain checkpoint not recorded"))?;
            let mut ks = [0.0; 3];
            for (axis, d) in ks.iter_mut().enumerate() {
                *d = ks_distance(&coordinate(&samples, axis), &coordinate(&ref_samples[ti], axis))?;
            }
            let mom = empirical_moments(&samples)?;
            let rm = &ref_moments[ti];
            let mut covariance_gap = 0.0f64;
            for a in 0..3 {
                for b in 0..3 {
                    covariance_gap = covariance_gap.max((mom.covariance[a][b] - rm.covariance[a][b]).abs());
                }
            }
            checkpoints.push(Checkpoint {
                n,
                t,
                ks,
                ks_max: ks.iter().copied().fold(0.0, f64::max),
                mean_gap: std::array::from_fn(|a| (mom.mean[a] - rm.mean[a]).abs()),
                covariance_gap,
            });
            raw.push((n, t, samples));
        }
    }
    let noise = ks_noise(cfg.samples);
    let trends = cfg
        .times
        .iter()
        .map(|&t| {
            let ks_max: Vec<f64> = cfg
                .n_list
                .iter()
                .map(|&n| checkpoints.iter().find(|c| c.n == n && c.t == t).map_or(f64::NAN, |c| c.ks_max))
                .collect();
            Trend {
                t,
                non_increasing_within_noise: ks_max.windows(2).all(|w| w[1] <= w[0] + 2.0 * noise),
                improves_beyond_noise: ks_max.len() >= 2 && ks_max[0] - ks_max[ks_max.len() - 1] > 2.0 * noise,
                ks_max,
            }
        })
        .collect();
    Ok(ConvergenceReport {
        model: format!("{model:?}"),
        observable: format!("{:?}", obs.kind),
        strategy: strategy.label.clone(),
        reference,
        reference_settings: cfg.reference,
        n_list: cfg.n_list.clone(),
        times: cfg.times.clone(),
        samples: cfg.samples,
        seed: cfg.seed,
        chain_seeds,
        ks_noise: noise,
        checkpoints,
        trends,
        raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ks_examples() {
        let a = [0.3, 0.1, 0.7];
        assert_eq!(ks_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(ks_distance(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(ks_distance(&[0.0, 0.0, 1.0], &[0.0, 1.0, 1.0]).unwrap(), 1.0 / 3.0);
        assert!(ks_distance(&[], &a).is_err());
    }

    #[test]
    fn ks_uniform_samples_are_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        assert!(ks_distance(&a, &b).unwrap() <= 0.03);
    }

    #[test]
    fn kolmogorov_tail_values() {
        // Q(1.36) ≈ 0.05, Q(1.63) ≈ 0.01
        assert_abs_diff_eq!(kolmogorov_sf(1.3581), 0.05, epsilon = 5e-4);
        assert_abs_diff_eq!(kolmogorov_sf(1.6276), 0.01, epsilon = 2e-4);
        assert_eq!(kolmogorov_sf(0.0), 1.0);
    }

    #[test]
    fn poisson_fit_accepts_poisson_and_rejects_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pois = rand_distr::Poisson::new(6.0).unwrap();
        let xs: Vec<usize> = (0..5000).map(|_| rng.sample::<f64, _>(pois) as usize).collect();
        assert!(poisson_chi_square(&xs, 6.0).unwrap().p_value > 0.001);
        assert!(poisson_chi_square(&xs, 6.5).unwrap().p_value < 1e-6);
    }

    #[test]
    fn moments_of_identical_samples() {
        let v = BlochVector::new(0.1, 0.2, 0.3);
        let m = empirical_moments(&[v, v, v]).unwrap();
        assert_eq!(m.mean, [0.1, 0.2, 0.3]);
        assert!(m.covariance.iter().flatten().all(|c| c.abs() < 1e-30));
        assert!(empirical_moments(&[v]).is_err());
    }

    proptest! {
        #[test]
        fn ks_is_symmetric_and_bounded(
            a in proptest::collection::vec(-5.0f64..5.0, 1..40),
            b in proptest::collection::vec(-5.0f64..5.0, 1..40),
        ) {
            let d = ks_distance(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, ks_distance(&b, &a).unwrap());
        }
    }
}
