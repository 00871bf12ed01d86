//! Control strategies: open-loop `u(t)`, feedback `u(t, ρ)` and history-adapted
//! laws, plus the `det:` / `markov:` mini-language used by config files and the CLI.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::ControlBounds;
use crate::qcore::QubitState;

type OpenLoopFn = dyn Fn(f64) -> f64 + Send + Sync;
type FeedbackFn = dyn Fn(f64, &QubitState) -> f64 + Send + Sync;
type HistoryFn = dyn Fn(usize, &[QubitState]) -> f64 + Send + Sync;

#[derive(Clone)]
pub enum StrategyKind {
    Deterministic(Arc<OpenLoopFn>),
    Markovian(Arc<FeedbackFn>),
    /// `u_k` may depend on every visited state `ρ_0, …, ρ_k`. Only meaningful for
    /// the discrete chain.
    Adapted(Arc<HistoryFn>),
}

#[derive(Clone)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub continuous: bool,
    pub label: String,
}

impl Strategy {
    pub fn deterministic(label: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Strategy { kind: StrategyKind::Deterministic(Arc::new(f)), continuous: true, label: label.into() }
    }

    pub fn markovian(
        label: impl Into<String>,
        f: impl Fn(f64, &QubitState) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Strategy { kind: StrategyKind::Markovian(Arc::new(f)), continuous: true, label: label.into() }
    }

    pub fn adapted(
        label: impl Into<String>,
        f: impl Fn(usize, &[QubitState]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Strategy { kind: StrategyKind::Adapted(Arc::new(f)), continuous: false, label: label.into() }
    }

    pub fn constant(u: f64) -> Self {
        Strategy::deterministic(format!("det:const:{u}"), move |_| u)
    }

    pub fn is_adapted(&self) -> bool {
        matches!(self.kind, StrategyKind::Adapted(_))
    }

    /// Control value at time `t` and state `rho`, checked against `bounds`.
    ///
    /// Adapted strategies need the state history; use [`Strategy::control_with_history`].
    #[inline]
    pub fn control(&self, t: f64, rho: &QubitState, bounds: &ControlBounds) -> Result<f64> {
        let u = match &self.kind {
            StrategyKind::Deterministic(f) => f(t),
            StrategyKind::Markovian(f) => f(t, rho),
            StrategyKind::Adapted(_) => {
                return Err(Error::config(format!(
                    "strategy '{}' depends on the whole history and cannot drive this simulator",
                    self.label
                )))
            }
        };
        bounds.check(u)
    }

    pub fn control_with_history(&self, k: usize, t: f64, history: &[QubitState], bounds: &ControlBounds) -> Result<f64> {
        match &self.kind {
            StrategyKind::Adapted(f) => bounds.check(f(k, history)),
            _ => self.control(t, history.last().expect("non-empty history"), bounds),
        }
    }
}

impl fmt::Debug for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Strategy").field("label", &self.label).finish()
    }
}

/// Parses the strategy mini-language.
///
/// * `det:const:<v>`
/// * `det:sin[:<amp>[:<freq>[:<phase>]]]` — `amp·sin(freq·t + phase)`, defaults `0.5:1:0`
/// * `det:linear:<a>:<b>` — `a + b·t`
/// * `markov:bloch_x_gain[:<g>]` (also `_y_`, `_z_`) — `g·coordinate(ρ)`, default `g = 0.5`
/// * `markov:bang_bang[:<axis>]` — `max` when the coordinate is negative, `min` otherwise
///
/// Open-loop values are checked against `bounds`; feedback laws are clamped to them.
pub fn parse_strategy(text: &str, bounds: ControlBounds) -> Result<Strategy> {
    let parts: Vec<&str> = text.split(':').collect();
    let nums = |from: usize| -> Result<Vec<f64>> {
        parts[from.min(parts.len())..]
            .iter()
            .map(|p| p.parse::<f64>().map_err(|_| Error::config(format!("bad number '{p}' in strategy '{text}'"))))
            .collect()
    };
    let arg = |v: &[f64], i: usize, default: f64| v.get(i).copied().unwrap_or(default);
    let label = text.to_string();
    let strategy = match (parts.first().copied(), parts.get(1).copied()) {
        (Some("det"), Some("const")) => {
            let v = nums(2)?;
            if v.len() != 1 {
                return Err(Error::config("det:const takes exactly one value"));
            }
            let u = bounds.check(v[0])?;
            Strategy::deterministic(label, move |_| u)
        }
        (Some("det"), Some("sin")) => {
            let v = nums(2)?;
            let (amp, freq, phase) = (arg(&v, 0, 0.5), arg(&v, 1, 1.0), arg(&v, 2, 0.0));
            if amp.abs() > bounds.max.min(-bounds.min) + 1e-15 {
                return Err(Error::config(format!("sine amplitude {amp} leaves the control interval")));
            }
            Strategy::deterministic(label, move |t| amp * (freq * t + phase).sin())
        }
        (Some("det"), Some("linear")) => {
            let v = nums(2)?;
            if v.len() != 2 {
                return Err(Error::config("det:linear takes two values"));
            }
            let (a, b) = (v[0], v[1]);
            Strategy::deterministic(label, move |t| a + b * t)
        }
        (Some("markov"), Some(name)) if name.starts_with("bloch_") && name.ends_with("_gain") => {
            let axis = axis_index(&name[6..name.len() - 5])?;
            let g = arg(&nums(2)?, 0, 0.5);
            Strategy::markovian(label, move |_, rho| bounds.clamp(g * rho.to_bloch().get(axis)))
        }
        (Some("markov"), Some("bang_bang")) => {
            let axis = match parts.get(2) {
                Some(a) => axis_index(a)?,
                None => 0,
            };
            Strategy::markovian(label, move |_, rho| {
                if rho.to_bloch().get(axis) < 0.0 {
                    bounds.max
                } else {
                    bounds.min
                }
            })
        }
        _ => return Err(Error::config(format!("unknown strategy '{text}'"))),
    };
    Ok(strategy)
}

fn axis_index(name: &str) -> Result<usize> {
    match name {
        "x" => Ok(0),
        "y" => Ok(1),
        "z" => Ok(2),
        other => Err(Error::config(format!("unknown Bloch axis '{other}'"))),
    }
}
