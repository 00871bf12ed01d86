//! Control-dependent interaction model: Hamiltonian and coupling families, the
//! measured observable, the repeated-interaction unitary and the superoperators
//! of both continuous limits.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qcore::{Matrix2, C64};

/// Jump guard: `Q` is switched off when `Tr J ≤ JUMP_RATE_EPS`.
pub const JUMP_RATE_EPS: f64 = 1e-12;

const MODEL_HERMITIAN_TOL: f64 = 1e-12;

/// Closed admissible control interval `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    pub min: f64,
    pub max: f64,
}

impl ControlBounds {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min <= max) {
            return Err(Error::config(format!("invalid control interval [{min}, {max}]")));
        }
        Ok(ControlBounds { min, max })
    }

    pub fn contains(&self, u: f64) -> bool {
        u >= self.min && u <= self.max
    }

    pub fn clamp(&self, u: f64) -> f64 {
        u.clamp(self.min, self.max)
    }

    pub fn check(&self, u: f64) -> Result<f64> {
        if self.contains(u) {
            Ok(u)
        } else {
            Err(Error::config(format!("control value {u} outside [{}, {}]", self.min, self.max)))
        }
    }

    /// `count` equally spaced values from `min` to `max` inclusive.
    pub fn grid(&self, count: usize) -> Vec<f64> {
        match count {
            0 => Vec::new(),
            1 => vec![0.5 * (self.min + self.max)],
            _ => (0..count)
                .map(|i| self.min + (self.max - self.min) * i as f64 / (count - 1) as f64)
                .collect(),
        }
    }
}

impl Default for ControlBounds {
    fn default() -> Self {
        ControlBounds { min: -1.0, max: 1.0 }
    }
}

type MatrixFn = dyn Fn(f64, f64) -> Matrix2 + Send + Sync;

/// A matrix-valued function of `(t, u)`.
#[derive(Clone)]
pub enum OperatorFamily {
    /// `base + u·slope_u + t·slope_t`
    Affine { base: Matrix2, slope_u: Matrix2, slope_t: Matrix2 },
    Custom(Arc<MatrixFn>),
}

impl OperatorFamily {
    pub fn constant(m: Matrix2) -> Self {
        OperatorFamily::Affine { base: m, slope_u: Matrix2::zero(), slope_t: Matrix2::zero() }
    }

    pub fn linear(base: Matrix2, slope_u: Matrix2) -> Self {
        OperatorFamily::Affine { base, slope_u, slope_t: Matrix2::zero() }
    }

    pub fn custom(f: impl Fn(f64, f64) -> Matrix2 + Send + Sync + 'static) -> Self {
        OperatorFamily::Custom(Arc::new(f))
    }

    #[inline]
    pub fn eval(&self, t: f64, u: f64) -> Matrix2 {
        match self {
            OperatorFamily::Affine { base, slope_u, slope_t } => {
                let mut m = *base;
                if u != 0.0 {
                    m += slope_u.scale(u);
                }
                if t != 0.0 {
                    m += slope_t.scale(t);
                }
                m
            }
            OperatorFamily::Custom(f) => f(t, u),
        }
    }
}

impl fmt::Debug for OperatorFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OperatorFamily::Affine { base, slope_u, slope_t } => f
                .debug_struct("Affine")
                .field("base", base)
                .field("slope_u", slope_u)
                .field("slope_t", slope_t)
                .finish(),
            OperatorFamily::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Hamiltonian `H(t,u)`, coupling `C(t,u)` and the admissible control interval.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub hamiltonian: OperatorFamily,
    pub coupling: OperatorFamily,
    pub bounds: ControlBounds,
    /// Declared continuity of `(t,u) ↦ (H, C)`.
    pub continuous: bool,
}

impl ModelSpec {
    pub fn new(hamiltonian: OperatorFamily, coupling: OperatorFamily, bounds: ControlBounds) -> Self {
        ModelSpec { hamiltonian, coupling, bounds, continuous: true }
    }

    /// Time-independent model with constant `H` and `C`.
    pub fn constant(h: Matrix2, c: Matrix2) -> Self {
        ModelSpec::new(OperatorFamily::constant(h), OperatorFamily::constant(c), ControlBounds::default())
    }

    /// `H = ½σ_z + u σ_x`, `C = σ⁻`, `u ∈ [-1, 1]`.
    pub fn desk() -> Self {
        ModelSpec::new(
            OperatorFamily::linear(Matrix2::sigma_z().scale(0.5), Matrix2::sigma_x()),
            OperatorFamily::constant(Matrix2::sigma_minus()),
            ControlBounds::default(),
        )
    }

    #[inline]
    pub fn h(&self, t: f64, u: f64) -> Matrix2 {
        self.hamiltonian.eval(t, u)
    }

    #[inline]
    pub fn c(&self, t: f64, u: f64) -> Matrix2 {
        self.coupling.eval(t, u)
    }

    /// Hamiltonian at `(t,u)`, rejected when not Hermitian.
    pub fn checked_h(&self, t: f64, u: f64) -> Result<Matrix2> {
        let h = self.h(t, u);
        let defect = h.hermiticity_defect();
        if !(defect <= MODEL_HERMITIAN_TOL) {
            return Err(Error::model(format!("H({t}, {u}) is not Hermitian (defect {defect:e})")));
        }
        Ok(h)
    }

    /// Samples a `(t, u)` grid on `[0, t_end] × bounds` and checks Hermiticity of `H`
    /// and finiteness of `C`.
    pub fn validate(&self, t_end: f64) -> Result<()> {
        for (t, u) in time_control_grid(t_end, self.bounds, 11) {
            self.checked_h(t, u)?;
            if !self.c(t, u).is_finite() {
                return Err(Error::model(format!("C({t}, {u}) has non-finite entries")));
            }
        }
        Ok(())
    }

    /// `J(ρ) = C ρ C*`
    #[inline]
    pub fn superop_j(&self, t: f64, u: f64, rho: &Matrix2) -> Matrix2 {
        self.c(t, u).sandwich(rho)
    }

    /// Lindblad generator `−i[H,ρ] − ½{C*C, ρ} + CρC*`.
    #[inline]
    pub fn superop_l(&self, t: f64, u: f64, rho: &Matrix2) -> Matrix2 {
        lindblad(&self.h(t, u), &self.c(t, u), rho)
    }

    /// Diffusive innovation `Cρ + ρC* − Tr[ρ(C + C*)] ρ`.
    #[inline]
    pub fn superop_theta(&self, t: f64, u: f64, rho: &Matrix2) -> Matrix2 {
        theta(&self.c(t, u), rho)
    }

    /// Jump drift `R = L + Tr[J] ρ − J`.
    #[inline]
    pub fn superop_r(&self, t: f64, u: f64, rho: &Matrix2) -> Matrix2 {
        let c = self.c(t, u);
        let j = c.sandwich(rho);
        lindblad(&self.h(t, u), &c, rho) + rho.scale_c(j.trace()) - j
    }

    /// Jump update `Q = J / Tr J − ρ`, zero when `Tr J ≤ JUMP_RATE_EPS`.
    #[inline]
    pub fn superop_q(&self, t: f64, u: f64, rho: &Matrix2) -> Matrix2 {
        jump_update(&self.superop_j(t, u, rho), rho)
    }

    /// First block column `(L₀₀, L₁₀)` of the interaction unitary for step `h`.
    ///
    /// Starts from `L₀₀ = I + h(−iH − ½C*C)`, `L₁₀ = √h C` and rescales the
    /// column on the right by `S^{-1/2}`, `S = L₀₀*L₀₀ + L₁₀*L₁₀`, so that the
    /// column is an exact isometry.
    pub fn kraus_column(&self, h: f64, t: f64, u: f64) -> Result<(Matrix2, Matrix2)> {
        let ham = self.checked_h(t, u)?;
        let c = self.c(t, u);
        let col = first_order_columns(h, &ham, &[c], 1);
        let mut col = col.into_iter().next().expect("one column");
        orthonormalize_column(&mut col)?;
        Ok((col[0], col[1]))
    }

    /// Full 4×4 interaction unitary in blocks.
    pub fn build_unitary(&self, h: f64, t: f64, u: f64) -> Result<UnitaryBlocks> {
        if !(h > 0.0 && h <= 1.0) {
            return Err(Error::config(format!("time step {h} outside (0, 1]")));
        }
        let ham = self.checked_h(t, u)?;
        let c = self.c(t, u);
        let mut cols = first_order_columns(h, &ham, &[c], 2);
        block_gram_schmidt(&mut cols)?;
        Ok(UnitaryBlocks { l00: cols[0][0], l10: cols[0][1], l01: cols[1][0], l11: cols[1][1] })
    }
}

/// Evenly spaced `(t, u)` pairs on `[0, t_end] × bounds`, `per_axis` points per axis.
pub(crate) fn time_control_grid(t_end: f64, bounds: ControlBounds, per_axis: usize) -> Vec<(f64, f64)> {
    let per_axis = per_axis.max(2);
    let us = bounds.grid(per_axis);
    let mut out = Vec::with_capacity(per_axis * per_axis);
    for i in 0..per_axis {
        let t = t_end * i as f64 / (per_axis - 1) as f64;
        for &u in &us {
            out.push((t, u));
        }
    }
    out
}

#[inline]
pub fn lindblad(h: &Matrix2, c: &Matrix2, rho: &Matrix2) -> Matrix2 {
    let cdc = c.adjoint() * *c;
    h.commutator(rho).scale_c(C64::new(0.0, -1.0)) - cdc.anticommutator(rho).scale(0.5) + c.sandwich(rho)
}

#[inline]
pub fn theta(c: &Matrix2, rho: &Matrix2) -> Matrix2 {
    let crho = *c * *rho;
    let rhocd = *rho * c.adjoint();
    let tr = (crho + rhocd).trace();
    crho + rhocd - rho.scale_c(tr)
}

/// `J / Tr J − ρ` with the `Tr J > JUMP_RATE_EPS` indicator.
#[inline]
pub fn jump_update(j: &Matrix2, rho: &Matrix2) -> Matrix2 {
    let rate = j.trace().re;
    if rate > JUMP_RATE_EPS {
        j.scale(1.0 / rate) - *rho
    } else {
        Matrix2::zero()
    }
}

/// Block columns `0..ncols` of `I + √h A + h(−i H⊗I + ½A²)` where `A` has
/// `A_{i0} = C_i` and `A_{0i} = −C_i*`. Each column holds `couplings.len() + 1`
/// blocks.
pub(crate) fn first_order_columns(h: f64, ham: &Matrix2, couplings: &[Matrix2], ncols: usize) -> Vec<Vec<Matrix2>> {
    let dim = couplings.len() + 1;
    let sh = h.sqrt();
    let minus_i_h = ham.scale_c(C64::new(0.0, -h));
    let coupling = |i: usize| -> Matrix2 { couplings[i - 1] };
    // (A²)_{00} = −Σ C_i*C_i, (A²)_{ij} = −C_i C_j* for i, j ≥ 1.
    let a2 = |i: usize, j: usize| -> Matrix2 {
        match (i, j) {
            (0, 0) => -couplings.iter().fold(Matrix2::zero(), |acc, c| acc + c.adjoint() * *c),
            (0, _) | (_, 0) => Matrix2::zero(),
            _ => -(coupling(i) * coupling(j).adjoint()),
        }
    };
    (0..ncols.min(dim))
        .map(|j| {
            (0..dim)
                .map(|i| {
                    let mut block = a2(i, j).scale(0.5 * h);
                    if i == j {
                        block += Matrix2::identity() + minus_i_h;
                    }
                    if j == 0 && i > 0 {
                        block += coupling(i).scale(sh);
                    } else if i == 0 && j > 0 {
                        block += -coupling(j).adjoint().scale(sh);
                    }
                    block
                })
                .collect()
        })
        .collect()
}

/// Right-multiplies a block column by `(Σ Bᵣ*Bᵣ)^{-1/2}`.
pub(crate) fn orthonormalize_column(col: &mut [Matrix2]) -> Result<()> {
    let gram = col.iter().fold(Matrix2::zero(), |acc, b| acc + b.adjoint() * *b);
    let norm = gram.inv_sqrt_psd()?;
    for b in col.iter_mut() {
        *b = *b * norm;
    }
    Ok(())
}

/// Block Gram–Schmidt over block columns, leaving an isometry.
pub(crate) fn block_gram_schmidt(cols: &mut [Vec<Matrix2>]) -> Result<()> {
    for j in 0..cols.len() {
        let (done, rest) = cols.split_at_mut(j);
        let w = &mut rest[0];
        for q in done.iter() {
            let overlap = q.iter().zip(w.iter()).fold(Matrix2::zero(), |acc, (qb, wb)| acc + qb.adjoint() * *wb);
            for (wb, qb) in w.iter_mut().zip(q.iter()) {
                *wb = *wb - *qb * overlap;
            }
        }
        orthonormalize_column(w)?;
    }
    Ok(())
}

/// The 4×4 interaction unitary in the basis `Ω⊗Ω, X⊗Ω, Ω⊗X, X⊗X`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitaryBlocks {
    pub l00: Matrix2,
    pub l01: Matrix2,
    pub l10: Matrix2,
    pub l11: Matrix2,
}

impl UnitaryBlocks {
    pub fn identity() -> Self {
        UnitaryBlocks {
            l00: Matrix2::identity(),
            l01: Matrix2::zero(),
            l10: Matrix2::zero(),
            l11: Matrix2::identity(),
        }
    }

    /// Dense row-major 4×4 matrix; index `atom + 2·env`.
    pub fn assemble(&self) -> [[C64; 4]; 4] {
        let mut out = [[C64::new(0.0, 0.0); 4]; 4];
        let blocks = [[self.l00, self.l01], [self.l10, self.l11]];
        for (bi, row) in blocks.iter().enumerate() {
            for (bj, b) in row.iter().enumerate() {
                let e = b.entries();
                out[2 * bi][2 * bj] = e[0];
                out[2 * bi][2 * bj + 1] = e[1];
                out[2 * bi + 1][2 * bj] = e[2];
                out[2 * bi + 1][2 * bj + 1] = e[3];
            }
        }
        out
    }

    /// `max |U*U − I|` entrywise.
    pub fn unitarity_defect(&self) -> f64 {
        let u = self.assemble();
        let mut worst = 0.0f64;
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = C64::new(0.0, 0.0);
                for k in 0..4 {
                    acc += u[k][i].conj() * u[k][j];
                }
                if i == j {
                    acc -= 1.0;
                }
                worst = worst.max(acc.norm());
            }
        }
        worst
    }
}

/// Whether the observable is diagonal in the basis `(Ω, X)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservableKind {
    Diagonal,
    Nondiagonal,
}

/// Two-outcome observable `A = λ₀P₀ + λ₁P₁` on the probe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ObservableSpec {
    pub kind: ObservableKind,
    pub p0: Matrix2,
    pub p1: Matrix2,
    pub lambda0: f64,
    pub lambda1: f64,
    /// Mixing angle for the non-diagonal family, 0 for diagonal.
    pub alpha: f64,
}

impl ObservableSpec {
    /// `P₀ = |Ω⟩⟨Ω|`, `P₁ = |X⟩⟨X|`.
    pub fn diagonal() -> Self {
        ObservableSpec {
            kind: ObservableKind::Diagonal,
            p0: Matrix2::diag(1.0, 0.0),
            p1: Matrix2::diag(0.0, 1.0),
            lambda0: 0.0,
            lambda1: 1.0,
            alpha: 0.0,
        }
    }

    /// `P₀ = |cos α Ω + sin α X⟩⟨·|`, `α ∈ (0, π/2)`.
    pub fn nondiagonal(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < FRAC_PI_2) {
            return Err(Error::DegenerateObservable(format!(
                "mixing angle {alpha} outside (0, pi/2); both p00 and q00 must be nonzero"
            )));
        }
        let (s, c) = alpha.sin_cos();
        let p0 = Matrix2::from_real(c * c, c * s, c * s, s * s);
        Ok(ObservableSpec {
            kind: ObservableKind::Nondiagonal,
            p0,
            p1: Matrix2::identity() - p0,
            lambda0: 0.0,
            lambda1: 1.0,
            alpha,
        })
    }

    /// Builds an observable from an arbitrary eigenprojector and validates it.
    pub fn from_projector(p0: Matrix2, lambda0: f64, lambda1: f64) -> Result<Self> {
        let p1 = Matrix2::identity() - p0;
        let defect = (p0 * p0 - p0).max_abs().max(p0.hermiticity_defect());
        if defect > 1e-12 {
            return Err(Error::model(format!("P0 is not an orthogonal projector (defect {defect:e})")));
        }
        if (p0.trace().re - 1.0).abs() > 1e-12 {
            return Err(Error::model("P0 must have rank one"));
        }
        if lambda0 == lambda1 {
            return Err(Error::model("observable eigenvalues must differ"));
        }
        let off = p0.a01.norm();
        let kind = if off > 1e-15 { ObservableKind::Nondiagonal } else { ObservableKind::Diagonal };
        if kind == ObservableKind::Nondiagonal && (p0.a00.norm() < 1e-15 || p1.a00.norm() < 1e-15) {
            return Err(Error::DegenerateObservable("p00 and q00 must both be nonzero".into()));
        }
        let alpha = if kind == ObservableKind::Diagonal { 0.0 } else { p0.a00.re.sqrt().acos() };
        Ok(ObservableSpec { kind, p0, p1, lambda0, lambda1, alpha })
    }

    pub fn projector(&self, i: usize) -> &Matrix2 {
        if i == 0 {
            &self.p0
        } else {
            &self.p1
        }
    }

    pub fn is_diagonal(&self) -> bool {
        self.kind == ObservableKind::Diagonal
    }
}

/// Unnormalized branch maps `(ℒ₀, ℒ₁)` for one interaction.
#[derive(Clone, Copy, Debug)]
pub struct MeasurementSuperops {
    pub l00: Matrix2,
    pub l10: Matrix2,
    pub p0: Matrix2,
    pub p1: Matrix2,
}

impl MeasurementSuperops {
    pub fn new(l00: Matrix2, l10: Matrix2, obs: &ObservableSpec) -> Self {
        MeasurementSuperops { l00, l10, p0: obs.p0, p1: obs.p1 }
    }

    /// `ℒᵢ(ρ) = p₀₀ L₀₀ρL₀₀* + p₁₀ L₀₀ρL₁₀* + p₀₁ L₁₀ρL₀₀* + p₁₁ L₁₀ρL₁₀*`
    /// with `p` the entries of `Pᵢ`; this is `Tr_env[(I⊗Pᵢ)U(ρ⊗β)U*]`. For a
    /// real projector the two off-diagonal entries coincide.
    #[inline]
    pub fn apply(&self, i: usize, rho: &Matrix2) -> Matrix2 {
        let p = if i == 0 { &self.p0 } else { &self.p1 };
        let a = self.l00 * *rho;
        let b = self.l10 * *rho;
        let l00d = self.l00.adjoint();
        let l10d = self.l10.adjoint();
        let mut out = (a * l00d).scale_c(p.a00) + (b * l10d).scale_c(p.a11);
        if p.a01 != C64::new(0.0, 0.0) || p.a10 != C64::new(0.0, 0.0) {
            out += (a * l10d).scale_c(p.a10) + (b * l00d).scale_c(p.a01);
        }
        out
    }

    #[inline]
    pub fn both(&self, rho: &Matrix2) -> (Matrix2, Matrix2) {
        (self.apply(0, rho), self.apply(1, rho))
    }
}

/// Branch maps for the unitary `u` and observable `obs`.
pub fn measurement_superops(u: &UnitaryBlocks, obs: &ObservableSpec) -> MeasurementSuperops {
    MeasurementSuperops::new(u.l00, u.l10, obs)
}

// ---------------------------------------------------------------------------
// JSON documents

/// Matrix literal: a Pauli name or a 2×2 nested array whose entries are numbers
/// or `[re, im]` pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixJson {
    Named(String),
    Rows([[ComplexJson; 2]; 2]),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ComplexJson {
    Real(f64),
    Pair([f64; 2]),
}

impl ComplexJson {
    fn value(self) -> C64 {
        match self {
            ComplexJson::Real(r) => C64::new(r, 0.0),
            ComplexJson::Pair([re, im]) => C64::new(re, im),
        }
    }
}

impl MatrixJson {
    pub fn to_matrix(&self) -> Result<Matrix2> {
        match self {
            MatrixJson::Rows(r) => Ok(Matrix2::new(r[0][0].value(), r[0][1].value(), r[1][0].value(), r[1][1].value())),
            MatrixJson::Named(name) => named_matrix(name),
        }
    }

    pub fn from_matrix(m: &Matrix2) -> Self {
        let c = |z: C64| ComplexJson::Pair([z.re, z.im]);
        MatrixJson::Rows([[c(m.a00), c(m.a01)], [c(m.a10), c(m.a11)]])
    }
}

fn named_matrix(name: &str) -> Result<Matrix2> {
    Ok(match name {
        "zero" => Matrix2::zero(),
        "identity" | "id" => Matrix2::identity(),
        "sigma_x" | "sx" => Matrix2::sigma_x(),
        "sigma_y" | "sy" => Matrix2::sigma_y(),
        "sigma_z" | "sz" => Matrix2::sigma_z(),
        "sigma_minus" | "sm" => Matrix2::sigma_minus(),
        "sigma_plus" | "sp" => Matrix2::sigma_plus(),
        other => return Err(Error::config(format!("unknown matrix name '{other}'"))),
    })
}

/// Parametric operator family as written in model files.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "lowercase", deny_unknown_fields)]
pub enum FamilyJson {
    /// `value`
    Constant { value: MatrixJson },
    /// `base + u·slope`
    Linear {
        #[serde(alias = "H0", alias = "C0")]
        base: MatrixJson,
        #[serde(alias = "H1", alias = "C1")]
        slope: MatrixJson,
    },
    /// `base + u·u_slope + t·t_slope`
    Affine {
        base: MatrixJson,
        #[serde(default = "zero_json")]
        u_slope: MatrixJson,
        #[serde(default = "zero_json")]
        t_slope: MatrixJson,
    },
}

fn zero_json() -> MatrixJson {
    MatrixJson::Named("zero".into())
}

impl FamilyJson {
    pub fn to_family(&self) -> Result<OperatorFamily> {
        Ok(match self {
            FamilyJson::Constant { value } => OperatorFamily::constant(value.to_matrix()?),
            FamilyJson::Linear { base, slope } => OperatorFamily::linear(base.to_matrix()?, slope.to_matrix()?),
            FamilyJson::Affine { base, u_slope, t_slope } => OperatorFamily::Affine {
                base: base.to_matrix()?,
                slope_u: u_slope.to_matrix()?,
                slope_t: t_slope.to_matrix()?,
            },
        })
    }

    fn from_family(f: &OperatorFamily) -> Option<Self> {
        match f {
            OperatorFamily::Affine { base, slope_u, slope_t } => Some(FamilyJson::Affine {
                base: MatrixJson::from_matrix(base),
                u_slope: MatrixJson::from_matrix(slope_u),
                t_slope: MatrixJson::from_matrix(slope_t),
            }),
            OperatorFamily::Custom(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ObservableJson {
    Diagonal,
    Nondiagonal {
        #[serde(default = "quarter_pi")]
        alpha: f64,
    },
}

fn quarter_pi() -> f64 {
    std::f64::consts::FRAC_PI_4
}

impl ObservableJson {
    pub fn to_spec(self) -> Result<ObservableSpec> {
        match self {
            ObservableJson::Diagonal => Ok(ObservableSpec::diagonal()),
            ObservableJson::Nondiagonal { alpha } => ObservableSpec::nondiagonal(alpha),
        }
    }

    pub fn from_spec(obs: &ObservableSpec) -> Self {
        match obs.kind {
            ObservableKind::Diagonal => ObservableJson::Diagonal,
            ObservableKind::Nondiagonal => ObservableJson::Nondiagonal { alpha: obs.alpha },
        }
    }
}

/// Model file contents.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelJson {
    #[serde(rename = "H")]
    pub hamiltonian: FamilyJson,
    #[serde(rename = "C")]
    pub coupling: FamilyJson,
    #[serde(default = "default_bounds")]
    pub control: [f64; 2],
    #[serde(default)]
    pub observable: Option<ObservableJson>,
    #[serde(default = "yes")]
    pub continuous: bool,
}

fn default_bounds() -> [f64; 2] {
    [-1.0, 1.0]
}

fn yes() -> bool {
    true
}

impl ModelJson {
    pub fn to_model(&self) -> Result<(ModelSpec, Option<ObservableSpec>)> {
        let bounds = ControlBounds::new(self.control[0], self.control[1])?;
        let mut model = ModelSpec::new(self.hamiltonian.to_family()?, self.coupling.to_family()?, bounds);
        model.continuous = self.continuous;
        let obs = self.observable.map(|o| o.to_spec()).transpose()?;
        Ok((model, obs))
    }

    /// Serializable form of an affine model; `None` for closure-backed models.
    pub fn from_model(model: &ModelSpec, obs: Option<&ObservableSpec>) -> Option<Self> {
        Some(ModelJson {
            hamiltonian: FamilyJson::from_family(&model.hamiltonian)?,
            coupling: FamilyJson::from_family(&model.coupling)?,
            control: [model.bounds.min, model.bounds.max],
            observable: obs.map(ObservableJson::from_spec),
            continuous: model.continuous,
        })
    }
}

/// Parses a model document and validates `H` on a sample grid over `[0, 1]`.
pub fn parse_model(text: &str) -> Result<(ModelSpec, Option<ObservableSpec>)> {
    let doc: ModelJson = serde_json::from_str(text).map_err(|e| Error::config(format!("model JSON: {e}")))?;
    let (model, obs) = doc.to_model()?;
    model.validate(1.0)?;
    Ok((model, obs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qcore::{from_bloch, BlochVector};
    use approx::assert_abs_diff_eq;

    fn close(a: &Matrix2, b: &Matrix2, tol: f64) -> bool {
        (*a - *b).max_abs() <= tol
    }

    fn sigma_minus_model() -> ModelSpec {
        ModelSpec::constant(Matrix2::zero(), Matrix2::sigma_minus())
    }

    #[test]
    fn no_interaction_gives_identity() {
        let m = ModelSpec::constant(Matrix2::zero(), Matrix2::zero());
        let u = m.build_unitary(0.1, 0.0, 0.0).unwrap();
        assert_eq!(u, UnitaryBlocks::identity());
    }

    #[test]
    fn coupling_block_scales_with_sqrt_h() {
        let m = sigma_minus_model();
        let h = 1e-4;
        let u = m.build_unitary(h, 0.0, 0.0).unwrap();
        assert!(close(&u.l10, &Matrix2::sigma_minus().scale(1e-2), 1e-5));
        assert!(u.unitarity_defect() < 1e-14);
    }

    #[test]
    fn non_hermitian_hamiltonian_is_rejected() {
        let m = ModelSpec::constant(Matrix2::sigma_minus(), Matrix2::zero());
        assert!(matches!(m.build_unitary(0.1, 0.0, 0.0), Err(Error::Model(_))));
    }

    #[test]
    fn kraus_column_matches_full_unitary() {
        let m = ModelSpec::desk();
        let (a, b) = m.kraus_column(0.01, 0.3, 0.7).unwrap();
        let u = m.build_unitary(0.01, 0.3, 0.7).unwrap();
        assert_eq!(a, u.l00);
        assert_eq!(b, u.l10);
    }

    #[test]
    fn identity_interaction_keeps_vacuum() {
        let obs = ObservableSpec::diagonal();
        let s = measurement_superops(&UnitaryBlocks::identity(), &obs);
        let rho = from_bloch(BlochVector::new(0.2, -0.3, 0.4)).unwrap();
        let (l0, l1) = s.both(rho.matrix());
        assert!(close(&l0, rho.matrix(), 0.0));
        assert!(close(&l1, &Matrix2::zero(), 0.0));
    }

    #[test]
    fn superop_j_examples() {
        let zero = ModelSpec::constant(Matrix2::zero(), Matrix2::zero());
        let rho = Matrix2::diag(0.3, 0.7);
        assert_eq!(zero.superop_j(0.0, 0.0, &rho), Matrix2::zero());

        let a = 0.3;
        let j = sigma_minus_model().superop_j(0.0, 0.0, &Matrix2::diag(a, 1.0 - a));
        assert!(close(&j, &Matrix2::diag(1.0 - a, 0.0), 1e-15));

        let lambda: f64 = 2.5;
        let scalar = ModelSpec::constant(Matrix2::zero(), Matrix2::identity().scale(lambda.sqrt()));
        let j = scalar.superop_j(0.0, 0.0, &rho);
        assert!(close(&j, &rho.scale(lambda), 1e-14));
        assert_abs_diff_eq!(j.trace().re, lambda, epsilon = 1e-14);
    }

    #[test]
    fn superop_l_examples() {
        let rho = Matrix2::diag(0.3, 0.7);
        let zero = ModelSpec::constant(Matrix2::zero(), Matrix2::zero());
        assert_eq!(zero.superop_l(0.0, 0.0, &rho), Matrix2::zero());

        let hz = ModelSpec::constant(Matrix2::sigma_z(), Matrix2::zero());
        assert!(close(&hz.superop_l(0.0, 0.0, &Matrix2::diag(0.5, 0.5)), &Matrix2::zero(), 0.0));

        let l = sigma_minus_model().superop_l(0.0, 0.0, &Matrix2::diag(0.0, 1.0));
        assert!(close(&l, &Matrix2::diag(1.0, -1.0), 1e-15));
    }

    #[test]
    fn superop_theta_examples() {
        let rho = Matrix2::diag(0.5, 0.5);
        let zero = ModelSpec::constant(Matrix2::zero(), Matrix2::zero());
        assert_eq!(zero.superop_theta(0.0, 0.0, &rho), Matrix2::zero());

        let th = sigma_minus_model().superop_theta(0.0, 0.0, &rho);
        assert!(close(&th, &Matrix2::sigma_x().scale(0.5), 1e-15));

        let imag = ModelSpec::constant(Matrix2::zero(), Matrix2::identity().scale_c(C64::new(0.0, 1.0)));
        let rho = *from_bloch(BlochVector::new(0.1, 0.5, -0.2)).unwrap().matrix();
        assert!(close(&imag.superop_theta(0.0, 0.0, &rho), &Matrix2::zero(), 1e-15));
    }

    #[test]
    fn superop_r_q_examples() {
        let rho = *from_bloch(BlochVector::new(0.1, 0.5, -0.2)).unwrap().matrix();
        let free = ModelSpec::constant(Matrix2::sigma_y(), Matrix2::zero());
        assert_eq!(free.superop_r(0.0, 0.0, &rho), free.superop_l(0.0, 0.0, &rho));
        assert_eq!(free.superop_q(0.0, 0.0, &rho), Matrix2::zero());

        let scalar = ModelSpec::constant(Matrix2::sigma_x(), Matrix2::identity().scale(2f64.sqrt()));
        assert!(close(&scalar.superop_q(0.0, 0.0, &rho), &Matrix2::zero(), 1e-15));

        let q = sigma_minus_model().superop_q(0.0, 0.0, &Matrix2::diag(0.0, 1.0));
        assert!(close(&q, &Matrix2::diag(1.0, -1.0), 0.0));
    }

    #[test]
    fn observable_validation() {
        assert!(ObservableSpec::nondiagonal(0.0).is_err());
        assert!(ObservableSpec::nondiagonal(FRAC_PI_2).is_err());
        let obs = ObservableSpec::nondiagonal(0.4).unwrap();
        assert!(close(&(obs.p0 + obs.p1), &Matrix2::identity(), 1e-15));
        assert!(close(&(obs.p0 * obs.p0), &obs.p0, 1e-15));
        let again = ObservableSpec::from_projector(obs.p0, 0.0, 1.0).unwrap();
        assert_eq!(again.kind, ObservableKind::Nondiagonal);
        assert_abs_diff_eq!(again.alpha, 0.4, epsilon = 1e-12);
        assert!(ObservableSpec::from_projector(Matrix2::diag(0.5, 0.5), 0.0, 1.0).is_err());
        assert!(ObservableSpec::from_projector(Matrix2::diag(1.0, 0.0), 1.0, 1.0).is_err());
        assert_eq!(
            ObservableSpec::from_projector(Matrix2::diag(0.0, 1.0), 0.0, 1.0).unwrap().kind,
            ObservableKind::Diagonal
        );
    }

    #[test]
    fn parses_model_documents() {
        let text = r#"{
            "H": {"form": "linear", "H0": [[0.5, 0], [0, -0.5]], "H1": "sigma_x"},
            "C": {"form": "constant", "value": [[0, 1], [0, 0]]},
            "control": [-1, 1],
            "observable": {"kind": "nondiagonal", "alpha": 0.7853981633974483}
        }"#;
        let (model, obs) = parse_model(text).unwrap();
        let desk = ModelSpec::desk();
        for &(t, u) in &[(0.0, 0.0), (0.5, -0.3), (1.0, 1.0)] {
            assert_eq!(model.h(t, u), desk.h(t, u));
            assert_eq!(model.c(t, u), desk.c(t, u));
        }
        assert_eq!(obs.unwrap().kind, ObservableKind::Nondiagonal);

        let complex = r#"{"H": {"form": "affine", "base": [[1, [0, -1]], [[0, 1], 2]], "t_slope": "sz"},
                          "C": {"form": "constant", "value": "zero"}}"#;
        let (m, obs) = parse_model(complex).unwrap();
        assert!(obs.is_none());
        assert_eq!(m.h(2.0, 0.0).a00, C64::new(3.0, 0.0));
        assert_eq!(m.h(0.0, 0.0).a01, C64::new(0.0, -1.0));

        let bad = r#"{"H": {"form": "constant", "value": "sigma_minus"}, "C": {"form": "constant", "value": "zero"}}"#;
        assert!(matches!(parse_model(bad), Err(Error::Model(_))));
        assert!(matches!(parse_model("{"), Err(Error::Config(_))));
    }

    #[test]
    fn model_json_round_trip() {
        let doc = ModelJson::from_model(&ModelSpec::desk(), Some(&ObservableSpec::diagonal())).unwrap();
        let text = serde_json::to_string(&doc).unwrap();
        let (m, obs) = parse_model(&text).unwrap();
        assert_eq!(m.h(0.3, 0.2), ModelSpec::desk().h(0.3, 0.2));
        assert!(obs.unwrap().is_diagonal());
    }
}
