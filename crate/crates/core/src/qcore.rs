//! 2×2 complex matrices, qubit density matrices and the Bloch-ball map.
//!
//! The Bloch identification used throughout the crate is
//!
//! ```text
//! Φ(x, y, z) = ½ ( 1 + x    y + iz )
//!                ( y − iz   1 − x  )
//! ```
//!
//! so `x` is the population difference between `|Ω⟩` and `|X⟩` and `y + iz` is
//! twice the coherence `ρ₀₁`.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Hermiticity tolerance for states.
pub const HERMITIAN_TOL: f64 = 1e-12;
/// Unit-trace tolerance for states.
pub const TRACE_TOL: f64 = 1e-9;
/// Smallest admissible eigenvalue of a state is `-POSITIVITY_TOL`.
pub const POSITIVITY_TOL: f64 = 1e-9;
/// Rounding allowance on the `|ρᵢⱼ| ≤ 1` bound.
pub const ENTRY_TOL: f64 = 1e-12;
/// Slack on the Bloch-ball radius.
pub const BALL_TOL: f64 = 1e-9;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

/// A 2×2 complex matrix stored row-major.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix2 {
    pub a00: C64,
    pub a01: C64,
    pub a10: C64,
    pub a11: C64,
}

impl Matrix2 {
    pub const fn new(a00: C64, a01: C64, a10: C64, a11: C64) -> Self {
        Matrix2 { a00, a01, a10, a11 }
    }

    pub fn from_real(a00: f64, a01: f64, a10: f64, a11: f64) -> Self {
        Matrix2::new(a00.into(), a01.into(), a10.into(), a11.into())
    }

    pub const fn zero() -> Self {
        Matrix2::new(ZERO, ZERO, ZERO, ZERO)
    }

    pub const fn identity() -> Self {
        Matrix2::new(ONE, ZERO, ZERO, ONE)
    }

    pub fn diag(d0: f64, d1: f64) -> Self {
        Matrix2::from_real(d0, 0.0, 0.0, d1)
    }

    pub const fn sigma_x() -> Self {
        Matrix2::new(ZERO, ONE, ONE, ZERO)
    }

    pub fn sigma_y() -> Self {
        Matrix2::new(ZERO, -I, I, ZERO)
    }

    pub fn sigma_z() -> Self {
        Matrix2::diag(1.0, -1.0)
    }

    /// `σ⁻ = |Ω⟩⟨X|`, the lowering operator `(0 1; 0 0)`.
    pub const fn sigma_minus() -> Self {
        Matrix2::new(ZERO, ONE, ZERO, ZERO)
    }

    /// `σ⁺ = |X⟩⟨Ω|`.
    pub const fn sigma_plus() -> Self {
        Matrix2::new(ZERO, ZERO, ONE, ZERO)
    }

    pub fn entries(&self) -> [C64; 4] {
        [self.a00, self.a01, self.a10, self.a11]
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> Self {
        Matrix2::new(f(self.a00), f(self.a01), f(self.a10), f(self.a11))
    }

    pub fn adjoint(&self) -> Self {
        Matrix2::new(self.a00.conj(), self.a10.conj(), self.a01.conj(), self.a11.conj())
    }

    pub fn trace(&self) -> C64 {
        self.a00 + self.a11
    }

    pub fn det(&self) -> C64 {
        self.a00 * self.a11 - self.a01 * self.a10
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|z| z * s)
    }

    pub fn scale_c(&self, s: C64) -> Self {
        self.map(|z| z * s)
    }

    /// `[A, B] = AB − BA`
    pub fn commutator(&self, other: &Matrix2) -> Self {
        *self * *other - *other * *self
    }

    /// `{A, B} = AB + BA`
    pub fn anticommutator(&self, other: &Matrix2) -> Self {
        *self * *other + *other * *self
    }

    /// `A ρ A*`
    pub fn sandwich(&self, rho: &Matrix2) -> Self {
        *self * *rho * self.adjoint()
    }

    /// `A ρ B*`
    pub fn sandwich2(&self, rho: &Matrix2, b: &Matrix2) -> Self {
        *self * *rho * b.adjoint()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries().iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Largest singular value.
    pub fn op_norm(&self) -> f64 {
        let (_, hi) = (self.adjoint() * *self).hermitian_eigenvalues();
        hi.max(0.0).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.entries().iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Distance from Hermiticity, `max |A − A*|`.
    pub fn hermiticity_defect(&self) -> f64 {
        (*self - self.adjoint()).max_abs()
    }

    /// `(A + A*) / 2`
    pub fn hermitian_part(&self) -> Self {
        let off = (self.a01 + self.a10.conj()) * 0.5;
        Matrix2::new(self.a00.re.into(), off, off.conj(), self.a11.re.into())
    }

    /// Eigenvalues `(λ_min, λ_max)` of the Hermitian part, in closed form.
    pub fn hermitian_eigenvalues(&self) -> (f64, f64) {
        let h = self.hermitian_part();
        let mean = 0.5 * (h.a00.re + h.a11.re);
        let half_gap = (0.25 * (h.a00.re - h.a11.re).powi(2) + h.a01.norm_sqr()).sqrt();
        (mean - half_gap, mean + half_gap)
    }

    /// Bloch-coordinate image of the (Hermitian part of the) matrix under the
    /// linear part of `Φ⁻¹`: `(a₀₀ − a₁₁, 2 Re a₀₁, 2 Im a₀₁)`.
    ///
    /// For a traceless Hermitian `M`, `Φ(v) + M` has Bloch vector
    /// `v + M.bloch_components()`.
    pub fn bloch_components(&self) -> [f64; 3] {
        let h = self.hermitian_part();
        [h.a00.re - h.a11.re, 2.0 * h.a01.re, 2.0 * h.a01.im]
    }

    /// Inverse square root of a Hermitian positive-definite matrix, closed form.
    ///
    /// Uses `√S = (S + √det S · I) / √(Tr S + 2√det S)`.
    pub fn inv_sqrt_psd(&self) -> Result<Self> {
        let s = self.hermitian_part();
        let det = s.det().re;
        let tr = s.trace().re;
        if !(det > 0.0 && tr > 0.0) {
            return Err(Error::model(format!(
                "inverse square root of a non positive-definite matrix (det {det:e}, trace {tr:e})"
            )));
        }
        let sd = det.sqrt();
        let t = (tr + 2.0 * sd).sqrt();
        let root = (s + Matrix2::identity().scale(sd)).scale(1.0 / t);
        root.inverse()
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.det();
        if det.norm() == 0.0 || !det.re.is_finite() || !det.im.is_finite() {
            return Err(Error::model("singular 2x2 matrix"));
        }
        let inv = ONE / det;
        Ok(Matrix2::new(self.a11 * inv, -self.a01 * inv, -self.a10 * inv, self.a00 * inv))
    }
}

impl Default for Matrix2 {
    fn default() -> Self {
        Matrix2::zero()
    }
}

impl Add for Matrix2 {
    type Output = Matrix2;
    fn add(self, o: Matrix2) -> Matrix2 {
        Matrix2::new(self.a00 + o.a00, self.a01 + o.a01, self.a10 + o.a10, self.a11 + o.a11)
    }
}

impl AddAssign for Matrix2 {
    fn add_assign(&mut self, o: Matrix2) {
        *self = *self + o;
    }
}

impl Sub for Matrix2 {
    type Output = Matrix2;
    fn sub(self, o: Matrix2) -> Matrix2 {
        Matrix2::new(self.a00 - o.a00, self.a01 - o.a01, self.a10 - o.a10, self.a11 - o.a11)
    }
}

impl Neg for Matrix2 {
    type Output = Matrix2;
    fn neg(self) -> Matrix2 {
        self.map(|z| -z)
    }
}

impl Mul for Matrix2 {
    type Output = Matrix2;
    fn mul(self, o: Matrix2) -> Matrix2 {
        Matrix2::new(
            self.a00 * o.a00 + self.a01 * o.a10,
            self.a00 * o.a01 + self.a01 * o.a11,
            self.a10 * o.a00 + self.a11 * o.a10,
            self.a10 * o.a01 + self.a11 * o.a11,
        )
    }
}

impl Mul<f64> for Matrix2 {
    type Output = Matrix2;
    fn mul(self, s: f64) -> Matrix2 {
        self.scale(s)
    }
}

impl Mul<C64> for Matrix2 {
    type Output = Matrix2;
    fn mul(self, s: C64) -> Matrix2 {
        self.scale_c(s)
    }
}

impl fmt::Display for Matrix2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[[{}, {}], [{}, {}]]", self.a00, self.a01, self.a10, self.a11)
    }
}

/// Point of the closed unit ball in ℝ³.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct BlochVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl BlochVector {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        BlochVector { x, y, z }
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        BlochVector::new(v[0], v[1], v[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn get(&self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            2 => self.z,
            _ => panic!("Bloch axis {axis} out of range"),
        }
    }
}

/// A validated qubit density matrix.
///
/// Construction checks Hermiticity, unit trace, positivity and the entry bound;
/// values are immutable afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QubitState(Matrix2);

impl QubitState {
    pub fn new(rho: Matrix2) -> Result<Self> {
        check_state(&rho)?;
        Ok(QubitState(rho))
    }

    /// Skips validation. Callers must guarantee the invariants.
    pub(crate) fn new_unchecked(rho: Matrix2) -> Self {
        QubitState(rho)
    }

    /// `|Ω⟩⟨Ω|`
    pub fn ground() -> Self {
        QubitState(Matrix2::diag(1.0, 0.0))
    }

    /// `|X⟩⟨X|`
    pub fn excited() -> Self {
        QubitState(Matrix2::diag(0.0, 1.0))
    }

    pub fn maximally_mixed() -> Self {
        QubitState(Matrix2::diag(0.5, 0.5))
    }

    pub fn matrix(&self) -> &Matrix2 {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix2 {
        self.0
    }

    pub fn to_bloch(&self) -> BlochVector {
        let [x, y, z] = self.0.bloch_components();
        BlochVector::new(x, y, z)
    }

    pub fn from_bloch(v: BlochVector) -> Result<Self> {
        from_bloch(v)
    }

    /// Smallest eigenvalue.
    pub fn min_eigenvalue(&self) -> f64 {
        self.0.hermitian_eigenvalues().0
    }

    /// Normalizes a nonzero positive operator `A` to `A / Tr A` and validates it.
    pub fn normalize(a: &Matrix2) -> Result<Self> {
        let tr = a.trace().re;
        if !(tr > 0.0) || !tr.is_finite() {
            return Err(Error::drift(format!("cannot normalize operator with trace {tr:e}")));
        }
        QubitState::new(a.hermitian_part().scale(1.0 / tr))
    }
}

impl<'de> Deserialize<'de> for QubitState {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = Matrix2::deserialize(d)?;
        QubitState::new(m).map_err(serde::de::Error::custom)
    }
}

/// Checks every qubit-state invariant, naming the first violated one.
pub fn check_state(rho: &Matrix2) -> Result<()> {
    if !rho.is_finite() {
        return Err(Error::InvalidState { invariant: "finiteness", detail: rho.to_string() });
    }
    let herm = rho.hermiticity_defect();
    if herm > HERMITIAN_TOL {
        return Err(Error::InvalidState {
            invariant: "hermiticity",
            detail: format!("|rho - rho*| = {herm:e}"),
        });
    }
    let tr = rho.trace();
    if (tr - ONE).norm() > TRACE_TOL {
        return Err(Error::InvalidState { invariant: "unit trace", detail: format!("trace = {tr}") });
    }
    let (lmin, _) = rho.hermitian_eigenvalues();
    if lmin < -POSITIVITY_TOL {
        return Err(Error::InvalidState {
            invariant: "positivity",
            detail: format!("lambda_min = {lmin:e}"),
        });
    }
    let big = rho.max_abs();
    if big > 1.0 + ENTRY_TOL {
        return Err(Error::InvalidState {
            invariant: "entry bound",
            detail: format!("max |rho_ij| = {big}"),
        });
    }
    Ok(())
}

/// `Φ(v)`. Vectors within `BALL_TOL` outside the sphere are projected onto it.
pub fn from_bloch(v: BlochVector) -> Result<QubitState> {
    let norm = v.norm();
    if !norm.is_finite() || norm * norm > 1.0 + BALL_TOL {
        return Err(Error::OutOfBall { norm });
    }
    let v = if norm > 1.0 {
        BlochVector::new(v.x / norm, v.y / norm, v.z / norm)
    } else {
        v
    };
    let off = C64::new(0.5 * v.y, 0.5 * v.z);
    Ok(QubitState(Matrix2::new(
        C64::new(0.5 * (1.0 + v.x), 0.0),
        off,
        off.conj(),
        C64::new(0.5 * (1.0 - v.x), 0.0),
    )))
}

pub fn to_bloch(rho: &QubitState) -> BlochVector {
    rho.to_bloch()
}

/// Componentwise clamp of real and imaginary parts to `[-k, k]`.
///
/// `k` must be at least 1.
pub fn truncate(b: &Matrix2, k: u32) -> Matrix2 {
    debug_assert!(k >= 1, "truncation level must be positive");
    let k = f64::from(k);
    b.map(|z| C64::new(z.re.clamp(-k, k), z.im.clamp(-k, k)))
}

/// Projects a slightly drifted matrix back onto the state space.
///
/// Hermitian part, eigenvalues clipped to `[0, 1]`, unit trace. Inputs that
/// already satisfy the state invariants come back untouched. Violations larger
/// than `tol` are reported as numerical drift.
pub fn psd_repair(rho: &Matrix2, tol: f64) -> Result<QubitState> {
    if !rho.is_finite() {
        return Err(Error::drift("non-finite matrix entries"));
    }
    if check_state(rho).is_ok() {
        return Ok(QubitState(*rho));
    }
    let herm = rho.hermiticity_defect();
    if herm > tol {
        return Err(Error::drift(format!("hermiticity defect {herm:e} exceeds tolerance {tol:e}")));
    }
    let h = rho.hermitian_part();
    let tr = h.trace().re;
    if (tr - 1.0).abs() > tol {
        return Err(Error::drift(format!("trace {tr} deviates from 1 by more than {tol:e}")));
    }
    let (lmin, lmax) = h.hermitian_eigenvalues();
    if lmin < -tol {
        return Err(Error::drift(format!(
            "eigenvalue {lmin:e} below -{tol:e}; reduce the step size"
        )));
    }
    let lo = lmin.clamp(0.0, 1.0);
    let hi = lmax.clamp(0.0, 1.0);
    let sum = lo + hi;
    let b = h.bloch_components();
    let r = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    let radius = if sum > 0.0 { ((hi - lo) / sum).clamp(0.0, 1.0) } else { 0.0 };
    let v = if r > 0.0 {
        BlochVector::new(radius * b[0] / r, radius * b[1] / r, radius * b[2] / r)
    } else {
        BlochVector::default()
    };
    let out = from_bloch(v)?;
    check_state(out.matrix())?;
    Ok(out)
}
