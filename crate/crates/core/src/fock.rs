//! Operators and density matrices in a truncated harmonic-oscillator basis.
//!
//! Convention: m = ω = ħ = 1, with quadratures x̂ = (â + â†)/√2 and
//! p̂ = i(â† − â)/√2, so that [x̂, p̂] = i on the interior of the truncated
//! basis (the defect is confined to the last basis state).

use crate::linalg;
use crate::{C64, Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Entrywise Hermiticity tolerance for operators flagged Hermitian.
pub const OP_HERMITICITY_TOL: f64 = 1e-12;
/// Entrywise Hermiticity tolerance for density matrices.
pub const RHO_HERMITICITY_TOL: f64 = 1e-10;
/// Unit-trace tolerance after a normalized update.
pub const RHO_TRACE_TOL: f64 = 1e-10;
/// Allowed negative slack on the smallest eigenvalue (rounding noise).
pub const RHO_PSD_TOL: f64 = 1e-8;
/// Upper slack on purity.
pub const RHO_PURITY_TOL: f64 = 1e-10;

fn check_dim(dim: usize) -> Result<()> {
    if dim < 2 {
        return Err(Error::InvalidDimension(dim));
    }
    Ok(())
}

/// Complex matrix representing an operator (Ĥ, x̂, p̂, â, V̂ⱼ, ...) in the
/// truncated Fock basis.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix {
    dim: usize,
    mat: DMatrix<C64>,
}

impl OperatorMatrix {
    pub fn new(mat: DMatrix<C64>) -> Result<Self> {
        if mat.nrows() != mat.ncols() {
            return Err(Error::DimensionMismatch(mat.nrows(), mat.ncols()));
        }
        check_dim(mat.nrows())?;
        Ok(OperatorMatrix { dim: mat.nrows(), mat })
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(OperatorMatrix { dim, mat: DMatrix::zeros(dim, dim) })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(OperatorMatrix { dim, mat: DMatrix::identity(dim, dim) })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.mat
    }

    pub fn adjoint(&self) -> OperatorMatrix {
        OperatorMatrix { dim: self.dim, mat: self.mat.adjoint() }
    }

    pub fn scale(&self, c: C64) -> OperatorMatrix {
        OperatorMatrix { dim: self.dim, mat: &self.mat * c }
    }

    pub fn trace(&self) -> C64 {
        self.mat.trace()
    }

    /// max |A - A†| over entries.
    pub fn hermiticity_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for j in 0..self.dim {
            for i in 0..=j {
                let e = (self.mat[(i, j)] - self.mat[(j, i)].conj()).norm();
                worst = worst.max(e);
            }
        }
        worst
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermiticity_error() <= OP_HERMITICITY_TOL
    }
}

impl std::ops::Add for &OperatorMatrix {
    type Output = OperatorMatrix;
    fn add(self, rhs: &OperatorMatrix) -> OperatorMatrix {
        assert_eq!(self.dim, rhs.dim, "operator dimension mismatch");
        OperatorMatrix { dim: self.dim, mat: &self.mat + &rhs.mat }
    }
}

impl std::ops::Sub for &OperatorMatrix {
    type Output = OperatorMatrix;
    fn sub(self, rhs: &OperatorMatrix) -> OperatorMatrix {
        assert_eq!(self.dim, rhs.dim, "operator dimension mismatch");
        OperatorMatrix { dim: self.dim, mat: &self.mat - &rhs.mat }
    }
}

impl std::ops::Mul for &OperatorMatrix {
    type Output = OperatorMatrix;
    fn mul(self, rhs: &OperatorMatrix) -> OperatorMatrix {
        assert_eq!(self.dim, rhs.dim, "operator dimension mismatch");
        OperatorMatrix { dim: self.dim, mat: &self.mat * &rhs.mat }
    }
}

/// Truncated-Fock-basis density matrix. Construction validates the type
/// invariants (Hermiticity, unit trace, positive semi-definiteness up to
/// rounding slack, purity bound).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    dim: usize,
    mat: DMatrix<C64>,
}

impl DensityMatrix {
    pub fn from_matrix(mat: DMatrix<C64>) -> Result<Self> {
        if mat.nrows() != mat.ncols() {
            return Err(Error::DimensionMismatch(mat.nrows(), mat.ncols()));
        }
        check_dim(mat.nrows())?;
        let rho = DensityMatrix { dim: mat.nrows(), mat };
        rho.validate()?;
        Ok(rho)
    }

    /// |n⟩⟨n| Fock state.
    pub fn fock(n: usize, dim: usize) -> Result<Self> {
        check_dim(dim)?;
        if n >= dim {
            return Err(Error::InvalidParameter(format!(
                "fock level {n} outside basis of size {dim}"
            )));
        }
        let mut mat = DMatrix::zeros(dim, dim);
        mat[(n, n)] = C64::new(1.0, 0.0);
        Ok(DensityMatrix { dim, mat })
    }

    pub fn ground(dim: usize) -> Result<Self> {
        Self::fock(0, dim)
    }

    pub fn maximally_mixed(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        let mat = DMatrix::identity(dim, dim) * C64::new(1.0 / dim as f64, 0.0);
        Ok(DensityMatrix { dim, mat })
    }

    /// Pure state from a (not necessarily normalized) ket.
    pub fn pure(ket: &[C64]) -> Result<Self> {
        check_dim(ket.len())?;
        let norm_sq: f64 = ket.iter().map(|c| c.norm_sqr()).sum();
        if norm_sq <= 0.0 {
            return Err(Error::InvalidParameter("zero ket".into()));
        }
        let dim = ket.len();
        let mat = DMatrix::from_fn(dim, dim, |i, j| ket[i] * ket[j].conj() / norm_sq);
        Ok(DensityMatrix { dim, mat })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.mat
    }

    pub fn hermiticity_error(&self) -> f64 {
        OperatorMatrix { dim: self.dim, mat: self.mat.clone() }.hermiticity_error()
    }

    /// Checks all type invariants, using a Cholesky fast path for the PSD
    /// test and an exact eigenvalue fallback.
    pub fn validate(&self) -> Result<()> {
        let herm = self.hermiticity_error();
        if herm > RHO_HERMITICITY_TOL {
            return Err(Error::InvariantViolation(format!(
                "hermiticity error {herm:.3e} > {RHO_HERMITICITY_TOL:.0e}"
            )));
        }
        let tr = self.mat.trace();
        if (tr.re - 1.0).abs() > RHO_TRACE_TOL || tr.im.abs() > RHO_TRACE_TOL {
            return Err(Error::InvariantViolation(format!(
                "trace {tr} deviates from 1 by more than {RHO_TRACE_TOL:.0e}"
            )));
        }
        if !linalg::cholesky_psd_within(&self.mat, RHO_PSD_TOL) {
            let lam = linalg::min_eigenvalue(&self.mat);
            if lam < -RHO_PSD_TOL {
                return Err(Error::InvariantViolation(format!(
                    "smallest eigenvalue {lam:.3e} < -{RHO_PSD_TOL:.0e}"
                )));
            }
        }
        let p = self.purity();
        if !(p > 0.0 && p <= 1.0 + RHO_PURITY_TOL) {
            return Err(Error::InvariantViolation(format!("purity {p} outside (0, 1]")));
        }
        Ok(())
    }

    /// Tr[ρ²]; for Hermitian ρ this is the squared Frobenius norm.
    pub fn purity(&self) -> f64 {
        self.mat.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        linalg::min_eigenvalue(&self.mat)
    }

    /// Total population in the top `frac` fraction of basis levels.
    pub fn tail_occupancy(&self, frac: f64) -> f64 {
        let start = ((1.0 - frac) * self.dim as f64).floor() as usize;
        (start..self.dim).map(|n| self.mat[(n, n)].re).sum()
    }
}

/// Model parameters for the feedback-cooled oscillator (scaled units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Measurement strength.
    pub k: f64,
    /// Measurement efficiency, in (0, 1].
    pub eta: f64,
    /// Quartic nonlinearity.
    pub gamma: f64,
    /// Damping Γ = 1/Q.
    pub damping: f64,
    /// Environment temperature in units of ħω.
    pub kbt: f64,
    /// Feedback modulation amplitude.
    pub alpha: f64,
    /// Oscillator frequency (1 in the scaled model).
    pub omega: f64,
    /// Integration time step.
    pub dt: f64,
    /// Fock-basis truncation.
    pub dim: usize,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            k: 0.05,
            eta: 1.0,
            gamma: 0.1,
            damping: 0.125,
            kbt: 2.0,
            alpha: 0.05,
            omega: 1.0,
            dt: 0.001,
            dim: 120,
        }
    }
}

impl ModelParams {
    /// Returns every violated constraint, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            v.push(format!("eta = {} outside (0, 1]", self.eta));
        }
        if !(self.k >= 0.0) {
            v.push(format!("k = {} must be >= 0", self.k));
        }
        if !(self.damping > 0.0) {
            v.push(format!("damping = {} must be > 0", self.damping));
        }
        if !(self.kbt >= 0.0) {
            v.push(format!("kbt = {} must be >= 0", self.kbt));
        }
        if !(self.dt > 0.0) {
            v.push(format!("dt = {} must be > 0", self.dt));
        }
        if !(self.omega > 0.0) {
            v.push(format!("omega = {} must be > 0", self.omega));
        }
        if self.dim < 2 {
            v.push(format!("dim = {} must be >= 2", self.dim));
        }
        if !self.gamma.is_finite() || !self.alpha.is_finite() {
            v.push("gamma and alpha must be finite".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    /// Thermal occupancy of the environment at these parameters.
    pub fn n_bar(&self) -> f64 {
        thermal_occupancy(self.kbt, self.omega)
    }
}

/// Lowering and raising operators: ⟨n−1|â|n⟩ = √n.
pub fn build_ladder_ops(dim: usize) -> Result<(OperatorMatrix, OperatorMatrix)> {
    check_dim(dim)?;
    let mut a = DMatrix::zeros(dim, dim);
    for n in 1..dim {
        a[(n - 1, n)] = C64::new((n as f64).sqrt(), 0.0);
    }
    let adag = a.adjoint();
    Ok((
        OperatorMatrix { dim, mat: a },
        OperatorMatrix { dim, mat: adag },
    ))
}

/// Quadratures x̂ = (â + â†)/√2, p̂ = i(â† − â)/√2.
pub fn build_quadratures(dim: usize) -> Result<(OperatorMatrix, OperatorMatrix)> {
    let (a, adag) = build_ladder_ops(dim)?;
    let inv_sqrt2 = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    let x = (&a + &adag).scale(inv_sqrt2);
    let p = (&adag - &a).scale(C64::new(0.0, std::f64::consts::FRAC_1_SQRT_2));
    Ok((x, p))
}

/// Tr[op·ρ].
pub fn expectation(op: &OperatorMatrix, rho: &DensityMatrix) -> Result<C64> {
    if op.dim() != rho.dim() {
        return Err(Error::DimensionMismatch(op.dim(), rho.dim()));
    }
    let n = op.dim();
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            acc += op.matrix()[(i, j)] * rho.matrix()[(j, i)];
        }
    }
    Ok(acc)
}

/// Tr[ρ²].
pub fn purity(rho: &DensityMatrix) -> f64 {
    rho.purity()
}

/// Thermal (Gibbs) state of the oscillator at mean occupancy n̄, normalized
/// over the truncated basis.
pub fn thermal_state(n_bar: f64, dim: usize) -> Result<DensityMatrix> {
    check_dim(dim)?;
    if !(n_bar >= 0.0) {
        return Err(Error::InvalidParameter(format!("n_bar = {n_bar} must be >= 0")));
    }
    let mut diag = vec![0.0f64; dim];
    if n_bar == 0.0 {
        diag[0] = 1.0;
    } else {
        let q = n_bar / (n_bar + 1.0);
        let mut w = 1.0;
        for d in diag.iter_mut() {
            *d = w;
            w *= q;
        }
        let z: f64 = diag.iter().sum();
        for d in diag.iter_mut() {
            *d /= z;
        }
    }
    let mut mat = DMatrix::zeros(dim, dim);
    for (n, d) in diag.iter().enumerate() {
        mat[(n, n)] = C64::new(*d, 0.0);
    }
    Ok(DensityMatrix { dim, mat })
}

/// Coherent state |α⟩ truncated to the basis and renormalized.
pub fn coherent_state(alpha: C64, dim: usize) -> Result<DensityMatrix> {
    check_dim(dim)?;
    let mut ket = vec![C64::new(0.0, 0.0); dim];
    let mut amp = C64::new(1.0, 0.0);
    for (n, k) in ket.iter_mut().enumerate() {
        *k = amp;
        amp *= alpha / C64::new(((n + 1) as f64).sqrt(), 0.0);
    }
    DensityMatrix::pure(&ket)
}

/// n̄ = 1/(exp(ω/kBT) − 1) in ħ = 1 units; 0 at zero temperature.
pub fn thermal_occupancy(kbt: f64, omega: f64) -> f64 {
    if kbt <= 0.0 {
        return 0.0;
    }
    1.0 / ((omega / kbt).exp_m1())
}
