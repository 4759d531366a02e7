//! Internal banded complex-matrix kernels.
//!
//! Every operator in the Fock-basis integrator (x̂, p̂, â, Ĥ, the Kraus map
//! factor M) is banded, so the per-step cost is O(bw·dim²) instead of
//! O(dim³). Matrices are stored by diagonals; dense density matrices use
//! nalgebra's column-major layout throughout.

use crate::C64;
use nalgebra::DMatrix;

/// Complex matrix with entries confined to |i - j| <= h, stored by diagonals.
///
/// `diags[h + d][i]` holds entry (i, i + d) for d in [-h, h];
/// diagonal d has n - |d| stored entries, indexed by the row i.
#[derive(Debug, Clone)]
pub(crate) struct Banded {
    n: usize,
    h: usize,
    diags: Vec<Vec<C64>>,
}

impl Banded {
    pub fn zeros(n: usize, h: usize) -> Self {
        assert!(h < n);
        let diags = (-(h as isize)..=h as isize)
            .map(|d| vec![C64::new(0.0, 0.0); n - d.unsigned_abs()])
            .collect();
        Banded { n, h, diags }
    }

    /// Builds from a dense matrix, ignoring anything outside the band.
    pub fn from_dense(m: &DMatrix<C64>, h: usize) -> Self {
        let n = m.nrows();
        assert_eq!(n, m.ncols());
        let mut b = Banded::zeros(n, h);
        for d in -(h as isize)..=h as isize {
            let len = n - d.unsigned_abs();
            for i in 0..len {
                let (row, col) = if d >= 0 {
                    (i, i + d as usize)
                } else {
                    (i + (-d) as usize, i)
                };
                b.diags[(h as isize + d) as usize][i] = m[(row, col)];
            }
        }
        b
    }

    #[cfg(test)]
    pub fn to_dense(&self) -> DMatrix<C64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for d in -(self.h as isize)..=self.h as isize {
            let len = self.n - d.unsigned_abs();
            for i in 0..len {
                let (row, col) = if d >= 0 {
                    (i, i + d as usize)
                } else {
                    (i + (-d) as usize, i)
                };
                m[(row, col)] = self.diags[(self.h as isize + d) as usize][i];
            }
        }
        m
    }

    /// Rebuilds `self` as identity*id_coeff + sum(coeff_k * term_k).
    /// All terms must have half-bandwidth <= self.h and matching dim.
    pub fn assemble(&mut self, id_coeff: C64, terms: &[(C64, &Banded)]) {
        for diag in &mut self.diags {
            for v in diag.iter_mut() {
                *v = C64::new(0.0, 0.0);
            }
        }
        for v in self.diags[self.h].iter_mut() {
            *v = id_coeff;
        }
        for (c, t) in terms {
            assert_eq!(t.n, self.n);
            assert!(t.h <= self.h);
            for d in -(t.h as isize)..=t.h as isize {
                let src = &t.diags[(t.h as isize + d) as usize];
                let dst = &mut self.diags[(self.h as isize + d) as usize];
                for (dv, sv) in dst.iter_mut().zip(src.iter()) {
                    *dv += c * sv;
                }
            }
        }
    }

    /// out = self * rho (dense rho, column-major slices).
    pub fn mul_dense(&self, rho: &DMatrix<C64>, out: &mut DMatrix<C64>) {
        let n = self.n;
        let h = self.h as isize;
        let rho_s = rho.as_slice();
        let out_s = out.as_mut_slice();
        for j in 0..n {
            let oc = &mut out_s[j * n..(j + 1) * n];
            for v in oc.iter_mut() {
                *v = C64::new(0.0, 0.0);
            }
            let rc = &rho_s[j * n..(j + 1) * n];
            for d in -h..=h {
                let diag = &self.diags[(h + d) as usize];
                // entry (i, i+d): out[i] += diag[i] * rho[i+d, j]
                if d >= 0 {
                    let d = d as usize;
                    for i in 0..n - d {
                        oc[i] += diag[i] * rc[i + d];
                    }
                } else {
                    let ad = (-d) as usize;
                    // stored index by row i = ad..n at diag[i - ad]
                    for i in ad..n {
                        oc[i] += diag[i - ad] * rc[i - ad];
                    }
                }
            }
        }
    }

    /// out += scale * t * self^dagger.
    pub fn dense_mul_adjoint_acc(&self, t: &DMatrix<C64>, scale: C64, out: &mut DMatrix<C64>) {
        let n = self.n;
        let h = self.h as isize;
        let t_s = t.as_slice();
        let out_s = out.as_mut_slice();
        for j in 0..n {
            let oc = &mut out_s[j * n..(j + 1) * n];
            for d in -h..=h {
                let k = j as isize + d;
                if k < 0 || k >= n as isize {
                    continue;
                }
                let k = k as usize;
                let entry = if d >= 0 {
                    self.diags[(h + d) as usize][j]
                } else {
                    self.diags[(h + d) as usize][k]
                };
                if entry.norm_sqr() == 0.0 {
                    continue;
                }
                let c = scale * entry.conj();
                let tc = &t_s[k * n..(k + 1) * n];
                for i in 0..n {
                    oc[i] += c * tc[i];
                }
            }
        }
    }

    /// out = t * self^dagger.
    pub fn dense_mul_adjoint(&self, t: &DMatrix<C64>, out: &mut DMatrix<C64>) {
        let n = self.n;
        let h = self.h as isize;
        let t_s = t.as_slice();
        let out_s = out.as_mut_slice();
        for j in 0..n {
            let (head, tail) = out_s.split_at_mut(j * n);
            let _ = head;
            let oc = &mut tail[..n];
            for v in oc.iter_mut() {
                *v = C64::new(0.0, 0.0);
            }
            // out[:, j] = sum_d conj(self[j, j+d]) * t[:, j+d]
            for d in -h..=h {
                let k = j as isize + d;
                if k < 0 || k >= n as isize {
                    continue;
                }
                let k = k as usize;
                let entry = if d >= 0 {
                    self.diags[(h + d) as usize][j]
                } else {
                    self.diags[(h + d) as usize][k]
                };
                if entry.norm_sqr() == 0.0 {
                    continue;
                }
                let c = entry.conj();
                let tc = &t_s[k * n..(k + 1) * n];
                for i in 0..n {
                    oc[i] += c * tc[i];
                }
            }
        }
    }
}

/// In-place symmetrization m <- (m + m†)/2.
pub(crate) fn hermitize(m: &mut DMatrix<C64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)].conj());
            m[(i, j)] = avg;
            m[(j, i)] = avg.conj();
        }
        let d = m[(j, j)];
        m[(j, j)] = C64::new(d.re, 0.0);
    }
}

/// Cheap sufficient PSD test: Cholesky of (m + slack·I) with early exit.
/// Success implies min eigenvalue >= -slack. Failure is inconclusive; the
/// caller should fall back to an eigenvalue computation.
pub(crate) fn cholesky_psd_within(m: &DMatrix<C64>, slack: f64) -> bool {
    let n = m.nrows();
    let mut a: Vec<C64> = m.as_slice().to_vec();
    for j in 0..n {
        a[j * n + j] += slack;
    }
    for j in 0..n {
        let d = a[j * n + j].re;
        if !(d > 0.0) {
            return false;
        }
        let r = d.sqrt();
        for i in j + 1..n {
            a[j * n + i] /= r;
        }
        for k in j + 1..n {
            let f = a[j * n + k].conj();
            if f.norm_sqr() == 0.0 {
                continue;
            }
            let (lo, hi) = a.split_at_mut(k * n);
            let col_j = &lo[j * n..(j + 1) * n];
            let col_k = &mut hi[..n];
            for i in k..n {
                col_k[i] -= col_j[i] * f;
            }
        }
    }
    true
}

/// Smallest eigenvalue of a Hermitian matrix (exact, O(n^3)).
pub(crate) fn min_eigenvalue(m: &DMatrix<C64>) -> f64 {
    let eig = m.clone().symmetric_eigen();
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}
