//! Dense small-matrix linear algebra for the precision parameterization.
//!
//! Precision matrices are carried in square-root-free Cholesky form
//! `Λ = L·D·Lᵀ` with `L` unit lower triangular and `D = diag(exp(log_diag))`,
//! which makes `log det Λ = Σ log_diag` exact and positivity automatic.

use serde::{Deserialize, Serialize};

use crate::error::{CuError, Result};

/// Pivots at or below this value are treated as a loss of definiteness.
pub const PIVOT_TOLERANCE: f64 = 1e-14;

/// Relative tolerance for the symmetry check.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Largest condition estimate `precision_to_covariance` accepts.
pub const MAX_CONDITION: f64 = 1e12;

/// Dense row-major `dim × dim` matrix with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl SquareMatrix {
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(CuError::InvalidParameter("matrix dimension must be positive".into()));
        }
        if entries.len() != dim * dim {
            return Err(CuError::DimensionMismatch {
                expected: dim * dim,
                actual: entries.len(),
            });
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(CuError::NonFinite { what: "matrix" });
        }
        Ok(Self { dim, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        let mut entries = Vec::with_capacity(dim * dim);
        for row in rows {
            if row.len() != dim {
                return Err(CuError::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            entries.extend_from_slice(row);
        }
        Self::new(dim, entries)
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            entries: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_diag(&vec![1.0; dim])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.set(i, i, d);
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.entries[i * self.dim + j] = v;
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<f64> {
        self.entries
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.check_dim(other.dim)?;
        let n = self.dim;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                for j in 0..n {
                    out.entries[i * n + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(v.len())?;
        Ok((0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.get(i, j) * v[j]).sum())
            .collect())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            entries: self.entries.iter().map(|v| v * s).collect(),
        }
    }

    /// Entrywise sum, used for accumulating averages.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_dim(other.dim)?;
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            *a += b;
        }
        Ok(())
    }

    /// Symmetric permutation `P·A·Pᵀ` where row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        self.check_dim(perm.len())?;
        let mut out = Self::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                out.set(i, j, self.get(perm[i], perm[j]));
            }
        }
        Ok(out)
    }

    pub fn check_symmetric(&self) -> Result<()> {
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        for i in 0..self.dim {
            for j in 0..i {
                let diff = (self.get(i, j) - self.get(j, i)).abs();
                if diff > SYMMETRY_TOLERANCE * scale {
                    return Err(CuError::NotSymmetric { i, j, diff });
                }
            }
        }
        Ok(())
    }

    pub(crate) fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.dim {
            return Err(CuError::DimensionMismatch {
                expected: self.dim,
                actual: dim,
            });
        }
        Ok(())
    }
}

/// Index of the strictly-lower entry `(i, j)`, `i > j`, in row-major packed storage.
#[inline]
pub fn lower_index(i: usize, j: usize) -> usize {
    debug_assert!(i > j);
    i * (i - 1) / 2 + j
}

/// Number of strictly-lower entries of an `m × m` matrix.
#[inline]
pub fn lower_len(m: usize) -> usize {
    m * m.saturating_sub(1) / 2
}

/// Square-root-free Cholesky factor of a precision matrix.
///
/// `lower` packs the strictly-lower entries of the unit lower-triangular `L`
/// row by row: `(1,0), (2,0), (2,1), (3,0), …`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionFactor {
    dim: usize,
    lower: Vec<f64>,
    log_diag: Vec<f64>,
}

impl PrecisionFactor {
    pub fn new(lower: Vec<f64>, log_diag: Vec<f64>) -> Result<Self> {
        let dim = log_diag.len();
        if dim == 0 {
            return Err(CuError::InvalidParameter("factor dimension must be positive".into()));
        }
        if lower.len() != lower_len(dim) {
            return Err(CuError::DimensionMismatch {
                expected: lower_len(dim),
                actual: lower.len(),
            });
        }
        if lower.iter().chain(&log_diag).any(|v| !v.is_finite()) {
            return Err(CuError::NonFinite { what: "precision factor" });
        }
        Ok(Self { dim, lower, log_diag })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            lower: vec![0.0; lower_len(dim)],
            log_diag: vec![0.0; dim],
        }
    }

    /// Diagonal precision with `L = I`.
    pub fn diagonal(log_diag: Vec<f64>) -> Result<Self> {
        Self::new(vec![0.0; lower_len(log_diag.len())], log_diag)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn log_diag(&self) -> &[f64] {
        &self.log_diag
    }

    /// Entry `L[i][j]` of the full unit lower-triangular matrix.
    #[inline]
    pub fn l(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Greater => self.lower[lower_index(i, j)],
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Less => 0.0,
        }
    }

    pub fn d(&self) -> Vec<f64> {
        self.log_diag.iter().map(|v| v.exp()).collect()
    }

    /// `log det Λ`, exact by construction.
    pub fn log_det(&self) -> f64 {
        self.log_diag.iter().sum()
    }

    /// `u = Lᵀ r`.
    pub fn lt_mul(&self, r: &[f64], u: &mut [f64]) {
        let m = self.dim;
        for j in 0..m {
            let mut acc = r[j];
            for i in (j + 1)..m {
                acc += self.lower[lower_index(i, j)] * r[i];
            }
            u[j] = acc;
        }
    }

    /// Dense `L` as a square matrix.
    pub fn l_matrix(&self) -> SquareMatrix {
        let mut l = SquareMatrix::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..=i {
                l.set(i, j, self.l(i, j));
            }
        }
        l
    }

    /// Same precision with agents relabeled, i.e. the factor of `P·Λ·Pᵀ`.
    ///
    /// The LDLᵀ form is not permutation equivariant, so this refactorizes.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        ldl_factorize(&assemble_precision(self).permuted(perm)?)
    }
}

/// Factorizes a symmetric positive-definite matrix as `L·D·Lᵀ`.
pub fn ldl_factorize(mat: &SquareMatrix) -> Result<PrecisionFactor> {
    mat.check_symmetric()?;
    let m = mat.dim();
    let mut l = vec![0.0; m * m];
    let mut d = vec![0.0; m];
    for j in 0..m {
        let mut dj = mat.get(j, j);
        for k in 0..j {
            dj -= l[j * m + k] * l[j * m + k] * d[k];
        }
        if !(dj > PIVOT_TOLERANCE) {
            return Err(CuError::NotPositiveDefinite { index: j, pivot: dj });
        }
        d[j] = dj;
        for i in (j + 1)..m {
            let mut v = mat.get(i, j);
            for k in 0..j {
                v -= l[i * m + k] * l[j * m + k] * d[k];
            }
            l[i * m + j] = v / dj;
        }
    }
    let mut lower = Vec::with_capacity(lower_len(m));
    for i in 1..m {
        for j in 0..i {
            lower.push(l[i * m + j]);
        }
    }
    PrecisionFactor::new(lower, d.iter().map(|v| v.ln()).collect())
}

/// Assembles `Λ = L·D·Lᵀ`.
pub fn assemble_precision(factor: &PrecisionFactor) -> SquareMatrix {
    let m = factor.dim();
    let d = factor.d();
    let mut out = SquareMatrix::zeros(m);
    for i in 0..m {
        for j in 0..=i {
            // Λ_ij = Σ_{k ≤ j} L_ik d_k L_jk
            let mut acc = 0.0;
            for k in 0..=j {
                acc += factor.l(i, k) * d[k] * factor.l(j, k);
            }
            out.set(i, j, acc);
            out.set(j, i, acc);
        }
    }
    out
}

/// Inverse of the unit lower-triangular `L` by forward substitution.
fn unit_lower_inverse(factor: &PrecisionFactor) -> Vec<f64> {
    let m = factor.dim();
    let mut inv = vec![0.0; m * m];
    for col in 0..m {
        inv[col * m + col] = 1.0;
        for i in (col + 1)..m {
            let mut acc = 0.0;
            for k in col..i {
                acc += factor.l(i, k) * inv[k * m + col];
            }
            inv[i * m + col] = -acc;
        }
    }
    inv
}

fn one_norm(m: usize, a: impl Fn(usize, usize) -> f64) -> f64 {
    (0..m)
        .map(|j| (0..m).map(|i| a(i, j).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `Σ = Λ⁻¹ = L⁻ᵀ·D⁻¹·L⁻¹`, via triangular solves.
pub fn precision_to_covariance(factor: &PrecisionFactor) -> Result<SquareMatrix> {
    let m = factor.dim();
    let linv = unit_lower_inverse(factor);
    let d = factor.d();

    let kappa_l = one_norm(m, |i, j| factor.l(i, j)) * one_norm(m, |i, j| linv[i * m + j]);
    let dmax = d.iter().cloned().fold(f64::MIN, f64::max);
    let dmin = d.iter().cloned().fold(f64::MAX, f64::min);
    let estimate = kappa_l * kappa_l * dmax / dmin;
    if !(estimate <= MAX_CONDITION) {
        return Err(CuError::IllConditioned { estimate });
    }

    let mut out = SquareMatrix::zeros(m);
    for i in 0..m {
        for j in 0..=i {
            let mut acc = 0.0;
            for k in i..m {
                acc += linv[k * m + i] * linv[k * m + j] / d[k];
            }
            out.set(i, j, acc);
            out.set(j, i, acc);
        }
    }
    Ok(out)
}

/// Standard Cholesky factor `C` with `A = C·Cᵀ`, used for sampling and covariance densities.
#[derive(Debug, Clone)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    pub fn factorize(mat: &SquareMatrix) -> Result<Self> {
        mat.check_symmetric()?;
        let m = mat.dim();
        let mut c = vec![0.0; m * m];
        for j in 0..m {
            let mut s = mat.get(j, j);
            for k in 0..j {
                s -= c[j * m + k] * c[j * m + k];
            }
            if !(s > PIVOT_TOLERANCE) {
                return Err(CuError::NotPositiveDefinite { index: j, pivot: s });
            }
            let cjj = s.sqrt();
            c[j * m + j] = cjj;
            for i in (j + 1)..m {
                let mut v = mat.get(i, j);
                for k in 0..j {
                    v -= c[i * m + k] * c[j * m + k];
                }
                c[i * m + j] = v / cjj;
            }
        }
        Ok(Self { dim: m, lower: c })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.lower[i * self.dim + j]
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim).map(|i| self.get(i, i).ln()).sum::<f64>()
    }

    /// `out = C·v`.
    pub fn mul_vec(&self, v: &[f64], out: &mut [f64]) {
        for i in 0..self.dim {
            out[i] = (0..=i).map(|k| self.get(i, k) * v[k]).sum();
        }
    }

    /// Solves `C·x = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        for i in 0..self.dim {
            let mut acc = b[i];
            for k in 0..i {
                acc -= self.get(i, k) * b[k];
            }
            b[i] = acc / self.get(i, i);
        }
    }

    /// `vᵀ A⁻¹ v`.
    pub fn mahalanobis(&self, v: &[f64]) -> f64 {
        let mut w = v.to_vec();
        self.solve_lower_in_place(&mut w);
        w.iter().map(|x| x * x).sum()
    }

    pub fn inverse(&self) -> SquareMatrix {
        let m = self.dim;
        let mut out = SquareMatrix::zeros(m);
        let mut e = vec![0.0; m];
        // columns of C⁻¹, then A⁻¹ = C⁻ᵀ C⁻¹
        let mut cinv = vec![0.0; m * m];
        for col in 0..m {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[col] = 1.0;
            self.solve_lower_in_place(&mut e);
            for i in 0..m {
                cinv[i * m + col] = e[i];
            }
        }
        for i in 0..m {
            for j in 0..=i {
                let acc: f64 = (0..m).map(|k| cinv[k * m + i] * cinv[k * m + j]).sum();
                out.set(i, j, acc);
                out.set(j, i, acc);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_factorizes_to_identity() {
        let f = ldl_factorize(&SquareMatrix::identity(3)).unwrap();
        assert_eq!(f.lower(), &[0.0, 0.0, 0.0]);
        assert_eq!(f.log_diag(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn two_by_two_hand_elimination() {
        let a = SquareMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let f = ldl_factorize(&a).unwrap();
        assert!((f.lower()[0] - 0.5).abs() < 1e-15);
        let d = f.d();
        assert!((d[0] - 2.0).abs() < 1e-14);
        assert!((d[1] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn assemble_inverts_hand_example() {
        let f = PrecisionFactor::new(vec![0.5], vec![2f64.ln(), 1.5f64.ln()]).unwrap();
        let a = assemble_precision(&f);
        let want = [2.0, 1.0, 1.0, 2.0];
        for (g, w) in a.entries().iter().zip(want) {
            assert!((g - w).abs() < 1e-14);
        }
    }

    #[test]
    fn identity_factor_assembles_identity() {
        assert_eq!(assemble_precision(&PrecisionFactor::identity(2)), SquareMatrix::identity(2));
    }

    #[test]
    fn diagonal_covariance_is_reciprocal() {
        let f = PrecisionFactor::diagonal(vec![4f64.ln(), 2f64.ln()]).unwrap();
        let s = precision_to_covariance(&f).unwrap();
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(1, 1) - 0.5).abs() < 1e-15);
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(precision_to_covariance(&PrecisionFactor::identity(3)).unwrap(), SquareMatrix::identity(3));
    }

    #[test]
    fn rejects_indefinite() {
        let a = SquareMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(ldl_factorize(&a), Err(CuError::NotPositiveDefinite { index: 1, .. })));
        assert!(matches!(Cholesky::factorize(&a), Err(CuError::NotPositiveDefinite { .. })));
    }

    #[test]
    fn rejects_asymmetric() {
        let a = SquareMatrix::from_rows(&[vec![2.0, 1.0], vec![1.1, 2.0]]).unwrap();
        assert!(matches!(ldl_factorize(&a), Err(CuError::NotSymmetric { .. })));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(SquareMatrix::new(1, vec![f64::NAN]).is_err());
        assert!(PrecisionFactor::new(vec![], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn ill_conditioned_factor_is_reported() {
        let f = PrecisionFactor::new(vec![1e5], vec![10.0, -10.0]).unwrap();
        assert!(matches!(precision_to_covariance(&f), Err(CuError::IllConditioned { .. })));
    }

    #[test]
    fn cholesky_inverse_and_logdet() {
        let a = SquareMatrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let c = Cholesky::factorize(&a).unwrap();
        assert!((c.log_det() - 8f64.ln()).abs() < 1e-14);
        let inv = c.inverse();
        let prod = a.matmul(&inv).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod.get(i, j) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn packed_lower_layout() {
        assert_eq!(lower_index(1, 0), 0);
        assert_eq!(lower_index(2, 0), 1);
        assert_eq!(lower_index(2, 1), 2);
        assert_eq!(lower_index(3, 0), 3);
        assert_eq!(lower_len(3), 3);
        assert_eq!(lower_len(1), 0);
    }
}
