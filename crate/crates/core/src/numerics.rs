//! Dense linear algebra for small/medium problems.
//!
//! Everything here is plain `f64` row-major storage.  The simulator works with
//! dimensions in the tens-to-hundreds, so we favour simple, auditable
//! implementations over BLAS bindings: power iteration for operator norms, a
//! cyclic Jacobi sweep for symmetric eigensystems, and Cholesky with one step
//! of iterative refinement for SPD solves.
//!
//! Shape mismatches in basic arithmetic are programmer errors and panic;
//! numerical failure modes of the factorizations/iterations (asymmetry,
//! indefiniteness, non-convergence) are reported through [`NumericsError`].

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Relative tolerance for treating a matrix as symmetric: entries must obey
/// `|a_ij - a_ji| <= SYMMETRY_TOL * max(1, |a_ij|, |a_ji|)`.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Iteration cap for power iteration.
const POWER_MAX_ITERS: usize = 10_000;

/// Sweep cap for the Jacobi eigensolver (quadratic convergence makes this
/// generous for any dimension we use).
const JACOBI_MAX_SWEEPS: usize = 60;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (relative deviation {deviation:.3e} exceeds {SYMMETRY_TOL:.0e})")]
    NotSymmetric { deviation: f64 },
    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { pivot: f64, index: usize },
    #[error("iteration failed to converge within {0} steps")]
    NoConvergence(usize),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

// ---------------------------------------------------------------------------
// Vector
// ---------------------------------------------------------------------------

/// Dense column vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(n: usize) -> Self {
        Vector(vec![0.0; n])
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Vector(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot: length mismatch");
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, c: f64, other: &Vector) {
        assert_eq!(self.len(), other.len(), "add_scaled: length mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += c * b;
        }
    }

    pub fn scaled(&self, c: f64) -> Vector {
        Vector(self.0.iter().map(|a| a * c).collect())
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for a in &mut self.0 {
            *a *= c;
        }
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|a| a.is_finite())
    }

    /// Concatenation of several blocks into one vector.
    pub fn concat(blocks: &[&Vector]) -> Vector {
        let mut out = Vec::with_capacity(blocks.iter().map(|b| b.len()).sum());
        for b in blocks {
            out.extend_from_slice(&b.0);
        }
        Vector(out)
    }

    /// View of entries `range.start..range.end` as a new vector.
    pub fn slice(&self, start: usize, end: usize) -> Vector {
        Vector(self.0[start..end].to_vec())
    }
}

impl std::ops::Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl std::ops::Add for &Vector {
    type Output = Vector;
    fn add(self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "add: length mismatch");
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }
}

impl std::ops::Sub for &Vector {
    type Output = Vector;
    fn sub(self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "sub: length mismatch");
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }
}

impl std::ops::Mul<f64> for &Vector {
    type Output = Vector;
    fn mul(self, c: f64) -> Vector {
        self.scaled(c)
    }
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major matrix.  Serializes as a nested array of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row slices; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(NumericsError::Dimension(format!(
                    "ragged rows: expected {c} columns, found {}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &e) in entries.iter().enumerate() {
            m.data[i * n + i] = e;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `A v`.
    pub fn matvec(&self, v: &Vector) -> Vector {
        assert_eq!(self.cols, v.len(), "matvec: dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for (i, o) in out.iter_mut().enumerate() {
            let row = self.row(i);
            *o = row.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        }
        Vector(out)
    }

    /// `Aᵀ v` without materializing the transpose.
    pub fn tr_matvec(&self, v: &Vector) -> Vector {
        assert_eq!(self.rows, v.len(), "tr_matvec: dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = self.row(i);
            let vi = v[i];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * vi;
            }
        }
        Vector(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul: dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.data[i * self.cols + k];
                if aik == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(orow) {
                    *o += aik * b;
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "sub: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|a| a * c).collect() }
    }

    pub fn add_assign_scaled(&mut self, c: f64, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add_assign_scaled: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        assert!(self.is_square(), "trace: matrix not square");
        (0..self.rows).map(|i| self.get(i, i)).sum()
    }

    /// `(A + Aᵀ)/2`; requires a square matrix.
    pub fn symmetrized(&self) -> Matrix {
        assert!(self.is_square(), "symmetrized: matrix not square");
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let m = 0.5 * (self.get(i, j) + self.get(j, i));
                out.set(i, j, m);
                out.set(j, i, m);
            }
        }
        out
    }

    /// Largest relative asymmetry `|a_ij - a_ji| / max(1, |a_ij|, |a_ji|)`.
    /// Returns 0 for non-square shapes' sake only on square input; panics otherwise.
    pub fn symmetry_deviation(&self) -> f64 {
        assert!(self.is_square(), "symmetry_deviation: matrix not square");
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let a = self.get(i, j);
                let b = self.get(j, i);
                let dev = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
                worst = worst.max(dev);
            }
        }
        worst
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }
}

/// Serialized form: nested row-major arrays, e.g. `[[1,0],[0,1]]`.
impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = (0..self.rows).map(|i| self.row(i)).collect();
        rows.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        Matrix::from_rows(&rows).map_err(|e| D::Error::custom(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Operator norm via power iteration
// ---------------------------------------------------------------------------

/// Spectral norm (largest singular value) of a square matrix.
///
/// Power iteration on `AᵀA` applied as two matrix-vector products, started
/// from the normalized all-ones vector.  Because a start vector can in
/// principle have no component along the top singular subspace, a second run
/// from a fixed sign-alternating ramp is always performed and the larger
/// estimate wins; an exact-kernel start additionally falls back to the basis
/// vector of the largest column.  `tol` is the relative stagnation threshold
/// on the Rayleigh quotient.
pub fn spectral_norm(a: &Matrix, tol: f64) -> Result<f64> {
    if !a.is_square() {
        return Err(NumericsError::NotSquare { rows: a.rows(), cols: a.cols() });
    }
    operator_norm(a, tol)
}

/// Largest singular value of an arbitrary (possibly rectangular) matrix.
pub(crate) fn operator_norm(a: &Matrix, tol: f64) -> Result<f64> {
    let n = a.cols();
    if n == 0 || a.rows() == 0 {
        return Ok(0.0);
    }
    let ones: Vec<f64> = vec![1.0 / (n as f64).sqrt(); n];
    let ramp: Vec<f64> = {
        let mut v: Vec<f64> = (0..n)
            .map(|j| if j % 2 == 0 { (j + 1) as f64 } else { -((j + 1) as f64) })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    };
    let s1 = power_sigma(a, ones, tol)?;
    let s2 = power_sigma(a, ramp, tol)?;
    let mut best = s1.max(s2);
    if best == 0.0 {
        // Both fixed starts sat in the kernel of AᵀA.  If the matrix has a
        // nonzero column, restart from that column's basis vector, which by
        // construction has a nonzero image.
        let mut best_col = 0;
        let mut best_norm = 0.0;
        for j in 0..n {
            let cn: f64 = (0..a.rows()).map(|i| a.get(i, j).powi(2)).sum();
            if cn > best_norm {
                best_norm = cn;
                best_col = j;
            }
        }
        if best_norm > 0.0 {
            let mut e = vec![0.0; n];
            e[best_col] = 1.0;
            best = power_sigma(a, e, tol)?;
        }
    }
    Ok(best)
}

/// One power-iteration run from a unit-norm start; returns the singular-value
/// estimate, or 0 when the iterate lands exactly in the kernel of `AᵀA`.
fn power_sigma(a: &Matrix, start: Vec<f64>, tol: f64) -> Result<f64> {
    let mut v = Vector(start);
    let mut lambda_prev = f64::INFINITY;
    for _ in 0..POWER_MAX_ITERS {
        let av = a.matvec(&v);
        let gv = a.tr_matvec(&av);
        let lambda = v.dot(&gv);
        if (lambda - lambda_prev).abs() <= tol * lambda.abs().max(1.0) {
            return Ok(lambda.max(0.0).sqrt());
        }
        let norm_gv = gv.norm();
        if norm_gv == 0.0 {
            return Ok(0.0);
        }
        lambda_prev = lambda;
        v = gv.scaled(1.0 / norm_gv);
    }
    Err(NumericsError::NoConvergence(POWER_MAX_ITERS))
}

// ---------------------------------------------------------------------------
// Symmetric eigensystems (cyclic Jacobi)
// ---------------------------------------------------------------------------

fn check_symmetric(a: &Matrix) -> Result<()> {
    if !a.is_square() {
        return Err(NumericsError::NotSquare { rows: a.rows(), cols: a.cols() });
    }
    let dev = a.symmetry_deviation();
    if dev > SYMMETRY_TOL {
        return Err(NumericsError::NotSymmetric { deviation: dev });
    }
    Ok(())
}

/// Full eigensystem of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching orthonormal
/// eigenvectors as the columns of the second output.  `tol` is an absolute
/// bound on eigenvalue error (the sweep stops once the off-diagonal Frobenius
/// mass is below it).
pub fn sym_eigen(a: &Matrix, tol: f64) -> Result<(Vec<f64>, Matrix)> {
    check_symmetric(a)?;
    let n = a.rows();
    let mut m = a.symmetrized();
    let mut v = Matrix::identity(n);
    // Scale-aware floor so tol = 0 still terminates at machine precision.
    let floor = 4.0 * f64::EPSILON * m.frobenius_norm();
    let threshold = tol.max(floor).max(f64::MIN_POSITIVE);

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = {
            let mut s = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    s += 2.0 * m.get(i, j).powi(2);
                }
            }
            s.sqrt()
        };
        if off <= threshold {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Rotate rows/columns p and q of m, and columns of v.
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if !converged {
        return Err(NumericsError::NoConvergence(JACOBI_MAX_SWEEPS));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    order.sort_by(|&i, &j| diag[i].partial_cmp(&diag[j]).expect("eigenvalue is NaN"));
    let values: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(k, new_col, v.get(k, old_col));
        }
    }
    Ok((values, vectors))
}

/// Smallest eigenvalue of a symmetric matrix, accurate to absolute `tol`.
///
/// Rejects inputs whose asymmetry exceeds [`SYMMETRY_TOL`].
pub fn min_eigenvalue_symmetric(a: &Matrix, tol: f64) -> Result<f64> {
    let (values, _) = sym_eigen(a, tol)?;
    Ok(values[0])
}

// ---------------------------------------------------------------------------
// SPD solve (Cholesky + one refinement step)
// ---------------------------------------------------------------------------

/// Lower-triangular Cholesky factor of an SPD matrix.
fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k).powi(2);
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(NumericsError::NotPositiveDefinite { pivot: d, index: j });
        }
        let ljj = d.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &Matrix, b: &Vector) -> Vector {
    let n = l.rows();
    // Forward: L y = b.
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l.get(i, k) * y[k];
        }
        y[i] = s / l.get(i, i);
    }
    // Backward: Lᵀ x = y.
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    Vector(x)
}

/// Solves `A x = b` for symmetric positive-definite `A`.
///
/// Cholesky factorization followed by one iterative-refinement step; for
/// well-conditioned systems the residual satisfies `‖Ax − b‖ ≤ 1e-10·‖b‖`.
/// Fails with [`NumericsError::NotPositiveDefinite`] when a pivot is not
/// strictly positive and [`NumericsError::NotSymmetric`] on asymmetric input.
pub fn solve_spd(a: &Matrix, b: &Vector) -> Result<Vector> {
    check_symmetric(a)?;
    if a.cols() != b.len() {
        return Err(NumericsError::Dimension(format!(
            "solve_spd: matrix is {}x{} but rhs has length {}",
            a.rows(),
            a.cols(),
            b.len()
        )));
    }
    let l = cholesky(a)?;
    let mut x = cholesky_solve(&l, b);
    // One refinement step knocks the residual down near machine precision.
    let r = b - &a.matvec(&x);
    if r.norm() > 0.0 {
        let dx = cholesky_solve(&l, &r);
        x.add_scaled(1.0, &dx);
    }
    Ok(x)
}

/// Reusable SPD factorization for solving against many right-hand sides.
pub struct SpdFactor {
    a: Matrix,
    l: Matrix,
}

impl SpdFactor {
    pub fn new(a: &Matrix) -> Result<Self> {
        check_symmetric(a)?;
        let l = cholesky(a)?;
        Ok(SpdFactor { a: a.clone(), l })
    }

    pub fn solve(&self, b: &Vector) -> Vector {
        let mut x = cholesky_solve(&self.l, b);
        let r = b - &self.a.matvec(&x);
        if r.norm() > 0.0 {
            let dx = cholesky_solve(&self.l, &r);
            x.add_scaled(1.0, &dx);
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn spectral_norm_of_identity_is_one() {
        let a = Matrix::identity(5);
        assert!((spectral_norm(&a, 1e-12).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn spectral_norm_of_jordan_block_is_one() {
        // For the 3x3 nilpotent shift J, JᵀJ = diag(0, 1, 1) by direct
        // multiplication, so the largest singular value is exactly 1 even
        // though every eigenvalue of J is 0.
        let j = mat(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &[0.0, 0.0, 0.0]]);
        assert!((spectral_norm(&j, 1e-12).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn spectral_norm_matches_closed_form_symmetric() {
        // Eigenvalues of [[2,1],[1,2]] are 2 ± 1, so the norm is 3.
        let a = mat(&[&[2.0, 1.0], &[1.0, 2.0]]);
        assert!((spectral_norm(&a, 1e-12).unwrap() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn spectral_norm_rejects_non_square() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(spectral_norm(&a, 1e-10), Err(NumericsError::NotSquare { .. })));
    }

    #[test]
    fn spectral_norm_of_zero_matrix_is_zero() {
        let a = Matrix::zeros(4, 4);
        assert_eq!(spectral_norm(&a, 1e-10).unwrap(), 0.0);
    }

    #[test]
    fn spectral_norm_survives_kernel_starts() {
        // The single row (5, -2, -3) is orthogonal to both the all-ones start
        // and the alternating ramp (1, -2, 3), so both fixed starts land in
        // ker(AᵀA) and the basis-vector fallback must kick in.  The norm of a
        // rank-one matrix is the row norm: √(25 + 4 + 9) = √38.
        let a = mat(&[&[5.0, -2.0, -3.0], &[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]]);
        assert!((spectral_norm(&a, 1e-12).unwrap() - 38.0f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn operator_norm_handles_rectangular() {
        // AᵀA = [[1,0],[0,4]] for A = [[1,0],[0,2],[0,0]]: norm 2.
        let a = mat(&[&[1.0, 0.0], &[0.0, 2.0], &[0.0, 0.0]]);
        assert!((operator_norm(&a, 1e-12).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn min_eigenvalue_matches_closed_form() {
        // [[2,1],[1,2]] has eigenvalues {1, 3}.
        let a = mat(&[&[2.0, 1.0], &[1.0, 2.0]]);
        assert!((min_eigenvalue_symmetric(&a, 1e-12).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn min_eigenvalue_rejects_asymmetric() {
        let a = mat(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(matches!(
            min_eigenvalue_symmetric(&a, 1e-10),
            Err(NumericsError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn sym_eigen_reconstructs_input() {
        let a = mat(&[&[4.0, 1.0, 0.5], &[1.0, 3.0, -0.25], &[0.5, -0.25, 2.0]]);
        let (vals, vecs) = sym_eigen(&a, 0.0).unwrap();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        let recon = vecs.matmul(&Matrix::diag(&vals)).matmul(&vecs.transpose());
        assert!(recon.sub(&a).frobenius_norm() < 1e-12 * a.frobenius_norm().max(1.0));
        // Orthonormality of eigenvectors.
        let gram = vecs.transpose().matmul(&vecs);
        assert!(gram.sub(&Matrix::identity(3)).frobenius_norm() < 1e-12);
    }

    #[test]
    fn solve_spd_matches_adjugate_solution() {
        // [[4,1],[1,3]] x = (1,2): det = 11, x = (3·1 - 1·2, -1·1 + 4·2)/11.
        let a = mat(&[&[4.0, 1.0], &[1.0, 3.0]]);
        let x = solve_spd(&a, &Vector::from_vec(vec![1.0, 2.0])).unwrap();
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn solve_spd_rejects_indefinite() {
        let a = mat(&[&[1.0, 2.0], &[2.0, 1.0]]); // eigenvalues {-1, 3}
        let b = Vector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(solve_spd(&a, &b), Err(NumericsError::NotPositiveDefinite { .. })));
    }

    #[test]
    fn matrix_serde_round_trips_as_nested_rows() {
        let a = mat(&[&[1.0, 2.5], &[-3.0, 4.0]]);
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(json, "[[1.0,2.5],[-3.0,4.0]]");
        let back: Matrix = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn matrix_deserialize_rejects_ragged_rows() {
        let err = serde_json::from_str::<Matrix>("[[1.0,2.0],[3.0]]");
        assert!(err.is_err());
    }

    proptest! {
        #[test]
        fn spd_solve_residual_is_tiny(
            entries in proptest::collection::vec(-1.0f64..1.0, 16),
            rhs in proptest::collection::vec(-10.0f64..10.0, 4),
        ) {
            // A = MᵀM + I is SPD with condition number bounded by 1 + ‖M‖².
            let m = Matrix { rows: 4, cols: 4, data: entries };
            let a = m.transpose().matmul(&m).add(&Matrix::identity(4)).symmetrized();
            let b = Vector::from_vec(rhs);
            let x = solve_spd(&a, &b).unwrap();
            let resid = (&b - &a.matvec(&x)).norm();
            prop_assert!(resid <= 1e-10 * b.norm().max(1e-300));
        }

        #[test]
        fn spectral_norm_dominates_image_norms(
            entries in proptest::collection::vec(-5.0f64..5.0, 9),
            probe in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            let a = Matrix { rows: 3, cols: 3, data: entries };
            let sigma = spectral_norm(&a, 1e-12).unwrap();
            let v = Vector::from_vec(probe);
            prop_assert!(a.matvec(&v).norm() <= sigma * v.norm() * (1.0 + 1e-8) + 1e-12);
        }

        #[test]
        fn min_eigenvalue_shifts_with_identity(
            entries in proptest::collection::vec(-2.0f64..2.0, 9),
            shift in -3.0f64..3.0,
        ) {
            let m = Matrix { rows: 3, cols: 3, data: entries };
            let a = m.symmetrized();
            let shifted = a.add(&Matrix::identity(3).scaled(shift));
            let e1 = min_eigenvalue_symmetric(&a, 0.0).unwrap();
            let e2 = min_eigenvalue_symmetric(&shifted, 0.0).unwrap();
            prop_assert!((e2 - (e1 + shift)).abs() < 1e-9);
        }
    }
}
