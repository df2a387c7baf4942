//! Dense vector arithmetic, symmetric positive (semi-)definite operators,
//! the conjugate-gradient solver and extremal-eigenvalue estimates.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`. Matrices are small, dense and
//! row-major. Curvature matrices are only ever consumed through
//! [`SpdOperator`], so a sample-based Fisher-vector product and an explicit
//! matrix look the same to the optimizers.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by the linear-algebra layer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("numerical breakdown in conjugate gradient at iteration {iteration}")]
    NumericalBreakdown { iteration: usize },
    #[error("spectrum estimate did not converge in {iterations} iterations (last Rayleigh quotient {last_rayleigh})")]
    NotConverged { iterations: usize, last_rayleigh: f64 },
    #[error("matrix is singular to working precision")]
    Singular,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scaled(alpha: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| alpha * v).collect()
}

pub fn add(x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(a, b)| a + b).collect()
}

pub fn sub(x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(a, b)| a - b).collect()
}

pub fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Cosine of the angle between two vectors; `None` if either is zero.
pub fn cosine(x: &[f64], y: &[f64]) -> Option<f64> {
    let nx = norm(x);
    let ny = norm(y);
    if nx == 0.0 || ny == 0.0 {
        return None;
    }
    Some(dot(x, y) / (nx * ny))
}

pub(crate) fn check_len(expected: usize, v: &[f64]) -> Result<(), LinalgError> {
    if v.len() != expected {
        return Err(LinalgError::DimensionMismatch {
            expected,
            found: v.len(),
        });
    }
    Ok(())
}

/// Small dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = *d;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for r in rows {
            check_len(n_cols, r)?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: n_rows,
            cols: n_cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
        check_len(self.cols, x)?;
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch {
                expected: self.cols,
                found: other.rows,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    /// Largest absolute asymmetry `|A_ij - A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.rows.min(self.cols) {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Solve `A x = rhs` by LU factorisation with partial pivoting.
    pub fn lu_solve(&self, rhs: &[f64]) -> Result<Vec<f64>, LinalgError> {
        Ok(LuFactors::new(self)?.solve(rhs))
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// LU factorisation with partial pivoting, reusable across right-hand sides.
#[derive(Clone, Debug)]
pub struct LuFactors {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl LuFactors {
    pub fn new(m: &DenseMatrix) -> Result<Self, LinalgError> {
        if m.rows != m.cols {
            return Err(LinalgError::InvalidArgument(format!(
                "LU needs a square matrix, got {}x{}",
                m.rows, m.cols
            )));
        }
        let n = m.rows;
        let mut lu = m.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = lu.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())).max(1.0);
        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if !(pivot > f64::EPSILON * scale * 1e-4) {
                return Err(LinalgError::Singular);
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let d = lu[k * n + k];
            for i in (k + 1)..n {
                let f = lu[i * n + k] / d;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in (k + 1)..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| rhs[p]).collect();
        for i in 0..n {
            let mut acc = x[i];
            for j in 0..i {
                acc -= self.lu[i * n + j] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in (i + 1)..n {
                acc -= self.lu[i * n + j] * x[j];
            }
            x[i] = acc / self.lu[i * n + i];
        }
        x
    }
}

type ApplyFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// A symmetric positive semi-definite linear operator `x -> (A + damping I) x`.
///
/// Cloning is cheap; the underlying product is shared.
#[derive(Clone)]
pub struct SpdOperator {
    apply: Arc<ApplyFn>,
    dim: usize,
    damping: f64,
}

impl fmt::Debug for SpdOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpdOperator")
            .field("dim", &self.dim)
            .field("damping", &self.damping)
            .finish_non_exhaustive()
    }
}

impl SpdOperator {
    /// Wrap an undamped product `x -> A x`. `damping * x` is added on every apply.
    pub fn new<F>(dim: usize, damping: f64, apply: F) -> Result<Self, LinalgError>
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        if dim == 0 {
            return Err(LinalgError::InvalidArgument("operator dimension must be positive".into()));
        }
        if !(damping >= 0.0) || !damping.is_finite() {
            return Err(LinalgError::InvalidArgument(format!(
                "damping must be finite and nonnegative, got {damping}"
            )));
        }
        Ok(Self {
            apply: Arc::new(apply),
            dim,
            damping,
        })
    }

    /// Operator backed by an explicit symmetric matrix.
    ///
    /// Only symmetry is checked. Definiteness is the caller's responsibility,
    /// which lets analysis code run the update formulas on indefinite metrics.
    pub fn from_matrix(m: DenseMatrix, damping: f64) -> Result<Self, LinalgError> {
        if m.rows() != m.cols() {
            return Err(LinalgError::InvalidArgument("operator matrix must be square".into()));
        }
        let scale = m.as_slice().iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
        if m.asymmetry() > 1e-12 * scale {
            return Err(LinalgError::InvalidArgument("operator matrix must be symmetric".into()));
        }
        let dim = m.rows();
        Self::new(dim, damping, move |x| {
            (0..m.rows()).map(|i| dot(m.row(i), x)).collect()
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(dim, 0.0, |x| x.to_vec()).expect("identity operator is valid")
    }

    pub fn diagonal(diag: Vec<f64>, damping: f64) -> Result<Self, LinalgError> {
        let dim = diag.len();
        Self::new(dim, damping, move |x| {
            x.iter().zip(&diag).map(|(a, d)| a * d).collect()
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    /// Same product with a different damping constant.
    pub fn with_damping(&self, damping: f64) -> Result<Self, LinalgError> {
        if !(damping >= 0.0) || !damping.is_finite() {
            return Err(LinalgError::InvalidArgument(format!(
                "damping must be finite and nonnegative, got {damping}"
            )));
        }
        Ok(Self {
            apply: Arc::clone(&self.apply),
            dim: self.dim,
            damping,
        })
    }

    /// `(A + damping I) x`. Panics on a length mismatch; see [`Self::try_apply`].
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.try_apply(x).expect("operator applied to vector of wrong length")
    }

    pub fn try_apply(&self, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
        check_len(self.dim, x)?;
        let mut y = (self.apply)(x);
        check_len(self.dim, &y)?;
        if self.damping != 0.0 {
            axpy(self.damping, x, &mut y);
        }
        Ok(y)
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        dot(x, &self.apply(x))
    }

    /// Materialise the operator column by column.
    pub fn to_dense(&self) -> DenseMatrix {
        let n = self.dim;
        let mut m = DenseMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.apply(&e);
            for i in 0..n {
                m[(i, j)] = col[i];
            }
            e[j] = 0.0;
        }
        m
    }
}

/// Iteration budget and stopping tolerance for [`conjugate_gradient`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            max_iters: 10,
            tol: 1e-10,
        }
    }
}

impl CgConfig {
    pub fn exact(dim: usize) -> Self {
        Self {
            max_iters: dim.max(1),
            tol: 1e-12,
        }
    }
}

/// Outcome of a conjugate-gradient solve.
#[derive(Clone, Debug, PartialEq)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// True relative residual `||A x - rhs|| / ||rhs||` of the returned `x`.
    pub relative_residual: f64,
    /// Whether the tolerance was met; `false` means the budget ran out.
    pub converged: bool,
}

/// Solve `op x = rhs` with at most `max_iters` conjugate-gradient iterations.
pub fn conjugate_gradient(
    op: &SpdOperator,
    rhs: &[f64],
    max_iters: usize,
    tol: f64,
) -> Result<CgSolution, LinalgError> {
    check_len(op.dim(), rhs)?;
    if max_iters == 0 {
        return Err(LinalgError::InvalidArgument("max_iters must be at least 1".into()));
    }
    if !all_finite(rhs) {
        return Err(LinalgError::NumericalBreakdown { iteration: 0 });
    }
    let n = rhs.len();
    let rhs_norm = norm(rhs);
    if rhs_norm == 0.0 {
        return Ok(CgSolution {
            x: vec![0.0; n],
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        });
    }

    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    // Residuals of exact CG are mutually orthogonal. Enforcing that explicitly
    // keeps the finite-termination property in floating point.
    let mut basis: Vec<Vec<f64>> = vec![scaled(1.0 / rr.sqrt(), &r)];
    let mut iterations = 0;
    let mut converged = false;
    for k in 1..=max_iters {
        iterations = k;
        let ap = op.try_apply(&p)?;
        let pap = dot(&p, &ap);
        let alpha = rr / pap;
        if !alpha.is_finite() {
            return Err(LinalgError::NumericalBreakdown { iteration: k });
        }
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        for q in &basis {
            let c = dot(q, &r);
            axpy(-c, q, &mut r);
        }
        let rr_next = dot(&r, &r);
        if !rr_next.is_finite() || !all_finite(&x) {
            return Err(LinalgError::NumericalBreakdown { iteration: k });
        }
        if rr_next.sqrt() <= tol * rhs_norm {
            converged = true;
            break;
        }
        if basis.len() < n {
            basis.push(scaled(1.0 / rr_next.sqrt(), &r));
        }
        let beta = rr_next / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_next;
    }

    let residual = sub(&op.try_apply(&x)?, rhs);
    let relative_residual = norm(&residual) / rhs_norm;
    if !relative_residual.is_finite() {
        return Err(LinalgError::NumericalBreakdown { iteration: iterations });
    }
    // The recursive residual can drift from the true one; report the true one.
    converged = converged || relative_residual <= tol;
    Ok(CgSolution {
        x,
        iterations,
        relative_residual,
        converged,
    })
}

/// Extremal eigenvalues of a symmetric positive definite operator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub condition_number: f64,
}

impl ConditionReport {
    pub fn new(sigma_max: f64, sigma_min: f64) -> Result<Self, LinalgError> {
        if !(sigma_min > 0.0) || !(sigma_max >= sigma_min) || !sigma_max.is_finite() {
            return Err(LinalgError::InvalidArgument(format!(
                "invalid spectrum bounds: max {sigma_max}, min {sigma_min}"
            )));
        }
        Ok(Self {
            sigma_max,
            sigma_min,
            condition_number: sigma_max / sigma_min,
        })
    }
}

const SPECTRUM_REL_TOL: f64 = 1e-12;

/// Power iteration for the largest eigenvalue and inverse iteration (each
/// inverse applied by conjugate gradient) for the smallest.
pub fn estimate_spectrum(op: &SpdOperator, iters: usize) -> Result<ConditionReport, LinalgError> {
    if iters == 0 {
        return Err(LinalgError::InvalidArgument("iters must be at least 1".into()));
    }
    let n = op.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_cafe);
    let start: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();

    let sigma_max = power_iteration(n, iters, &start, |v| op.try_apply(v), |v| {
        op.quad_form(v)
    })?;

    let cg = CgConfig {
        max_iters: 4 * n + 10,
        tol: 1e-13,
    };
    let sigma_min = power_iteration(
        n,
        iters,
        &start,
        |v| Ok(conjugate_gradient(op, v, cg.max_iters, cg.tol)?.x),
        |v| op.quad_form(v),
    )?;

    ConditionReport::new(sigma_max, sigma_min.min(sigma_max))
}

/// Repeatedly apply `step`, normalising, until the Rayleigh quotient of the
/// original operator (`rayleigh`) stops changing.
fn power_iteration(
    n: usize,
    iters: usize,
    start: &[f64],
    step: impl Fn(&[f64]) -> Result<Vec<f64>, LinalgError>,
    rayleigh: impl Fn(&[f64]) -> f64,
) -> Result<f64, LinalgError> {
    let mut v = scaled(1.0 / norm(start), start);
    let mut last = rayleigh(&v);
    let mut stable = 0;
    for _ in 0..iters {
        let w = step(&v)?;
        let nw = norm(&w);
        if !(nw > 0.0) || !nw.is_finite() {
            return Err(LinalgError::NotConverged {
                iterations: iters,
                last_rayleigh: last,
            });
        }
        v = scaled(1.0 / nw, &w);
        let q = rayleigh(&v);
        if (q - last).abs() <= SPECTRUM_REL_TOL * q.abs().max(f64::MIN_POSITIVE) {
            stable += 1;
            if stable >= 3 || n == 1 {
                return Ok(q);
            }
        } else {
            stable = 0;
        }
        last = q;
    }
    Err(LinalgError::NotConverged {
        iterations: iters,
        last_rayleigh: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::{prop_assert, proptest};

    fn random_spd(n: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = DenseMatrix::from_row_major(
            n,
            n,
            (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut a = b.matmul(&b.transpose()).unwrap();
        for i in 0..n {
            a[(i, i)] += 0.5;
        }
        a
    }

    #[test]
    fn identity_solve_takes_one_iteration() {
        let op = SpdOperator::identity(3);
        let sol = conjugate_gradient(&op, &[1.0, 2.0, 3.0], 10, 1e-10).unwrap();
        assert_eq!(sol.iterations, 1);
        assert!(sol.converged);
        assert_eq!(sol.x, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn diagonal_solve() {
        let op = SpdOperator::diagonal(vec![2.0, 4.0], 0.0).unwrap();
        let sol = conjugate_gradient(&op, &[2.0, 4.0], 10, 1e-10).unwrap();
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(sol.x[1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_rhs_returns_zero() {
        let op = SpdOperator::identity(4);
        let sol = conjugate_gradient(&op, &[0.0; 4], 3, 1e-10).unwrap();
        assert_eq!(sol.x, vec![0.0; 4]);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn breakdown_names_iteration() {
        let op = SpdOperator::new(2, 0.0, |_| vec![0.0, 0.0]).unwrap();
        let err = conjugate_gradient(&op, &[1.0, 0.0], 5, 1e-10).unwrap_err();
        assert_eq!(err, LinalgError::NumericalBreakdown { iteration: 1 });
    }

    #[test]
    fn budget_exhaustion_is_reported() {
        let a = random_spd(12, 3);
        let op = SpdOperator::from_matrix(a, 0.0).unwrap();
        let rhs: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let sol = conjugate_gradient(&op, &rhs, 2, 1e-14).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 2);
    }

    #[test]
    fn rejects_wrong_length() {
        let op = SpdOperator::identity(3);
        assert!(matches!(
            conjugate_gradient(&op, &[1.0], 3, 1e-10),
            Err(LinalgError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn lu_matches_known_solution() {
        let m = DenseMatrix::from_rows(&[vec![0.0, 2.0, 1.0], vec![1.0, 1.0, 0.0], vec![3.0, 0.0, 1.0]])
            .unwrap();
        let x_true = [1.0, -2.0, 0.5];
        let rhs = m.matvec(&x_true).unwrap();
        let x = m.lu_solve(&rhs).unwrap();
        for (a, b) in x.iter().zip(x_true) {
            assert_relative_eq!(*a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn lu_detects_singular() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert_eq!(m.lu_solve(&[1.0, 1.0]), Err(LinalgError::Singular));
    }

    #[test]
    fn spectrum_of_diagonal() {
        let op = SpdOperator::diagonal(vec![4.0, 1.0], 0.0).unwrap();
        let rep = estimate_spectrum(&op, 500).unwrap();
        assert_relative_eq!(rep.sigma_max, 4.0, max_relative = 1e-9);
        assert_relative_eq!(rep.sigma_min, 1.0, max_relative = 1e-9);
        assert_relative_eq!(rep.condition_number, 4.0, max_relative = 1e-9);
    }

    #[test]
    fn spectrum_of_identity() {
        let rep = estimate_spectrum(&SpdOperator::identity(5), 50).unwrap();
        assert_relative_eq!(rep.condition_number, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn spectrum_reports_non_convergence() {
        let op = SpdOperator::diagonal(vec![1.0, 0.999, 0.5], 0.0).unwrap();
        match estimate_spectrum(&op, 2) {
            Err(LinalgError::NotConverged { last_rayleigh, .. }) => assert!(last_rayleigh > 0.5),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn to_dense_round_trips() {
        let a = random_spd(5, 9);
        let op = SpdOperator::from_matrix(a.clone(), 0.25).unwrap();
        let d = op.to_dense();
        for i in 0..5 {
            for j in 0..5 {
                let expect = a[(i, j)] + if i == j { 0.25 } else { 0.0 };
                assert_relative_eq!(d[(i, j)], expect, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn from_matrix_rejects_asymmetric() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(SpdOperator::from_matrix(m, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn cg_exact_in_n_iterations(n in 1usize..=16, seed in 0u64..1000) {
            let a = random_spd(n, seed);
            let op = SpdOperator::from_matrix(a, 0.0).unwrap();
            let rhs: Vec<f64> = (0..n).map(|i| ((i + 1) as f64 * 0.7).cos()).collect();
            let sol = conjugate_gradient(&op, &rhs, n, 1e-10).unwrap();
            prop_assert!(sol.relative_residual <= 1e-10, "residual {}", sol.relative_residual);
        }

        #[test]
        fn solution_norm_shrinks_with_damping(seed in 0u64..500, eps in 0.0f64..1.0, extra in 1e-3f64..2.0) {
            let n = 6;
            let op = SpdOperator::from_matrix(random_spd(n, seed), eps).unwrap();
            let op2 = op.with_damping(eps + extra).unwrap();
            let rhs: Vec<f64> = (0..n).map(|i| (i as f64 + seed as f64).sin()).collect();
            let x1 = conjugate_gradient(&op, &rhs, 4 * n, 1e-13).unwrap().x;
            let x2 = conjugate_gradient(&op2, &rhs, 4 * n, 1e-13).unwrap().x;
            prop_assert!(norm(&x2) <= norm(&x1) * (1.0 + 1e-9));
        }

        #[test]
        fn matrix_operator_is_symmetric(seed in 0u64..500) {
            let n = 7;
            let op = SpdOperator::from_matrix(random_spd(n, seed), 1e-8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lhs = dot(&x, &op.apply(&y));
            let rhs = dot(&op.apply(&x), &y);
            prop_assert!((lhs - rhs).abs() <= 1e-8 * norm(&x) * norm(&y));
        }
    }
}
