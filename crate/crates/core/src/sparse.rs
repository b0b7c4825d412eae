//! Compressed-row sparse matrices and the linear solvers used by every
//! assembly/solve step.
//!
//! The direct path wraps the supernodal sparse LU of `faer`; the iterative
//! path is Jacobi-preconditioned conjugate gradients (SPD systems) or
//! BiCGSTAB (everything else).

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, SymbolicSparseColMat};
use faer::Mat;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is numerically singular")]
    Singular,
    #[error("{method:?} did not converge: relative residual {residual:.3e} after {iterations} iterations")]
    NotConverged { method: SolveMethod, iterations: usize, residual: f64 },
    #[error("sparse factorization failed: {0}")]
    Backend(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveMethod {
    Direct,
    Cg,
    BiCgStab,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    /// Final relative residual `||Ax - b|| / ||b||`.
    pub residual: f64,
    pub method: SolveMethod,
}

/// Compressed-row matrix with strictly increasing column indices per row.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub values: Vec<f64>,
}

/// Coordinate-triplet accumulator; duplicates are summed on compression.
#[derive(Clone, Debug)]
pub struct TripletBuilder {
    n_rows: usize,
    n_cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(n_rows: usize, n_cols: usize) -> Self {
        Self { n_rows, n_cols, entries: Vec::new() }
    }

    pub fn with_capacity(n_rows: usize, n_cols: usize, cap: usize) -> Self {
        Self { n_rows, n_cols, entries: Vec::with_capacity(cap) }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.n_rows && col < self.n_cols);
        self.entries.push((row, col, value));
    }

    pub fn to_csr(mut self) -> CsrMatrix {
        // stable sort keeps the summation order of duplicates deterministic
        self.entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_offsets = vec![0usize; self.n_rows + 1];
        let mut col_indices = Vec::with_capacity(self.entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in self.entries {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_indices.push(c);
                values.push(v);
                row_offsets[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..self.n_rows {
            row_offsets[i + 1] += row_offsets[i];
        }
        CsrMatrix { n_rows: self.n_rows, n_cols: self.n_cols, row_offsets, col_indices, values }
    }
}

impl CsrMatrix {
    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        TripletBuilder::new(n_rows, n_cols).to_csr()
    }

    /// Builds a matrix from a dense row-major array, dropping exact zeros.
    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.len());
        let mut b = TripletBuilder::new(n_rows, n_cols);
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    b.push(i, j, v);
                }
            }
        }
        b.to_csr()
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_square(&self) -> bool {
        self.n_rows == self.n_cols
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_offsets[i]..self.row_offsets[i + 1];
        self.col_indices[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_offsets[i]..self.row_offsets[i + 1];
        match self.col_indices[r.clone()].binary_search(&j) {
            Ok(k) => self.values[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n_cols]; self.n_rows];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        out
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n_rows.min(self.n_cols)).map(|i| self.get(i, i)).collect()
    }

    /// `y = A x`.
    pub fn spmv(&self, x: &[f64]) -> Result<Vec<f64>, SparseError> {
        if x.len() != self.n_cols {
            return Err(SparseError::DimensionMismatch(format!(
                "matrix has {} columns, vector has length {}",
                self.n_cols,
                x.len()
            )));
        }
        Ok(self.mul_vec(x))
    }

    pub(crate) fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut b = TripletBuilder::with_capacity(self.n_cols, self.n_rows, self.nnz());
        for i in 0..self.n_rows {
            for (j, v) in self.row(i) {
                b.push(j, i, v);
            }
        }
        b.to_csr()
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `alpha * self + beta * other` over the union of both patterns.
    pub fn linear_combination(&self, alpha: f64, other: &CsrMatrix, beta: f64) -> CsrMatrix {
        assert_eq!((self.n_rows, self.n_cols), (other.n_rows, other.n_cols));
        let mut b = TripletBuilder::with_capacity(self.n_rows, self.n_cols, self.nnz() + other.nnz());
        for i in 0..self.n_rows {
            for (j, v) in self.row(i) {
                b.push(i, j, alpha * v);
            }
            for (j, v) in other.row(i) {
                b.push(i, j, beta * v);
            }
        }
        b.to_csr()
    }

    /// Checks the structural invariants of the compressed-row layout.
    pub fn is_well_formed(&self) -> bool {
        self.row_offsets.len() == self.n_rows + 1
            && self.row_offsets[0] == 0
            && self.row_offsets.windows(2).all(|w| w[0] <= w[1])
            && self.row_offsets[self.n_rows] == self.nnz()
            && self.col_indices.len() == self.values.len()
            && (0..self.n_rows).all(|i| {
                let cols = &self.col_indices[self.row_offsets[i]..self.row_offsets[i + 1]];
                cols.windows(2).all(|w| w[0] < w[1]) && cols.iter().all(|&c| c < self.n_cols)
            })
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn relative_residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.mul_vec(x);
    let r: f64 = ax.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let nb = norm2(b);
    if nb == 0.0 {
        r
    } else {
        r / nb
    }
}

/// Symbolic LU analysis, reusable across matrices sharing one pattern.
#[derive(Clone, Debug)]
pub struct LuSymbolic {
    pattern: CsrMatrix,
    symbolic: SymbolicLu<usize>,
}

impl LuSymbolic {
    pub fn new(a: &CsrMatrix) -> Result<Self, SparseError> {
        if !a.is_square() {
            return Err(SparseError::DimensionMismatch(format!(
                "LU needs a square matrix, got {}x{}",
                a.n_rows, a.n_cols
            )));
        }
        let at = transposed_csc(a);
        let symbolic =
            SymbolicLu::try_new(at.symbolic()).map_err(|e| SparseError::Backend(format!("{e:?}")))?;
        let pattern = CsrMatrix { values: Vec::new(), ..a.clone() };
        Ok(Self { pattern, symbolic })
    }

    pub fn matches(&self, a: &CsrMatrix) -> bool {
        self.pattern.n_rows == a.n_rows
            && self.pattern.row_offsets == a.row_offsets
            && self.pattern.col_indices == a.col_indices
    }
}

// Our CSR arrays are exactly the CSC arrays of the transpose; we factor
// A^T and use transposed solves.
fn transposed_csc(a: &CsrMatrix) -> SparseColMat<usize, f64> {
    let sym = SymbolicSparseColMat::new_checked(
        a.n_cols,
        a.n_rows,
        a.row_offsets.clone(),
        None,
        a.col_indices.clone(),
    );
    SparseColMat::new(sym, a.values.clone())
}

/// Numeric LU factorization of one matrix; solve as many right-hand sides
/// as needed.
pub struct LuFactorization {
    matrix: CsrMatrix,
    lu: Lu<usize, f64>,
}

impl LuFactorization {
    pub fn new(a: &CsrMatrix) -> Result<Self, SparseError> {
        let symbolic = LuSymbolic::new(a)?;
        Self::with_symbolic(&symbolic, a)
    }

    pub fn with_symbolic(symbolic: &LuSymbolic, a: &CsrMatrix) -> Result<Self, SparseError> {
        if !symbolic.matches(a) {
            return Err(SparseError::DimensionMismatch(
                "matrix pattern differs from the symbolic analysis".into(),
            ));
        }
        let at = transposed_csc(a);
        let lu = Lu::try_new_with_symbolic(symbolic.symbolic.clone(), at.as_ref()).map_err(|e| match e {
            faer::sparse::linalg::LuError::SymbolicSingular { .. } => SparseError::Singular,
            other => SparseError::Backend(format!("{other:?}")),
        })?;
        Ok(Self { matrix: a.clone(), lu })
    }

    pub fn dim(&self) -> usize {
        self.matrix.n_rows
    }

    pub fn solve(&self, b: &[f64]) -> Result<(Vec<f64>, SolveReport), SparseError> {
        let n = self.dim();
        if b.len() != n {
            return Err(SparseError::DimensionMismatch(format!(
                "system of size {n}, right-hand side of length {}",
                b.len()
            )));
        }
        if b.iter().all(|v| *v == 0.0) {
            let report = SolveReport { iterations: 0, residual: 0.0, method: SolveMethod::Direct };
            return Ok((vec![0.0; n], report));
        }
        let mut x = self.apply(b);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SparseError::Singular);
        }
        let mut residual = relative_residual(&self.matrix, &x, b);
        let mut iterations = 1;
        // one step of iterative refinement when the first pass is loose
        if residual > 1e-13 {
            let ax = self.matrix.mul_vec(&x);
            let r: Vec<f64> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
            let dx = self.apply(&r);
            let refined: Vec<f64> = x.iter().zip(&dx).map(|(p, q)| p + q).collect();
            let res2 = relative_residual(&self.matrix, &refined, b);
            if res2.is_finite() && res2 < residual {
                x = refined;
                residual = res2;
                iterations = 2;
            }
        }
        if !residual.is_finite() || residual > 1e-6 {
            return Err(SparseError::Singular);
        }
        Ok((x, SolveReport { iterations, residual, method: SolveMethod::Direct }))
    }

    fn apply(&self, b: &[f64]) -> Vec<f64> {
        let mut rhs = Mat::<f64>::from_fn(b.len(), 1, |i, _| b[i]);
        self.lu.solve_transpose_in_place(rhs.as_mut());
        (0..b.len()).map(|i| rhs[(i, 0)]).collect()
    }
}

/// Sparse LU solve of a square nonsingular system.
pub fn solve_direct(a: &CsrMatrix, b: &[f64]) -> Result<(Vec<f64>, SolveReport), SparseError> {
    if b.len() != a.n_rows {
        return Err(SparseError::DimensionMismatch(format!(
            "system of size {}, right-hand side of length {}",
            a.n_rows,
            b.len()
        )));
    }
    LuFactorization::new(a)?.solve(b)
}

/// Jacobi-preconditioned Krylov solve: CG when `spd`, BiCGSTAB otherwise.
pub fn solve_iterative(
    a: &CsrMatrix,
    b: &[f64],
    spd: bool,
    tol: f64,
    maxit: usize,
) -> Result<(Vec<f64>, SolveReport), SparseError> {
    if !a.is_square() || b.len() != a.n_rows {
        return Err(SparseError::DimensionMismatch(format!(
            "{}x{} system with right-hand side of length {}",
            a.n_rows,
            a.n_cols,
            b.len()
        )));
    }
    let n = b.len();
    let nb = norm2(b);
    let method = if spd { SolveMethod::Cg } else { SolveMethod::BiCgStab };
    if nb == 0.0 {
        return Ok((vec![0.0; n], SolveReport { iterations: 0, residual: 0.0, method }));
    }
    let inv_diag: Vec<f64> =
        a.diagonal().iter().map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 }).collect();
    let (x, iterations) = if spd {
        cg(a, b, &inv_diag, tol, maxit, nb)
    } else {
        bicgstab(a, b, &inv_diag, tol, maxit, nb)
    };
    let residual = relative_residual(a, &x, b);
    let report = SolveReport { iterations, residual, method };
    if residual.is_finite() && residual <= tol {
        Ok((x, report))
    } else {
        Err(SparseError::NotConverged { method, iterations, residual })
    }
}

fn cg(a: &CsrMatrix, b: &[f64], inv_diag: &[f64], tol: f64, maxit: usize, nb: f64) -> (Vec<f64>, usize) {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(inv_diag).map(|(p, q)| p * q).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 1..=maxit {
        let ap = a.mul_vec(&p);
        let pap = dot(&p, &ap);
        if pap == 0.0 {
            return (x, it);
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if norm2(&r) <= tol * nb {
            return (x, it);
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    (x, maxit)
}

fn bicgstab(
    a: &CsrMatrix,
    b: &[f64],
    inv_diag: &[f64],
    tol: f64,
    maxit: usize,
    nb: f64,
) -> (Vec<f64>, usize) {
    let n = b.len();
    let precond = |v: &[f64]| -> Vec<f64> { v.iter().zip(inv_diag).map(|(p, q)| p * q).collect() };
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    for it in 1..=maxit {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 {
            return (x, it);
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let y = precond(&p);
        v = a.mul_vec(&y);
        let rv = dot(&r_hat, &v);
        if rv == 0.0 {
            return (x, it);
        }
        alpha = rho / rv;
        let s: Vec<f64> = r.iter().zip(&v).map(|(ri, vi)| ri - alpha * vi).collect();
        if norm2(&s) <= tol * nb {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            return (x, it);
        }
        let z = precond(&s);
        let t = a.mul_vec(&z);
        let tt = dot(&t, &t);
        omega = if tt == 0.0 { 0.0 } else { dot(&t, &s) / tt };
        for i in 0..n {
            x[i] += alpha * y[i] + omega * z[i];
            r[i] = s[i] - omega * t[i];
        }
        if norm2(&r) <= tol * nb || omega == 0.0 {
            return (x, it);
        }
    }
    (x, maxit)
}

/// Which linear solver the scheme uses for its systems.
#[derive(Clone, Copy, Debug, PartialEq)]
#[derive(Default)]
pub enum SolverChoice {
    #[default]
    Direct,
    Iterative { tol: f64, maxit: usize },
}
