//! Sparse linear algebra: canonical CSR storage, the matrix-free posterior
//! precision operator `Q = Q0 + A^T W A`, Jacobi-preconditioned conjugate
//! gradients, and a dense factorization oracle for small systems.
//!
//! Determinism contract: row products accumulate in column order, parallelism
//! is only over disjoint output rows, and every reduction in the solver runs
//! in a fixed order, so results are bitwise reproducible for any worker count.

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum SolveError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("preconditioner diagonal must be strictly positive (entry {index} = {value})")]
    InvalidPreconditioner { index: usize, value: f64 },
    #[error("solver did not converge in {} iterations (relative residual {:.3e})",
            stats.iterations, stats.relative_residual)]
    NotConverged { stats: SolveStats, best: Box<[f64]> },
    #[error("p^T Q p <= 0 at iteration {iteration}: operator is not positive definite")]
    BreakdownIndefinite { iteration: usize },
    #[error("matrix is singular or not positive definite")]
    SingularMatrix,
    #[error("dense oracle limited to n <= {limit}, got {n}")]
    TooLargeForDense { n: usize, limit: usize },
}

/// Compressed sparse row matrix: sorted column indices within each row, no
/// duplicates, no explicit zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds canonical CSR from unordered triplets; duplicate entries are
    /// summed and exact zeros dropped.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        mut triplets: Vec<(u32, u32, f64)>,
    ) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_offsets = Vec::with_capacity(n_rows + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        let mut row = 0usize;
        let mut iter = triplets.into_iter().peekable();
        while let Some((r, c, mut v)) = iter.next() {
            while let Some(&(r2, c2, v2)) = iter.peek() {
                if r2 == r && c2 == c {
                    v += v2;
                    iter.next();
                } else {
                    break;
                }
            }
            while row < r as usize {
                row_offsets.push(col_indices.len());
                row += 1;
            }
            if v != 0.0 {
                col_indices.push(c);
                values.push(v);
            }
        }
        while row < n_rows {
            row_offsets.push(col_indices.len());
            row += 1;
        }
        Self { n_rows, n_cols, row_offsets, col_indices, values }
    }

    /// CSR directly from per-row entries already sorted by column.
    pub fn from_rows(n_cols: usize, rows: &[Vec<(u32, f64)>]) -> Self {
        let mut row_offsets = Vec::with_capacity(rows.len() + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for row in rows {
            debug_assert!(row.windows(2).all(|w| w[0].0 < w[1].0));
            for &(c, v) in row {
                if v != 0.0 {
                    col_indices.push(c);
                    values.push(v);
                }
            }
            row_offsets.push(col_indices.len());
        }
        Self { n_rows: rows.len(), n_cols, row_offsets, col_indices, values }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n as u32).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            row_offsets: vec![0; n_rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (u32, f64)> + '_ {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        self.col_indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    /// Sparse matrix-vector product.
    pub fn spmv(&self, x: &[f64]) -> Result<Vec<f64>, SolveError> {
        if x.len() != self.n_cols {
            return Err(SolveError::DimensionMismatch { expected: self.n_cols, got: x.len() });
        }
        let mut out = vec![0.0; self.n_rows];
        self.spmv_into(x, &mut out);
        Ok(out)
    }

    /// `out = self * x`; rows run in parallel, each accumulated in order.
    pub fn spmv_into(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.n_cols);
        assert_eq!(out.len(), self.n_rows);
        const CHUNK: usize = 2048;
        out.par_chunks_mut(CHUNK).enumerate().for_each(|(ci, chunk)| {
            let base = ci * CHUNK;
            for (k, o) in chunk.iter_mut().enumerate() {
                let r = base + k;
                let mut acc = 0.0;
                for idx in self.row_offsets[r]..self.row_offsets[r + 1] {
                    acc += self.values[idx] * x[self.col_indices[idx] as usize];
                }
                *o = acc;
            }
        });
    }

    /// `out += self * x`.
    pub fn spmv_add_into(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.n_cols);
        assert_eq!(out.len(), self.n_rows);
        const CHUNK: usize = 2048;
        out.par_chunks_mut(CHUNK).enumerate().for_each(|(ci, chunk)| {
            let base = ci * CHUNK;
            for (k, o) in chunk.iter_mut().enumerate() {
                let r = base + k;
                let mut acc = 0.0;
                for idx in self.row_offsets[r]..self.row_offsets[r + 1] {
                    acc += self.values[idx] * x[self.col_indices[idx] as usize];
                }
                *o += acc;
            }
        });
    }

    /// Transpose in canonical CSR form (counting sort, deterministic).
    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &c in &self.col_indices {
            counts[c as usize + 1] += 1;
        }
        for i in 0..self.n_cols {
            counts[i + 1] += counts[i];
        }
        let mut col_indices = vec![0u32; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        let mut next = counts.clone();
        for r in 0..self.n_rows {
            for idx in self.row_offsets[r]..self.row_offsets[r + 1] {
                let c = self.col_indices[idx] as usize;
                let pos = next[c];
                next[c] += 1;
                col_indices[pos] = r as u32;
                values[pos] = self.values[idx];
            }
        }
        Self {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            row_offsets: counts,
            col_indices,
            values,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let n = self.n_rows.min(self.n_cols);
        let mut d = vec![0.0; n];
        for (r, dr) in d.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                if c as usize == r {
                    *dr = v;
                }
            }
        }
        d
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows, self.n_cols);
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                m[(r, c as usize)] = v;
            }
        }
        m
    }
}

/// Anything that acts like a symmetric linear map on length-`dim` vectors.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply_into(&self, x: &[f64], out: &mut [f64]);

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>, SolveError> {
        if x.len() != self.dim() {
            return Err(SolveError::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        let mut out = vec![0.0; self.dim()];
        self.apply_into(x, &mut out);
        Ok(out)
    }
}

impl LinearOperator for SparseMatrix {
    fn dim(&self) -> usize {
        debug_assert_eq!(self.n_rows, self.n_cols);
        self.n_rows
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        self.spmv_into(x, out);
    }
}

/// Matrix-free posterior precision `Q = Q0 + A^T W A` with its explicit
/// diagonal. `A^T W A` is never materialized; applications stream through the
/// stored `A` and its transpose.
#[derive(Debug, Clone)]
pub struct PrecisionOperator {
    q0: SparseMatrix,
    a: SparseMatrix,
    a_t: SparseMatrix,
    /// Per-observation weights `1 / sigma_i^2`.
    w: Vec<f64>,
    /// Observed values, kept alongside so the right-hand side can be formed.
    y: Vec<f64>,
    diag: Vec<f64>,
}

impl PrecisionOperator {
    pub fn new(q0: SparseMatrix, a: SparseMatrix, w: Vec<f64>, y: Vec<f64>) -> Self {
        assert_eq!(q0.n_rows(), q0.n_cols());
        assert_eq!(a.n_cols(), q0.n_cols());
        assert_eq!(w.len(), a.n_rows());
        assert_eq!(y.len(), a.n_rows());
        let a_t = a.transpose();
        let mut diag = q0.diagonal();
        for r in 0..a.n_rows() {
            for (c, v) in a.row(r) {
                diag[c as usize] += v * v * w[r];
            }
        }
        Self { q0, a, a_t, w, y, diag }
    }

    /// Prior-only operator with no observations.
    pub fn prior_only(q0: SparseMatrix) -> Self {
        let n = q0.n_cols();
        Self::new(q0, SparseMatrix::zeros(0, n), Vec::new(), Vec::new())
    }

    pub fn n(&self) -> usize {
        self.q0.n_rows()
    }

    pub fn n_observations(&self) -> usize {
        self.a.n_rows()
    }

    pub fn q0(&self) -> &SparseMatrix {
        &self.q0
    }

    /// Explicit diagonal of `Q`, used by the Jacobi preconditioner.
    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    /// `A^T W y`, the observation part of the right-hand side.
    pub fn information_vector(&self) -> Vec<f64> {
        let wy: Vec<f64> = self.w.iter().zip(&self.y).map(|(w, y)| w * y).collect();
        let mut out = vec![0.0; self.n()];
        self.a_t.spmv_add_into(&wy, &mut out);
        out
    }

    /// Extends the operator with hypothetical observations without copying
    /// the existing ones.
    pub fn augmented(&self, a_extra: SparseMatrix, w_extra: Vec<f64>) -> AugmentedPrecision<'_> {
        assert_eq!(a_extra.n_cols(), self.n());
        assert_eq!(w_extra.len(), a_extra.n_rows());
        let a_t = a_extra.transpose();
        let mut diag = self.diag.clone();
        for r in 0..a_extra.n_rows() {
            for (c, v) in a_extra.row(r) {
                diag[c as usize] += v * v * w_extra[r];
            }
        }
        AugmentedPrecision { base: self, a: a_extra, a_t, w: w_extra, diag }
    }
}

impl LinearOperator for PrecisionOperator {
    fn dim(&self) -> usize {
        self.n()
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        self.q0.spmv_into(x, out);
        if self.a.n_rows() > 0 {
            let mut t = self.a.spmv(x).expect("dimension checked");
            for (ti, wi) in t.iter_mut().zip(&self.w) {
                *ti *= wi;
            }
            self.a_t.spmv_add_into(&t, out);
        }
    }
}

/// `Q + A'^T W' A'` for a hypothetical observation block; applying with an
/// empty block reproduces the base operator bitwise.
pub struct AugmentedPrecision<'a> {
    base: &'a PrecisionOperator,
    a: SparseMatrix,
    a_t: SparseMatrix,
    w: Vec<f64>,
    diag: Vec<f64>,
}

impl AugmentedPrecision<'_> {
    pub fn diag(&self) -> &[f64] {
        &self.diag
    }
}

impl LinearOperator for AugmentedPrecision<'_> {
    fn dim(&self) -> usize {
        self.base.n()
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        self.base.apply_into(x, out);
        if self.a.n_rows() > 0 {
            let mut t = self.a.spmv(x).expect("dimension checked");
            for (ti, wi) in t.iter_mut().zip(&self.w) {
                *ti *= wi;
            }
            self.a_t.spmv_add_into(&t, out);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Fixed sequential order: reproducible for any worker count.
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

const BREAKDOWN_FACTOR: f64 = 1e-14;

/// Jacobi-preconditioned conjugate gradients for SPD operators.
///
/// Converges when the true relative residual `||Qx - h|| / ||h||` drops to
/// `tol`. Deterministic: fixed iteration order and sequential reductions.
pub fn pcg(
    op: &dyn LinearOperator,
    h: &[f64],
    precond_diag: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveStats), SolveError> {
    let n = op.dim();
    if h.len() != n {
        return Err(SolveError::DimensionMismatch { expected: n, got: h.len() });
    }
    if precond_diag.len() != n {
        return Err(SolveError::DimensionMismatch { expected: n, got: precond_diag.len() });
    }
    for (i, &d) in precond_diag.iter().enumerate() {
        if !(d > 0.0) {
            return Err(SolveError::InvalidPreconditioner { index: i, value: d });
        }
    }

    let h_norm = dot(h, h).sqrt();
    if h_norm == 0.0 {
        return Ok((
            vec![0.0; n],
            SolveStats { iterations: 0, relative_residual: 0.0, converged: true },
        ));
    }

    let mut x = vec![0.0; n];
    let mut r = h.to_vec();
    let mut z: Vec<f64> = r.iter().zip(precond_diag).map(|(ri, di)| ri / di).collect();
    let mut p = z.clone();
    let mut rho = dot(&r, &z);
    let mut q = vec![0.0; n];
    let mut iterations = 0;

    loop {
        let rel = dot(&r, &r).sqrt() / h_norm;
        if rel <= tol {
            // Recurrence residual can drift; confirm with the true residual.
            op.apply_into(&x, &mut q);
            let mut true_r = vec![0.0; n];
            for i in 0..n {
                true_r[i] = h[i] - q[i];
            }
            let true_rel = dot(&true_r, &true_r).sqrt() / h_norm;
            if true_rel <= tol || iterations >= max_iter {
                let converged = true_rel <= tol;
                let stats =
                    SolveStats { iterations, relative_residual: true_rel, converged };
                if converged {
                    return Ok((x, stats));
                }
                return Err(SolveError::NotConverged { stats, best: x.into_boxed_slice() });
            }
            // Restart from the true residual.
            r = true_r;
            z = r.iter().zip(precond_diag).map(|(ri, di)| ri / di).collect();
            p = z.clone();
            rho = dot(&r, &z);
        }
        if iterations >= max_iter {
            let stats = SolveStats { iterations, relative_residual: rel, converged: false };
            return Err(SolveError::NotConverged { stats, best: x.into_boxed_slice() });
        }

        op.apply_into(&p, &mut q);
        let p_q = dot(&p, &q);
        let p_norm2 = dot(&p, &p);
        if p_q <= BREAKDOWN_FACTOR * p_norm2 {
            return Err(SolveError::BreakdownIndefinite { iteration: iterations });
        }
        let alpha = rho / p_q;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        for i in 0..n {
            z[i] = r[i] / precond_diag[i];
        }
        let rho_next = dot(&r, &z);
        let beta = rho_next / rho;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        rho = rho_next;
        iterations += 1;
    }
}

pub const DENSE_ORACLE_LIMIT: usize = 2000;

/// Materializes the operator column by column and inverts it with a Cholesky
/// factorization. Test-scale oracle; guarded to small systems.
pub fn dense_solve_oracle(
    op: &dyn LinearOperator,
) -> Result<(DMatrix<f64>, DMatrix<f64>), SolveError> {
    let n = op.dim();
    if n > DENSE_ORACLE_LIMIT {
        return Err(SolveError::TooLargeForDense { n, limit: DENSE_ORACLE_LIMIT });
    }
    let mut q = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        op.apply_into(&e, &mut col);
        for i in 0..n {
            q[(i, j)] = col[i];
        }
        e[j] = 0.0;
    }
    let chol = q.clone().cholesky().ok_or(SolveError::SingularMatrix)?;
    let inv = chol.inverse();
    Ok((q, inv))
}

/// Default iteration cap used when a config leaves it unset.
pub fn default_max_iter(n: usize) -> usize {
    (10.0 * (n as f64).sqrt()).ceil() as usize + 200
}
