//! Up-looking sparse Cholesky factorization `P A Pᵀ = L Lᵀ`.
//!
//! The symbolic phase (ordering, elimination tree, column counts) is separated
//! from the numeric phase so a fixed sparsity pattern can be refactored cheaply
//! with new values, which is what the deviance optimizer does on every step.

use super::{CsrMatrix, Ordering, SolverError};

const NONE: usize = usize::MAX;

/// Ordering and elimination structure for one sparsity pattern.
#[derive(Debug, Clone)]
pub struct SymbolicCholesky {
    n: usize,
    perm: Vec<usize>,
    parent: Vec<usize>,
    col_ptr: Vec<usize>,
}

/// Numeric factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    n: usize,
    /// `perm[new] = old`.
    perm: Vec<usize>,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
    log_det: f64,
}

fn etree(a: &CsrMatrix) -> Vec<usize> {
    let n = a.n_rows();
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        for (j, _) in a.row(k) {
            let mut i = j;
            while i != NONE && i < k {
                let next = ancestor[i];
                ancestor[i] = k;
                if next == NONE {
                    parent[i] = k;
                }
                i = next;
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of L (excluding the diagonal), written to
/// `stack[top..]` in topological order. Returns `top`.
fn ereach(
    a: &CsrMatrix,
    k: usize,
    parent: &[usize],
    stack: &mut [usize],
    mark: &mut [usize],
) -> usize {
    let n = a.n_rows();
    let mut top = n;
    mark[k] = k;
    for (j, _) in a.row(k) {
        if j >= k {
            continue;
        }
        let mut len = 0;
        let mut i = j;
        while mark[i] != k {
            stack[len] = i;
            len += 1;
            mark[i] = k;
            i = parent[i];
        }
        while len > 0 {
            len -= 1;
            top -= 1;
            stack[top] = stack[len];
        }
    }
    top
}

impl SymbolicCholesky {
    pub fn analyze(a: &CsrMatrix, ordering: &Ordering) -> Result<Self, SolverError> {
        if a.n_rows() != a.n_cols() {
            return Err(SolverError::NotSquare {
                rows: a.n_rows(),
                cols: a.n_cols(),
            });
        }
        let n = a.n_rows();
        let perm = ordering.permutation(a);
        if perm.len() != n {
            return Err(SolverError::DimensionMismatch {
                expected: n,
                got: perm.len(),
            });
        }
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(SolverError::InvalidConfig("ordering is not a permutation".into()));
            }
        }
        let pa = a.permute_symmetric(&perm);
        let parent = etree(&pa);
        let mut counts = vec![1usize; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![NONE; n];
        for k in 0..n {
            let top = ereach(&pa, k, &parent, &mut stack, &mut mark);
            for &i in &stack[top..n] {
                counts[i] += 1;
            }
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        col_ptr.push(0);
        for c in counts {
            col_ptr.push(col_ptr.last().unwrap() + c);
        }
        Ok(Self {
            n,
            perm,
            parent,
            col_ptr,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Number of stored entries in L, diagonal included.
    pub fn factor_nnz(&self) -> usize {
        self.col_ptr[self.n]
    }

    /// Numeric factorization of `a`. The pattern of `a` must be a subset of the
    /// analysed one; new off-diagonal entries would fall outside the elimination tree.
    pub fn factor(&self, a: &CsrMatrix) -> Result<CholeskyFactor, SolverError> {
        let n = self.n;
        if a.n_rows() != n || a.n_cols() != n {
            return Err(SolverError::DimensionMismatch {
                expected: n,
                got: a.n_rows(),
            });
        }
        let pa = a.permute_symmetric(&self.perm);
        let nnz = self.factor_nnz();
        let mut row_idx = vec![0usize; nnz];
        let mut values = vec![0.0; nnz];
        let mut next = self.col_ptr[..n].to_vec();
        let mut x = vec![0.0; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![NONE; n];
        let mut log_det = 0.0;
        for k in 0..n {
            let top = ereach(&pa, k, &self.parent, &mut stack, &mut mark);
            for (j, v) in pa.row(k) {
                if j <= k {
                    x[j] += v;
                }
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..n] {
                let lki = x[i] / values[self.col_ptr[i]];
                x[i] = 0.0;
                for p in self.col_ptr[i] + 1..next[i] {
                    x[row_idx[p]] -= values[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                row_idx[p] = k;
                values[p] = lki;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(SolverError::NotPositiveDefinite {
                    pivot: self.perm[k],
                    value: d,
                });
            }
            let diag = d.sqrt();
            log_det += 2.0 * diag.ln();
            let p = next[k];
            next[k] += 1;
            row_idx[p] = k;
            values[p] = diag;
        }
        Ok(CholeskyFactor {
            n,
            perm: self.perm.clone(),
            col_ptr: self.col_ptr.clone(),
            row_idx,
            values,
            log_det,
        })
    }
}

/// Analyse and factor in one step using a minimum-degree ordering.
pub fn sparse_cholesky(a: &CsrMatrix) -> Result<CholeskyFactor, SolverError> {
    SymbolicCholesky::analyze(a, &Ordering::MinimumDegree)?.factor(a)
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// `log det A = 2 Σ log L_ii`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Diagonal of L in factor (permuted) order.
    pub fn l_diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.values[self.col_ptr[j]]).collect()
    }

    /// `2 Σ log L_ii` over the first `k` pivots in factor order.
    pub fn log_det_leading(&self, k: usize) -> f64 {
        (0..k.min(self.n))
            .map(|j| 2.0 * self.values[self.col_ptr[j]].ln())
            .sum()
    }

    /// L as a dense matrix in factor order (tests and small diagnostics only).
    pub fn l_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut l = nalgebra::DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                l[(self.row_idx[p], j)] = self.values[p];
            }
        }
        l
    }

    /// Solves `A x = b` in place on a permuted work vector.
    pub fn solve_into(&self, b: &[f64], out: &mut [f64], work: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            work[i] = b[self.perm[i]];
        }
        // L y = Pb
        for j in 0..n {
            let start = self.col_ptr[j];
            let yj = work[j] / self.values[start];
            work[j] = yj;
            for p in start + 1..self.col_ptr[j + 1] {
                work[self.row_idx[p]] -= self.values[p] * yj;
            }
        }
        // Lᵀ z = y
        for j in (0..n).rev() {
            let start = self.col_ptr[j];
            let mut s = work[j];
            for p in start + 1..self.col_ptr[j + 1] {
                s -= self.values[p] * work[self.row_idx[p]];
            }
            work[j] = s / self.values[start];
        }
        for i in 0..n {
            out[self.perm[i]] = work[i];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, SolverError> {
        if b.len() != self.n {
            return Err(SolverError::DimensionMismatch {
                expected: self.n,
                got: b.len(),
            });
        }
        let mut out = vec![0.0; self.n];
        let mut work = vec![0.0; self.n];
        self.solve_into(b, &mut out, &mut work);
        Ok(out)
    }
}

/// Free-function form of [`CholeskyFactor::solve`].
pub fn solve_factored(f: &CholeskyFactor, b: &[f64]) -> Result<Vec<f64>, SolverError> {
    f.solve(b)
}
