//! Sparse numerical core: CSR storage, preconditioned conjugate gradient,
//! sparse Cholesky with log-determinant, and dense oracles.

mod cg;
mod cholesky;
mod dense;
mod ordering;
mod sparse;

use thiserror::Error;

pub use cg::{cg_solve, CgConfig, CgResult, LinearOperator, Preconditioner};
pub use cholesky::{solve_factored, sparse_cholesky, CholeskyFactor, SymbolicCholesky};
pub use dense::{dense_lstsq, dense_solve};
pub use ordering::{minimum_degree, Ordering};
pub use sparse::CsrMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("entry ({row},{col}) outside a {n_rows}x{n_cols} matrix")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        n_rows: usize,
        n_cols: usize,
    },
    #[error("matrix is not positive definite: pivot {pivot} has value {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("matrix is singular to working precision at column {column}")]
    Singular { column: usize },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}
