//! Preconditioned conjugate gradient for symmetric positive semi-definite systems.

use serde::{Deserialize, Serialize};

use super::{CsrMatrix, SolverError};

/// Anything that can apply a symmetric operator to a vector.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
    /// Main diagonal, used by the Jacobi preconditioner.
    fn diagonal(&self) -> Vec<f64>;
}

impl LinearOperator for CsrMatrix {
    fn dim(&self) -> usize {
        self.n_rows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.mul_vec_into(x, out)
    }

    fn diagonal(&self) -> Vec<f64> {
        CsrMatrix::diagonal(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preconditioner {
    None,
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgConfig {
    /// Relative residual threshold `‖Ax − b‖ / ‖b‖`.
    pub tol: f64,
    /// Iteration cap; `None` means ten times the system dimension.
    pub max_iter: Option<usize>,
    pub preconditioner: Preconditioner,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: None,
            preconditioner: Preconditioner::Diagonal,
        }
    }
}

impl CgConfig {
    fn validate(&self) -> Result<(), SolverError> {
        if !(self.tol > 0.0) {
            return Err(SolverError::InvalidConfig(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iter == Some(0) {
            return Err(SolverError::InvalidConfig("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// True relative residual of the returned iterate.
    pub rel_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solves `A x = b` starting from `x = 0`.
///
/// On a singular but consistent system the iterates stay in the range of the
/// (preconditioned) operator, so a particular solution is returned. Non-convergence
/// is not an error: the best iterate comes back with `converged = false`.
pub fn cg_solve<A: LinearOperator + ?Sized>(
    a: &A,
    b: &[f64],
    cfg: &CgConfig,
) -> Result<CgResult, SolverError> {
    cfg.validate()?;
    let n = a.dim();
    if b.len() != n {
        return Err(SolverError::DimensionMismatch {
            expected: n,
            got: b.len(),
        });
    }
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok(CgResult {
            x: vec![0.0; n],
            iterations: 0,
            converged: true,
            rel_residual: 0.0,
        });
    }
    let max_iter = cfg.max_iter.unwrap_or(10 * n.max(1));
    let inv_diag: Vec<f64> = match cfg.preconditioner {
        Preconditioner::None => vec![1.0; n],
        Preconditioner::Diagonal => a
            .diagonal()
            .into_iter()
            .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
            .collect(),
    };

    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut ax = vec![0.0; n];
    let mut iterations = 0;
    // The recurrence residual drifts from the true one; restart from the true
    // residual a few times before giving up.
    for _restart in 0..4 {
        let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut ap = vec![0.0; n];
        while iterations < max_iter {
            if norm(&r) <= cfg.tol * b_norm {
                break;
            }
            a.apply(&p, &mut ap);
            let pap = dot(&p, &ap);
            if pap <= 0.0 {
                break;
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            iterations += 1;
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
        a.apply(&x, &mut ax);
        for i in 0..n {
            r[i] = b[i] - ax[i];
        }
        if norm(&r) <= cfg.tol * b_norm || iterations >= max_iter {
            break;
        }
    }
    let rel_residual = norm(&r) / b_norm;
    Ok(CgResult {
        x,
        iterations,
        converged: rel_residual <= cfg.tol,
        rel_residual,
    })
}
