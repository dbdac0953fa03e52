//! Small dense solvers used as oracles and for k×k covariate blocks.

use nalgebra::DMatrix;

use super::SolverError;

/// Solves a square system by Gaussian elimination with partial pivoting.
///
/// A pivot below `n · ε · max|A|` is treated as singular.
pub fn dense_solve(a: &DMatrix<f64>, b: &[f64]) -> Result<Vec<f64>, SolverError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(SolverError::NotSquare {
            rows: n,
            cols: a.ncols(),
        });
    }
    if b.len() != n {
        return Err(SolverError::DimensionMismatch {
            expected: n,
            got: b.len(),
        });
    }
    let mut m = a.clone();
    let mut x = b.to_vec();
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let tiny = (n.max(1) as f64) * f64::EPSILON * scale;
    for col in 0..n {
        let (piv, piv_val) = (col..n)
            .map(|r| (r, m[(r, col)].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if piv_val <= tiny {
            return Err(SolverError::Singular { column: col });
        }
        if piv != col {
            m.swap_rows(piv, col);
            x.swap(piv, col);
        }
        let d = m[(col, col)];
        for r in col + 1..n {
            let f = m[(r, col)] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                let v = m[(col, c)];
                m[(r, c)] -= f * v;
            }
            x[r] -= f * x[col];
        }
    }
    for r in (0..n).rev() {
        let mut s = x[r];
        for c in r + 1..n {
            s -= m[(r, c)] * x[c];
        }
        x[r] = s / m[(r, r)];
    }
    Ok(x)
}

/// Minimum-norm least-squares solution via the SVD pseudo-inverse.
pub fn dense_lstsq(a: &DMatrix<f64>, b: &[f64]) -> Result<Vec<f64>, SolverError> {
    if b.len() != a.nrows() {
        return Err(SolverError::DimensionMismatch {
            expected: a.nrows(),
            got: b.len(),
        });
    }
    let svd = a.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().fold(0.0f64, |m, v| m.max(*v));
    let eps = max_sv * (a.nrows().max(a.ncols()) as f64) * f64::EPSILON * 10.0;
    let rhs = nalgebra::DVector::from_column_slice(b);
    let sol = svd
        .solve(&rhs, eps)
        .map_err(|e| SolverError::InvalidConfig(e.to_string()))?;
    Ok(sol.iter().copied().collect())
}
