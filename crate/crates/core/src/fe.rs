//! Exact two-way fixed-effects estimators.
//!
//! The joint fit solves the least-squares normal equations for
//! `[1 X D F]` by preconditioned conjugate gradient without imposing any
//! identifying restriction; the person and firm effects are then centred to
//! zero observation-weighted mean, with the shifts absorbed by the intercept.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{connected_components, BipartiteGraph};
use crate::panel::{within_job_demean, Panel};
use crate::solver::{cg_solve, dense_solve, CgConfig, LinearOperator, SolverError};

#[derive(Debug, Error)]
pub enum FeError {
    #[error("cannot fit an empty panel")]
    EmptyPanel,
    #[error("covariate `{0}` has no within-match variation")]
    NoWithinVariation(String),
    #[error("covariates are collinear (first dependent column `{0}`)")]
    Collinear(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeEstimate {
    pub covariate_names: Vec<String>,
    pub beta: Vec<f64>,
    /// Person effects, zero observation-weighted mean after normalization.
    pub theta: Vec<f64>,
    /// Firm effects, zero observation-weighted mean after normalization.
    pub psi: Vec<f64>,
    pub intercept: f64,
    /// `y − intercept − xβ − θ − ψ` per observation.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Relative residual of the normal equations at the returned solution.
    pub rel_residual: f64,
}

impl FeEstimate {
    /// `x_i β` per observation.
    pub fn xb(&self, panel: &Panel) -> Vec<f64> {
        (0..panel.n_obs())
            .map(|i| panel.x_row(i).iter().zip(&self.beta).map(|(x, b)| x * b).sum())
            .collect()
    }

    pub fn fitted(&self, panel: &Panel) -> Vec<f64> {
        let xb = self.xb(panel);
        (0..panel.n_obs())
            .map(|i| {
                self.intercept + xb[i] + self.theta[panel.persons()[i]] + self.psi[panel.firms()[i]]
            })
            .collect()
    }
}

/// Normal-equation operator `AᵀA` for `A = [1 Q D F]`, with `Q` an orthonormal
/// basis of the covariate columns.
struct NormalOperator<'a> {
    person: &'a [usize],
    firm: &'a [usize],
    q: &'a DMatrix<f64>,
    n_p: usize,
    n_f: usize,
    diag: Vec<f64>,
}

impl<'a> NormalOperator<'a> {
    fn new(panel: &'a Panel, q: &'a DMatrix<f64>) -> Self {
        let k = q.ncols();
        let mut diag = vec![panel.n_obs() as f64];
        diag.extend((0..k).map(|c| q.column(c).norm_squared()));
        diag.extend(panel.person_counts().into_iter().map(|c| c as f64));
        diag.extend(panel.firm_counts().into_iter().map(|c| c as f64));
        Self {
            person: panel.persons(),
            firm: panel.firms(),
            q,
            n_p: panel.n_persons(),
            n_f: panel.n_firms(),
            diag,
        }
    }

    fn k(&self) -> usize {
        self.q.ncols()
    }

    /// `A v` per observation.
    fn design_apply(&self, v: &[f64], out: &mut [f64]) {
        let k = self.k();
        let (c, rest) = v.split_first().unwrap();
        let (gamma, rest) = rest.split_at(k);
        let (theta, psi) = rest.split_at(self.n_p);
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = c + theta[self.person[i]] + psi[self.firm[i]];
            for (j, g) in gamma.iter().enumerate() {
                s += self.q[(i, j)] * g;
            }
            *o = s;
        }
    }

    /// `Aᵀ r`.
    fn design_transpose(&self, r: &[f64], out: &mut [f64]) {
        let k = self.k();
        out.iter_mut().for_each(|o| *o = 0.0);
        let base_p = 1 + k;
        let base_f = base_p + self.n_p;
        for (i, &ri) in r.iter().enumerate() {
            out[0] += ri;
            for j in 0..k {
                out[1 + j] += self.q[(i, j)] * ri;
            }
            out[base_p + self.person[i]] += ri;
            out[base_f + self.firm[i]] += ri;
        }
    }
}

impl LinearOperator for NormalOperator<'_> {
    fn dim(&self) -> usize {
        1 + self.k() + self.n_p + self.n_f
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let mut fitted = vec![0.0; self.person.len()];
        self.design_apply(x, &mut fitted);
        self.design_transpose(&fitted, out);
    }

    fn diagonal(&self) -> Vec<f64> {
        self.diag.clone()
    }
}

fn covariate_matrix(panel: &Panel) -> DMatrix<f64> {
    DMatrix::from_row_slice(panel.n_obs(), panel.k(), panel.x())
}

/// Thin QR of the covariate block; `R` must have a clearly nonzero diagonal.
fn orthonormalize(panel: &Panel) -> Result<(DMatrix<f64>, DMatrix<f64>), FeError> {
    let x = covariate_matrix(panel);
    let qr = x.clone().qr();
    let q = qr.q();
    let r = qr.r();
    for j in 0..r.ncols() {
        let col_norm = x.column(j).norm();
        if r[(j, j)].abs() <= 1e-10 * col_norm.max(1e-300) || col_norm == 0.0 {
            return Err(FeError::Collinear(panel.covariate_names()[j].clone()));
        }
    }
    Ok((q, r))
}

fn warn_if_disconnected(panel: &Panel) {
    let lab = connected_components(&BipartiteGraph::from_panel(panel));
    if lab.n_components() > 1 {
        log::warn!(
            "panel has {} connected components; fixed effects are only identified within each",
            lab.n_components()
        );
    }
}

/// Joint least-squares fit of intercept, covariates, person and firm effects.
///
/// `include_covariates = false` fits the constant-only specification.
pub fn fit_akm(panel: &Panel, include_covariates: bool, cfg: &CgConfig) -> Result<FeEstimate, FeError> {
    if panel.is_empty() {
        return Err(FeError::EmptyPanel);
    }
    warn_if_disconnected(panel);
    let work = if include_covariates {
        panel.clone()
    } else {
        panel.without_covariates()
    };
    let k = work.k();
    let (q, r) = if k > 0 {
        orthonormalize(&work)?
    } else {
        (DMatrix::zeros(work.n_obs(), 0), DMatrix::zeros(0, 0))
    };
    let op = NormalOperator::new(&work, &q);
    let mut rhs = vec![0.0; op.dim()];
    op.design_transpose(work.y(), &mut rhs);
    let sol = cg_solve(&op, &rhs, cfg)?;
    if !sol.converged {
        log::warn!(
            "conjugate gradient stopped after {} iterations at relative residual {:e}",
            sol.iterations,
            sol.rel_residual
        );
    }
    let n_p = work.n_persons();
    let gamma = DVector::from_column_slice(&sol.x[1..1 + k]);
    let beta: Vec<f64> = if k > 0 {
        r.solve_upper_triangular(&gamma)
            .ok_or_else(|| FeError::Collinear(work.covariate_names()[0].clone()))?
            .iter()
            .copied()
            .collect()
    } else {
        Vec::new()
    };
    let est = FeEstimate {
        covariate_names: work.covariate_names().to_vec(),
        beta,
        theta: sol.x[1 + k..1 + k + n_p].to_vec(),
        psi: sol.x[1 + k + n_p..].to_vec(),
        intercept: sol.x[0],
        residuals: Vec::new(),
        iterations: sol.iterations,
        converged: sol.converged,
        rel_residual: sol.rel_residual,
    };
    Ok(normalize_zero_mean(est, &work))
}

/// Recomputes residuals from the current coefficients.
fn with_residuals(mut est: FeEstimate, panel: &Panel) -> FeEstimate {
    let fitted = est.fitted(panel);
    est.residuals = panel.y().iter().zip(&fitted).map(|(y, f)| y - f).collect();
    est
}

/// Centres θ and ψ to zero observation-weighted mean, moving the shifts into
/// the intercept. Fitted values are unchanged.
pub fn normalize_zero_mean(mut est: FeEstimate, panel: &Panel) -> FeEstimate {
    let n = panel.n_obs() as f64;
    if n > 0.0 {
        let theta_bar = panel.persons().iter().map(|&p| est.theta[p]).sum::<f64>() / n;
        let psi_bar = panel.firms().iter().map(|&f| est.psi[f]).sum::<f64>() / n;
        est.theta.iter_mut().for_each(|t| *t -= theta_bar);
        est.psi.iter_mut().for_each(|p| *p -= psi_bar);
        est.intercept += theta_bar + psi_bar;
    }
    with_residuals(est, panel)
}

/// Within-match OLS estimate of β: regression of demeaned y on demeaned x.
pub fn within_beta(panel: &Panel) -> Result<Vec<f64>, FeError> {
    let k = panel.k();
    let d = within_job_demean(panel);
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xty = vec![0.0; k];
    for i in 0..d.n_obs() {
        let row = d.x_row(i);
        for a in 0..k {
            xty[a] += row[a] * d.y()[i];
            for b in 0..k {
                xtx[(a, b)] += row[a] * row[b];
            }
        }
    }
    for j in 0..k {
        let scale = panel.x().iter().skip(j).step_by(k).fold(0.0f64, |m, v| m.max(v.abs()));
        if xtx[(j, j)] <= (1e-12 * scale.max(1.0)).powi(2) * d.n_obs() as f64 {
            return Err(FeError::NoWithinVariation(panel.covariate_names()[j].clone()));
        }
    }
    // Scale to unit diagonal before elimination.
    let s: Vec<f64> = (0..k).map(|j| xtx[(j, j)].sqrt()).collect();
    let scaled = DMatrix::from_fn(k, k, |a, b| xtx[(a, b)] / (s[a] * s[b]));
    let rhs: Vec<f64> = (0..k).map(|a| xty[a] / s[a]).collect();
    let sol = dense_solve(&scaled, &rhs).map_err(|e| match e {
        SolverError::Singular { column } => {
            FeError::Collinear(panel.covariate_names()[column.min(k - 1)].clone())
        }
        other => FeError::Solver(other),
    })?;
    Ok(sol.iter().zip(&s).map(|(v, sj)| v / sj).collect())
}

/// Two-step estimator: β from the within-match regression, then person and
/// firm effects from the composite residual `y − xβ`.
pub fn fit_glm_two_step(panel: &Panel, cfg: &CgConfig) -> Result<FeEstimate, FeError> {
    if panel.is_empty() {
        return Err(FeError::EmptyPanel);
    }
    let beta = within_beta(panel)?;
    let composite: Vec<f64> = (0..panel.n_obs())
        .map(|i| panel.y()[i] - panel.x_row(i).iter().zip(&beta).map(|(x, b)| x * b).sum::<f64>())
        .collect();
    let step2_panel = panel
        .without_covariates()
        .with_outcome(composite)
        .expect("same length");
    let step2 = fit_akm(&step2_panel, false, cfg)?;
    let est = FeEstimate {
        covariate_names: panel.covariate_names().to_vec(),
        beta,
        ..step2
    };
    Ok(with_residuals(est, panel))
}
