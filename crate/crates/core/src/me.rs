//! Crossed person/firm random-effects model fitted by maximum likelihood.
//!
//! The variance parameters enter through the relative covariance factor
//! `Λ = diag(λ_p I, λ_f I)` with `λ = σ/σ_e`. For fixed `Λ` the penalized
//! least-squares problem
//!
//! ```text
//! min ‖y − Xβ − ZΛu‖² + ‖u‖²
//! ```
//!
//! is solved by one sparse Cholesky factorization of the bordered system with
//! the random-effect block eliminated first, giving the profiled deviance
//! `log|L_Z|² + n(1 + log(2π r²/n))`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::Panel;
use crate::solver::{CsrMatrix, Ordering, SolverError, SymbolicCholesky};

#[derive(Debug, Error)]
pub enum MeError {
    #[error("cannot fit an empty panel")]
    EmptyPanel,
    #[error("fixed-effect columns are collinear (column `{0}`)")]
    Collinear(String),
    #[error("variance ratios must be finite and nonnegative, got ({0}, {1})")]
    InvalidRatios(f64, f64),
    #[error("coefficient vector has length {got}, expected {expected}")]
    BetaLength { expected: usize, got: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub sigma_p2: f64,
    pub sigma_f2: f64,
    pub sigma_e2: f64,
    /// Always zero for fitted models.
    pub sigma_pf: f64,
}

impl VarianceComponents {
    pub fn new(sigma_p2: f64, sigma_f2: f64, sigma_e2: f64) -> Self {
        Self {
            sigma_p2,
            sigma_f2,
            sigma_e2,
            sigma_pf: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeEstimate {
    pub vc: VarianceComponents,
    pub covariate_names: Vec<String>,
    pub beta: Vec<f64>,
    pub intercept: f64,
    /// Person conditional modes, centred to zero observation-weighted mean.
    pub modes_p: Vec<f64>,
    /// Firm conditional modes, centred to zero observation-weighted mean.
    pub modes_f: Vec<f64>,
    pub deviance: f64,
    /// Log standard-deviation ratios `(log λ_p, log λ_f)` at the optimum.
    pub log_ratios: (f64, f64),
    pub boundary_p: bool,
    pub boundary_f: bool,
    pub evaluations: usize,
    /// Best deviance after each optimizer iteration of the winning start.
    pub trace: Vec<f64>,
    pub converged: bool,
}

impl MeEstimate {
    pub fn xb(&self, panel: &Panel) -> Vec<f64> {
        (0..panel.n_obs())
            .map(|i| panel.x_row(i).iter().zip(&self.beta).map(|(x, b)| x * b).sum())
            .collect()
    }
}

/// Person and firm modes for given variance components and fixed coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalModes {
    pub person: Vec<f64>,
    pub firm: Vec<f64>,
    /// The person block was forced to zero by a zero variance component.
    pub degenerate_person: bool,
    pub degenerate_firm: bool,
}

/// Quantities profiled out at one value of the variance ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfiledDeviance {
    pub deviance: f64,
    pub vc: VarianceComponents,
    pub intercept: f64,
    pub beta: Vec<f64>,
    /// Raw (uncentred) modes `b = Λu`.
    pub modes_p: Vec<f64>,
    pub modes_f: Vec<f64>,
    /// Penalized residual sum of squares.
    pub pwrss: f64,
}

/// Cached cross-products and symbolic factorization for repeated deviance
/// evaluations on one panel.
pub struct HendersonSystem {
    n: usize,
    n_p: usize,
    n_f: usize,
    person: Vec<usize>,
    firm: Vec<usize>,
    y: Vec<f64>,
    /// Orthonormal basis of `[1 X]`, n × q.
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    person_counts: Vec<f64>,
    firm_counts: Vec<f64>,
    matches: Vec<(usize, usize, f64)>,
    ztq: DMatrix<f64>,
    zty: Vec<f64>,
    qty: Vec<f64>,
    symbolic: SymbolicCholesky,
    covariate_names: Vec<String>,
}

impl HendersonSystem {
    pub fn new(panel: &Panel) -> Result<Self, MeError> {
        if panel.is_empty() {
            return Err(MeError::EmptyPanel);
        }
        let n = panel.n_obs();
        let k = panel.k();
        let x1 = DMatrix::from_fn(n, 1 + k, |i, j| if j == 0 { 1.0 } else { panel.x_row(i)[j - 1] });
        let qr = x1.clone().qr();
        let (q, r) = (qr.q(), qr.r());
        for j in 0..=k {
            if r[(j, j)].abs() <= 1e-10 * x1.column(j).norm().max(1e-300) {
                let name = if j == 0 {
                    "(intercept)".to_string()
                } else {
                    panel.covariate_names()[j - 1].clone()
                };
                return Err(MeError::Collinear(name));
            }
        }
        let (n_p, n_f) = (panel.n_persons(), panel.n_firms());
        let nz = n_p + n_f;
        let qc = 1 + k;
        let mut ztq = DMatrix::zeros(nz, qc);
        let mut zty = vec![0.0; nz];
        for i in 0..n {
            let (p, f) = (panel.persons()[i], n_p + panel.firms()[i]);
            for c in 0..qc {
                ztq[(p, c)] += q[(i, c)];
                ztq[(f, c)] += q[(i, c)];
            }
            zty[p] += panel.y()[i];
            zty[f] += panel.y()[i];
        }
        let qty = (q.transpose() * DVector::from_column_slice(panel.y())).as_slice().to_vec();
        let matches = panel
            .match_index()
            .matches
            .iter()
            .map(|m| (m.person, m.firm, m.n_obs as f64))
            .collect();
        let mut sys = Self {
            n,
            n_p,
            n_f,
            person: panel.persons().to_vec(),
            firm: panel.firms().to_vec(),
            y: panel.y().to_vec(),
            q,
            r,
            person_counts: panel.person_counts().into_iter().map(|c| c as f64).collect(),
            firm_counts: panel.firm_counts().into_iter().map(|c| c as f64).collect(),
            matches,
            ztq,
            zty,
            qty,
            symbolic: SymbolicCholesky::analyze(&CsrMatrix::identity(1), &Ordering::Natural)?,
            covariate_names: panel.covariate_names().to_vec(),
        };
        let pattern = sys.assemble(1.0, 1.0)?;
        sys.symbolic = SymbolicCholesky::analyze(&pattern, &Ordering::MinimumDegreeLeading(nz))?;
        Ok(sys)
    }

    fn nz(&self) -> usize {
        self.n_p + self.n_f
    }

    fn qc(&self) -> usize {
        self.q.ncols()
    }

    /// Bordered matrix `[[ΛZᵀZΛ + I, ΛZᵀQ], [QᵀZΛ, I]]`.
    fn assemble(&self, lp: f64, lf: f64) -> Result<CsrMatrix, SolverError> {
        let (n_p, nz, qc) = (self.n_p, self.nz(), self.qc());
        let mut trip = Vec::with_capacity(nz + 2 * self.matches.len() + 2 * nz * qc + qc * qc);
        for (p, c) in self.person_counts.iter().enumerate() {
            trip.push((p, p, lp * lp * c + 1.0));
        }
        for (f, c) in self.firm_counts.iter().enumerate() {
            trip.push((n_p + f, n_p + f, lf * lf * c + 1.0));
        }
        for &(p, f, c) in &self.matches {
            let v = lp * lf * c;
            trip.push((p, n_p + f, v));
            trip.push((n_p + f, p, v));
        }
        for z in 0..nz {
            let l = if z < n_p { lp } else { lf };
            for c in 0..qc {
                let v = l * self.ztq[(z, c)];
                trip.push((z, nz + c, v));
                trip.push((nz + c, z, v));
            }
        }
        for a in 0..qc {
            trip.push((nz + a, nz + a, 1.0));
        }
        CsrMatrix::from_triplets(nz + qc, nz + qc, trip)
    }

    /// Profiled deviance at standard-deviation ratios `λ_p, λ_f ≥ 0`.
    pub fn evaluate(&self, lp: f64, lf: f64) -> Result<ProfiledDeviance, MeError> {
        if !(lp >= 0.0 && lf >= 0.0 && lp.is_finite() && lf.is_finite()) {
            return Err(MeError::InvalidRatios(lp * lp, lf * lf));
        }
        let (n_p, nz, qc) = (self.n_p, self.nz(), self.qc());
        let a = self.assemble(lp, lf)?;
        let factor = self.symbolic.factor(&a)?;
        let mut rhs = Vec::with_capacity(nz + qc);
        rhs.extend(self.zty[..n_p].iter().map(|v| lp * v));
        rhs.extend(self.zty[n_p..].iter().map(|v| lf * v));
        rhs.extend_from_slice(&self.qty);
        let sol = factor.solve(&rhs)?;
        let (u, gamma) = sol.split_at(nz);
        let b_p: Vec<f64> = u[..n_p].iter().map(|v| lp * v).collect();
        let b_f: Vec<f64> = u[n_p..].iter().map(|v| lf * v).collect();
        let mut rss = 0.0;
        for i in 0..self.n {
            let mut fit = b_p[self.person[i]] + b_f[self.firm[i]];
            for (c, g) in gamma.iter().enumerate() {
                fit += self.q[(i, c)] * g;
            }
            rss += (self.y[i] - fit).powi(2);
        }
        let pwrss = rss + u.iter().map(|v| v * v).sum::<f64>();
        let n = self.n as f64;
        let log_det = factor.log_det_leading(nz);
        let deviance = log_det + n * (1.0 + (2.0 * std::f64::consts::PI * pwrss / n).ln());
        let coef = self
            .r
            .solve_upper_triangular(&DVector::from_column_slice(gamma))
            .ok_or_else(|| MeError::Collinear("(intercept)".into()))?;
        let sigma_e2 = pwrss / n;
        Ok(ProfiledDeviance {
            deviance,
            vc: VarianceComponents::new(lp * lp * sigma_e2, lf * lf * sigma_e2, sigma_e2),
            intercept: coef[0],
            beta: coef.iter().skip(1).copied().collect(),
            modes_p: b_p,
            modes_f: b_f,
            pwrss,
        })
    }
}

/// Profiled deviance at variance ratios `(σ_p²/σ_e², σ_f²/σ_e²)`.
pub fn profiled_deviance(panel: &Panel, ratios: (f64, f64)) -> Result<ProfiledDeviance, MeError> {
    if !(ratios.0 >= 0.0 && ratios.1 >= 0.0 && ratios.0.is_finite() && ratios.1.is_finite()) {
        return Err(MeError::InvalidRatios(ratios.0, ratios.1));
    }
    HendersonSystem::new(panel)?.evaluate(ratios.0.sqrt(), ratios.1.sqrt())
}

/// Solves `(ZᵀZ + σ_e² G⁻¹) b = Zᵀ(y − intercept − Xβ)`.
///
/// A zero variance component pins that block of modes to zero.
pub fn conditional_modes(
    panel: &Panel,
    vc: &VarianceComponents,
    intercept: f64,
    beta: &[f64],
) -> Result<ConditionalModes, MeError> {
    if beta.len() != panel.k() {
        return Err(MeError::BetaLength {
            expected: panel.k(),
            got: beta.len(),
        });
    }
    if !(vc.sigma_e2 > 0.0 && vc.sigma_p2 >= 0.0 && vc.sigma_f2 >= 0.0) {
        return Err(MeError::InvalidRatios(vc.sigma_p2, vc.sigma_f2));
    }
    let (n_p, n_f) = (panel.n_persons(), panel.n_firms());
    let lp = (vc.sigma_p2 / vc.sigma_e2).sqrt();
    let lf = (vc.sigma_f2 / vc.sigma_e2).sqrt();
    if lp == 0.0 {
        log::warn!("person variance component is zero; person modes set to 0");
    }
    if lf == 0.0 {
        log::warn!("firm variance component is zero; firm modes set to 0");
    }
    let mut pc = vec![0.0; n_p];
    let mut fc = vec![0.0; n_f];
    let mut rhs = vec![0.0; n_p + n_f];
    for i in 0..panel.n_obs() {
        let (p, f) = (panel.persons()[i], panel.firms()[i]);
        let xb: f64 = panel.x_row(i).iter().zip(beta).map(|(x, b)| x * b).sum();
        let r = panel.y()[i] - intercept - xb;
        pc[p] += 1.0;
        fc[f] += 1.0;
        rhs[p] += lp * r;
        rhs[n_p + f] += lf * r;
    }
    let mut trip = Vec::new();
    for p in 0..n_p {
        trip.push((p, p, lp * lp * pc[p] + 1.0));
    }
    for f in 0..n_f {
        trip.push((n_p + f, n_p + f, lf * lf * fc[f] + 1.0));
    }
    for m in &panel.match_index().matches {
        let v = lp * lf * m.n_obs as f64;
        trip.push((m.person, n_p + m.firm, v));
        trip.push((n_p + m.firm, m.person, v));
    }
    let a = CsrMatrix::from_triplets(n_p + n_f, n_p + n_f, trip)?;
    let u = SymbolicCholesky::analyze(&a, &Ordering::MinimumDegree)?
        .factor(&a)?
        .solve(&rhs)?;
    Ok(ConditionalModes {
        person: u[..n_p].iter().map(|v| lp * v).collect(),
        firm: u[n_p..].iter().map(|v| lf * v).collect(),
        degenerate_person: lp == 0.0,
        degenerate_firm: lf == 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlConfig {
    /// Starting points in log standard-deviation ratios.
    pub starts: Vec<(f64, f64)>,
    pub lower: f64,
    pub upper: f64,
    pub max_evals: usize,
    /// Stop when the spread of simplex deviances falls below this.
    pub f_tol: f64,
    /// ... and the simplex diameter below this.
    pub x_tol: f64,
}

impl Default for MlConfig {
    fn default() -> Self {
        Self {
            starts: vec![(0.0, 0.0), (-2.0, -2.0), (1.0, 1.0)],
            lower: -12.0,
            upper: 6.0,
            max_evals: 400,
            f_tol: 1e-9,
            x_tol: 1e-6,
        }
    }
}

struct NmResult {
    x: [f64; 2],
    f: f64,
    evals: usize,
    trace: Vec<f64>,
    converged: bool,
}

/// Box-constrained Nelder-Mead in two dimensions; trial points are clamped to the box.
fn nelder_mead<F>(f: F, start: (f64, f64), cfg: &MlConfig) -> NmResult
where
    F: Fn([f64; 2]) -> f64,
{
    let clamp = |p: [f64; 2]| [p[0].clamp(cfg.lower, cfg.upper), p[1].clamp(cfg.lower, cfg.upper)];
    let evals = std::cell::Cell::new(0usize);
    let eval = |p: [f64; 2]| {
        evals.set(evals.get() + 1);
        let v = f(p);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let x0 = clamp([start.0, start.1]);
    let step = 0.5;
    let x1 = clamp([x0[0] + step, x0[1]]);
    let x2 = clamp([x0[0], x0[1] + step]);
    let mut simplex = vec![(x0, eval(x0)), (x1, eval(x1)), (x2, eval(x2))];
    let mut trace = Vec::new();
    let mut converged = false;
    while evals.get() < cfg.max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        trace.push(simplex[0].1);
        let spread = simplex[2].1 - simplex[0].1;
        let diam = simplex
            .iter()
            .map(|(p, _)| (p[0] - simplex[0].0[0]).abs().max((p[1] - simplex[0].0[1]).abs()))
            .fold(0.0, f64::max);
        if spread.abs() <= cfg.f_tol * (1.0 + simplex[0].1.abs()) && diam <= cfg.x_tol {
            converged = true;
            break;
        }
        let c = [
            (simplex[0].0[0] + simplex[1].0[0]) / 2.0,
            (simplex[0].0[1] + simplex[1].0[1]) / 2.0,
        ];
        let w = simplex[2];
        let along = |t: f64| clamp([c[0] + t * (w.0[0] - c[0]), c[1] + t * (w.0[1] - c[1])]);
        let xr = along(-1.0);
        let fr = eval(xr);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = eval(xe);
            simplex[2] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[1].1 {
            simplex[2] = (xr, fr);
        } else {
            let (xc, fc) = if fr < w.1 {
                let xc = along(-0.5);
                (xc, eval(xc))
            } else {
                let xc = along(0.5);
                (xc, eval(xc))
            };
            if fc < fr.min(w.1) {
                simplex[2] = (xc, fc);
            } else {
                let best = simplex[0].0;
                for v in simplex.iter_mut().skip(1) {
                    let p = clamp([(best[0] + v.0[0]) / 2.0, (best[1] + v.0[1]) / 2.0]);
                    *v = (p, eval(p));
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    NmResult {
        x: simplex[0].0,
        f: simplex[0].1,
        evals: evals.get(),
        trace,
        converged,
    }
}

fn centre(values: &mut [f64], index: &[usize]) -> f64 {
    let mean = index.iter().map(|&j| values[j]).sum::<f64>() / index.len() as f64;
    values.iter_mut().for_each(|v| *v -= mean);
    mean
}

/// Maximum-likelihood fit of the crossed random-effects model.
pub fn fit_ml(panel: &Panel, cfg: &MlConfig) -> Result<MeEstimate, MeError> {
    let sys = HendersonSystem::new(panel)?;
    let objective = |p: [f64; 2]| {
        sys.evaluate(p[0].exp(), p[1].exp())
            .map(|d| d.deviance)
            .unwrap_or(f64::INFINITY)
    };
    let runs: Vec<NmResult> = cfg
        .starts
        .par_iter()
        .map(|&s| nelder_mead(objective, s, cfg))
        .collect();
    let evaluations = runs.iter().map(|r| r.evals).sum();
    let best = runs
        .into_iter()
        .reduce(|a, b| if b.f < a.f { b } else { a })
        .ok_or_else(|| MeError::InvalidRatios(f64::NAN, f64::NAN))?;
    let pd = sys.evaluate(best.x[0].exp(), best.x[1].exp())?;
    let at_bound = |v: f64| v - cfg.lower <= 1e-6 || cfg.upper - v <= 1e-6;
    let boundary_p = at_bound(best.x[0]) || (2.0 * best.x[0]).exp() < 1e-6;
    let boundary_f = at_bound(best.x[1]) || (2.0 * best.x[1]).exp() < 1e-6;
    let mut modes_p = pd.modes_p;
    let mut modes_f = pd.modes_f;
    let shift_p = centre(&mut modes_p, panel.persons());
    let shift_f = centre(&mut modes_f, panel.firms());
    Ok(MeEstimate {
        vc: pd.vc,
        covariate_names: sys.covariate_names.clone(),
        beta: pd.beta,
        intercept: pd.intercept + shift_p + shift_f,
        modes_p,
        modes_f,
        deviance: pd.deviance,
        log_ratios: (best.x[0], best.x[1]),
        boundary_p,
        boundary_f,
        evaluations,
        trace: best.trace,
        converged: best.converged,
    })
}

/// Cholesky factor of the superpopulation covariance
/// `C = [[σ_p² I, σ_pf 1ᵀ], [σ_pf 1, σ_f² I]]`, built blockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpopCholesky {
    pub n_p: usize,
    pub n_f: usize,
    /// Dense lower-triangular factor, persons first.
    pub l: DMatrix<f64>,
    pub log_det: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("covariance is not positive definite: pivot {pivot} of the firm block is {value:e}")]
pub struct Infeasible {
    pub pivot: usize,
    pub value: f64,
}

pub fn superpop_covariance(n_p: usize, n_f: usize, sigma_p: f64, sigma_f: f64, rho: f64) -> DMatrix<f64> {
    let s_pf = rho * sigma_p * sigma_f;
    DMatrix::from_fn(n_p + n_f, n_p + n_f, |i, j| match (i < n_p, j < n_p) {
        (true, true) => (i == j) as u8 as f64 * sigma_p * sigma_p,
        (false, false) => (i == j) as u8 as f64 * sigma_f * sigma_f,
        _ => s_pf,
    })
}

/// `L_A = σ_p I`, off-diagonal block `(σ_pf/σ_p) 1`, then a dense Cholesky of
/// the Schur complement `S = σ_f²(I − ρ² n_p J)`.
pub fn superpop_vcm_cholesky(
    n_p: usize,
    n_f: usize,
    sigma_p: f64,
    sigma_f: f64,
    rho: f64,
) -> Result<SuperpopCholesky, Infeasible> {
    let n = n_p + n_f;
    let s_pf = rho * sigma_p * sigma_f;
    let off = s_pf / sigma_p;
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n_p {
        l[(i, i)] = sigma_p;
    }
    for r in 0..n_f {
        for c in 0..n_p {
            l[(n_p + r, c)] = off;
        }
    }
    let s = DMatrix::from_fn(n_f, n_f, |i, j| {
        sigma_f * sigma_f * ((i == j) as u8 as f64 - rho * rho * n_p as f64)
    });
    let mut ls = DMatrix::<f64>::zeros(n_f, n_f);
    for j in 0..n_f {
        let d = s[(j, j)] - (0..j).map(|k| ls[(j, k)] * ls[(j, k)]).sum::<f64>();
        if !(d > 0.0) {
            return Err(Infeasible { pivot: j, value: d });
        }
        ls[(j, j)] = d.sqrt();
        for i in j + 1..n_f {
            let v = s[(i, j)] - (0..j).map(|k| ls[(i, k)] * ls[(j, k)]).sum::<f64>();
            ls[(i, j)] = v / ls[(j, j)];
        }
    }
    l.view_mut((n_p, n_p), (n_f, n_f)).copy_from(&ls);
    let log_det = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
    Ok(SuperpopCholesky { n_p, n_f, l, log_det })
}

/// Largest correlation for which the superpopulation covariance is positive
/// definite, by bisection on the block factorization.
pub fn max_feasible_rho(n_p: usize, n_f: usize) -> f64 {
    let feasible = |rho: f64| superpop_vcm_cholesky(n_p, n_f, 1.0, 1.0, rho).is_ok();
    let (mut lo, mut hi) = (0.0, 1.0);
    if feasible(hi) {
        return hi;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fe::fit_akm;
    use crate::panel::Observation;
    use crate::solver::CgConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn obs(p: usize, f: usize, t: i64, y: f64, x: Vec<f64>) -> Observation {
        Observation {
            person: format!("p{p}"),
            firm: format!("f{f}"),
            period: t,
            y,
            x,
        }
    }

    /// Random panel with person/firm effects; `n_firms` firms, persons hop
    /// between two firms.
    fn random_panel(seed: u64, n_persons: usize, n_firms: usize, periods: usize, k: usize, sp: f64, sf: f64) -> Panel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nrm = Normal::new(0.0, 1.0).unwrap();
        let psi: Vec<f64> = (0..n_firms).map(|_| sf * nrm.sample(&mut rng)).collect();
        let mut rows = Vec::new();
        for p in 0..n_persons {
            let theta = sp * nrm.sample(&mut rng);
            let f1 = rng.random_range(0..n_firms);
            let f2 = rng.random_range(0..n_firms);
            for t in 0..periods {
                let f = if t < periods / 2 { f1 } else { f2 };
                let x: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
                let xb: f64 = x.iter().map(|v| 0.5 * v).sum();
                let y = 1.0 + theta + psi[f] + xb + 0.5 * nrm.sample(&mut rng);
                rows.push(obs(p, f, t as i64, y, x));
            }
        }
        Panel::from_observations(rows, (0..k).map(|j| format!("x{j}")).collect()).unwrap()
    }

    fn toy5() -> Panel {
        random_panel(42, 5, 3, 4, 1, 0.8, 0.6)
    }

    fn dense_z(panel: &Panel) -> DMatrix<f64> {
        let (n_p, n_f) = (panel.n_persons(), panel.n_firms());
        DMatrix::from_fn(panel.n_obs(), n_p + n_f, |i, j| {
            if j < n_p {
                (panel.persons()[i] == j) as u8 as f64
            } else {
                (panel.firms()[i] == j - n_p) as u8 as f64
            }
        })
    }

    fn dense_x1(panel: &Panel) -> DMatrix<f64> {
        DMatrix::from_fn(panel.n_obs(), 1 + panel.k(), |i, j| if j == 0 { 1.0 } else { panel.x_row(i)[j - 1] })
    }

    /// −2 log N(y; Xβ̂, σ̂²W) with W = Z diag(ratios) Zᵀ + I, maximized over β and σ².
    fn dense_marginal_deviance(panel: &Panel, ratios: (f64, f64)) -> f64 {
        let z = dense_z(panel);
        let x = dense_x1(panel);
        let n = panel.n_obs();
        let n_p = panel.n_persons();
        let g = DMatrix::from_fn(z.ncols(), z.ncols(), |i, j| {
            if i != j {
                0.0
            } else if i < n_p {
                ratios.0
            } else {
                ratios.1
            }
        });
        let w = &z * g * z.transpose() + DMatrix::identity(n, n);
        let chol = w.clone().cholesky().unwrap();
        let winv = chol.inverse();
        let y = DVector::from_column_slice(panel.y());
        let xtwx = x.transpose() * &winv * &x;
        let beta = xtwx.cholesky().unwrap().solve(&(x.transpose() * &winv * &y));
        let r = &y - &x * beta;
        let s2 = (r.transpose() * &winv * &r)[(0, 0)] / n as f64;
        let logdet_w: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        n as f64 * (2.0 * std::f64::consts::PI * s2).ln() + logdet_w + n as f64
    }

    #[test]
    fn deviance_matches_dense_marginal_likelihood() {
        let p = toy5();
        for ratios in [(1.0, 1.0), (0.3, 2.0), (1e-4, 0.5)] {
            let d = profiled_deviance(&p, ratios).unwrap().deviance;
            let oracle = dense_marginal_deviance(&p, ratios);
            assert!((d - oracle).abs() <= 1e-6, "{d} vs {oracle}");
        }
    }

    #[test]
    fn deviance_approaches_ols_as_ratios_vanish() {
        let p = toy5();
        let x = dense_x1(&p);
        let y = DVector::from_column_slice(p.y());
        let beta = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * &y));
        let rss = (&y - &x * beta).norm_squared();
        let n = p.n_obs() as f64;
        let ols = n * (1.0 + (2.0 * std::f64::consts::PI * rss / n).ln());
        let d = profiled_deviance(&p, (1e-14, 1e-14)).unwrap().deviance;
        assert!((d - ols).abs() < 1e-8);
    }

    #[test]
    fn deviance_invariant_to_row_order() {
        let p = toy5();
        let mut rows: Vec<Observation> = p.observations().collect();
        rows.reverse();
        let q = Panel::from_observations(rows, p.covariate_names().to_vec()).unwrap();
        let a = profiled_deviance(&p, (0.7, 0.2)).unwrap().deviance;
        let b = profiled_deviance(&q, (0.7, 0.2)).unwrap().deviance;
        assert!((a - b).abs() <= 1e-10);
    }

    #[test]
    fn modes_match_dense_henderson_formula() {
        let p = toy5();
        let vc = VarianceComponents::new(1.0, 1.0, 1.0);
        let beta = [0.3];
        let m = conditional_modes(&p, &vc, 0.8, &beta).unwrap();
        let z = dense_z(&p);
        let r = DVector::from_fn(p.n_obs(), |i, _| p.y()[i] - 0.8 - 0.3 * p.x_row(i)[0]);
        let lhs = z.transpose() * &z + DMatrix::identity(z.ncols(), z.ncols());
        let oracle = lhs.cholesky().unwrap().solve(&(z.transpose() * r));
        let got: Vec<f64> = m.person.iter().chain(&m.firm).copied().collect();
        for (a, b) in got.iter().zip(oracle.iter()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn zero_person_component_pins_modes() {
        let p = toy5();
        let vc = VarianceComponents::new(0.0, 0.5, 1.0);
        let m = conditional_modes(&p, &vc, 0.0, &[0.0]).unwrap();
        assert!(m.degenerate_person && !m.degenerate_firm);
        assert!(m.person.iter().all(|v| *v == 0.0));
        assert!(m.firm.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn modes_approach_fixed_effects_as_noise_vanishes() {
        let p = random_panel(7, 30, 5, 4, 0, 0.5, 0.5).without_covariates();
        let fe = fit_akm(&p, false, &CgConfig { tol: 1e-13, ..CgConfig::default() }).unwrap();
        let n = p.n_obs() as f64;
        let ybar = p.mean_y();
        let var_y = p.y().iter().map(|v| (v - ybar).powi(2)).sum::<f64>() / n;
        let vc = VarianceComponents::new(1.0, 1.0, 1e-8 * var_y);
        let mut m = conditional_modes(&p, &vc, fe.intercept, &[]).unwrap();
        centre(&mut m.person, p.persons());
        centre(&mut m.firm, p.firms());
        for (a, b) in m.person.iter().zip(&fe.theta) {
            assert!((a - b).abs() <= 1e-3);
        }
        for (a, b) in m.firm.iter().zip(&fe.psi) {
            assert!((a - b).abs() <= 1e-3);
        }
    }

    #[test]
    fn modes_on_disconnected_panel() {
        let rows = vec![
            obs(0, 0, 0, 1.0, vec![]),
            obs(0, 0, 1, 1.2, vec![]),
            obs(1, 1, 0, -0.5, vec![]),
            obs(1, 1, 1, -0.1, vec![]),
        ];
        let p = Panel::from_observations(rows, vec![]).unwrap();
        let m = conditional_modes(&p, &VarianceComponents::new(0.5, 0.5, 0.2), 0.4, &[]).unwrap();
        assert!(m.person.iter().chain(&m.firm).all(|v| v.is_finite()));
        let est = fit_ml(&p, &MlConfig::default()).unwrap();
        assert!(est.deviance.is_finite());
    }

    fn dense_deviance_at(p: &Panel, lx: f64, ly: f64) -> f64 {
        dense_marginal_deviance(p, ((2.0 * lx).exp(), (2.0 * ly).exp()))
    }

    #[test]
    fn ml_optimum_matches_grid_search() {
        let p = toy5();
        let est = fit_ml(&p, &MlConfig::default()).unwrap();
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let coarse = 0.1;
        let mut a = -12.0;
        while a <= 6.0 + 1e-9 {
            let mut b = -12.0;
            while b <= 6.0 + 1e-9 {
                let d = dense_deviance_at(&p, a, b);
                if d < best.0 {
                    best = (d, a, b);
                }
                b += coarse;
            }
            a += coarse;
        }
        let (_, ca, cb) = best;
        for i in -100..=100 {
            for j in -100..=100 {
                let (a, b) = (ca + i as f64 * 1e-3, cb + j as f64 * 1e-3);
                if !(-12.0..=6.0).contains(&a) || !(-12.0..=6.0).contains(&b) {
                    continue;
                }
                let d = dense_deviance_at(&p, a, b);
                if d < best.0 {
                    best = (d, a, b);
                }
            }
        }
        assert!((est.deviance - best.0).abs() <= 1e-3, "{} vs grid {}", est.deviance, best.0);
        assert!(est.deviance <= best.0 + 1e-6);
    }

    #[test]
    fn trace_is_monotone() {
        let est = fit_ml(&toy5(), &MlConfig::default()).unwrap();
        assert!(est.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(est.converged);
    }

    #[test]
    fn no_random_effects_hits_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nrm = Normal::new(0.0, 1.0).unwrap();
        let mut rows = Vec::new();
        for p in 0..40 {
            for t in 0..4 {
                let f = (p + t / 2) % 6;
                let x = rng.random_range(-1.0..1.0);
                rows.push(obs(p, f, t as i64, 2.0 * x + nrm.sample(&mut rng), vec![x]));
            }
        }
        let p = Panel::from_observations(rows, vec!["x".into()]).unwrap();
        let est = fit_ml(&p, &MlConfig::default()).unwrap();
        assert!(est.vc.sigma_p2 < 1e-2 * est.vc.sigma_e2);
        assert!(est.vc.sigma_f2 < 1e-2 * est.vc.sigma_e2);
        assert!(est.boundary_f || est.vc.sigma_f2 < 1e-6 * est.vc.sigma_e2 || est.boundary_p);
    }

    #[test]
    fn fitted_modes_are_centred_conditional_modes() {
        let p = random_panel(11, 60, 6, 4, 1, 0.5, 0.4);
        let est = fit_ml(&p, &MlConfig::default()).unwrap();
        let n = p.n_obs() as f64;
        let mp: f64 = p.persons().iter().map(|&i| est.modes_p[i]).sum::<f64>() / n;
        assert!(mp.abs() < 1e-12);
        // Raw modes from the Henderson system satisfy it to tight tolerance.
        let sys = HendersonSystem::new(&p).unwrap();
        let (lp, lf) = (est.log_ratios.0.exp(), est.log_ratios.1.exp());
        let pd = sys.evaluate(lp, lf).unwrap();
        let raw = conditional_modes(&p, &pd.vc, pd.intercept, &pd.beta).unwrap();
        for (a, b) in raw.person.iter().zip(&pd.modes_p) {
            assert!((a - b).abs() < 1e-8);
        }
        let z = dense_z(&p);
        let r = DVector::from_fn(p.n_obs(), |i, _| p.y()[i] - pd.intercept - pd.beta[0] * p.x_row(i)[0]);
        let rhs = z.transpose() * r;
        let n_p = p.n_persons();
        let pen = DMatrix::from_fn(z.ncols(), z.ncols(), |i, j| {
            if i != j {
                0.0
            } else if i < n_p {
                pd.vc.sigma_e2 / pd.vc.sigma_p2
            } else {
                pd.vc.sigma_e2 / pd.vc.sigma_f2
            }
        });
        let b = DVector::from_iterator(z.ncols(), raw.person.iter().chain(&raw.firm).copied());
        let resid = (z.transpose() * &z + pen) * b - &rhs;
        assert!(resid.norm() <= 1e-8 * rhs.norm());
    }

    #[test]
    fn modes_contract_relative_to_fixed_effects() {
        for seed in 0..5 {
            let p = random_panel(100 + seed, 40, 5, 4, 0, 0.5, 0.5);
            if crate::graph::connected_components(&crate::graph::BipartiteGraph::from_panel(&p)).n_components() > 1 {
                continue;
            }
            let fe = fit_akm(&p, false, &CgConfig { tol: 1e-13, ..CgConfig::default() }).unwrap();
            let est = fit_ml(&p, &MlConfig::default()).unwrap();
            let nm: f64 = est.modes_p.iter().map(|v| v * v).sum();
            let nf: f64 = fe.theta.iter().map(|v| v * v).sum();
            assert!(nm <= nf + 1e-8, "{nm} > {nf}");
        }
    }

    #[test]
    fn superpop_examples() {
        let f = superpop_vcm_cholesky(3, 2, 0.5, 0.7, 0.0).unwrap();
        let expect = 3.0 * 0.25f64.ln() + 2.0 * 0.49f64.ln();
        assert!((f.log_det - expect).abs() < 1e-12);

        let c = superpop_covariance(4, 2, 0.26, 0.25, 0.3);
        let f = superpop_vcm_cholesky(4, 2, 0.26, 0.25, 0.3).unwrap();
        assert!((&f.l * f.l.transpose() - &c).abs().max() <= 1e-12);

        assert!(superpop_vcm_cholesky(4, 2, 0.26, 0.25, 0.4).is_err());
        let c = superpop_covariance(4, 2, 1.0, 1.0, 0.4);
        assert!(c.symmetric_eigen().eigenvalues.min() < 0.0);
    }

    #[test]
    fn max_rho_examples() {
        assert!((max_feasible_rho(1, 1) - 1.0).abs() < 1e-12);
        assert!((max_feasible_rho(4, 2) - 0.35355).abs() < 1e-5);
        for np in 1..=20 {
            for nf in 1..=20 {
                let r = max_feasible_rho(np, nf);
                if np > 1 {
                    assert!(r < max_feasible_rho(np - 1, nf));
                }
                if nf > 1 {
                    assert!(r < max_feasible_rho(np, nf - 1));
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn superpop_feasibility_agrees_with_eigenvalues(np in 1usize..=30, nf in 1usize..=30, rho in 0.0f64..1.0) {
            let c = superpop_covariance(np, nf, 1.0, 1.0, rho);
            let min_eig = c.symmetric_eigen().eigenvalues.min();
            let ok = superpop_vcm_cholesky(np, nf, 1.0, 1.0, rho).is_ok();
            // Away from the boundary the two must agree.
            if min_eig.abs() > 1e-10 {
                prop_assert_eq!(ok, min_eig > 0.0);
            }
        }

        #[test]
        fn modes_match_dense_on_random_instances(seed in any::<u64>(), np in 2usize..30, nf in 1usize..6, sp in 0.1f64..2.0, sf in 0.1f64..2.0) {
            let p = random_panel(seed, np, nf, 4, 0, 0.5, 0.5);
            let vc = VarianceComponents::new(sp, sf, 0.7);
            let m = conditional_modes(&p, &vc, 0.9, &[]).unwrap();
            let z = dense_z(&p);
            let r = DVector::from_fn(p.n_obs(), |i, _| p.y()[i] - 0.9);
            let n_p = p.n_persons();
            let pen = DMatrix::from_fn(z.ncols(), z.ncols(), |i, j| {
                if i != j { 0.0 } else if i < n_p { 0.7 / sp } else { 0.7 / sf }
            });
            let oracle = (z.transpose() * &z + pen).cholesky().unwrap().solve(&(z.transpose() * r));
            for (a, b) in m.person.iter().chain(&m.firm).zip(oracle.iter()) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }
    }
}
