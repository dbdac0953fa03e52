//! Leave-out bias correction of plug-in variance components.
//!
//! The two-way dummy model `e = μ + θ_p + ψ_f + ε` is fitted on the composite
//! residual `e = y − xβ̂`. Every observation of a match shares the same design
//! row `x_m`, so one solve `z_m = S⁻¹x_m` per match gives both the leverage
//! `x_mᵀz_m` and the weights `B_m = z_mᵀ A z_m` of each quadratic form `A`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{leave_out_connected_set, restrict_to_graph, BipartiteGraph, GraphError, LeaveOutLevel};
use crate::panel::Panel;
use crate::solver::{CholeskyFactor, CsrMatrix, Ordering, SolverError, SymbolicCholesky};

/// Units with leverage at or above this are treated as `P = 1`.
pub const LEVERAGE_ONE: f64 = 1.0 - 1e-12;

#[derive(Debug, Error)]
pub enum KssError {
    #[error("empty leave-out connected set; try the observation variant")]
    EmptyLeaveOutSet,
    #[error("coefficient vector has length {got}, expected {expected}")]
    BetaLength { expected: usize, got: usize },
    #[error("sketched leverages need at least one probe")]
    NoProbes,
    #[error(transparent)]
    Solver(#[from] SolverError),
}

impl From<GraphError> for KssError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::EmptyLeaveOutSet => KssError::EmptyLeaveOutSet,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Obs,
    Match,
}

impl Variant {
    pub fn level(self) -> LeaveOutLevel {
        match self {
            Variant::Obs => LeaveOutLevel::Obs,
            Variant::Match => LeaveOutLevel::Match,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "method")]
pub enum LeverageMethod {
    Exact,
    /// Rademacher random projections.
    Sketch { probes: usize, seed: u64 },
}

/// Match-level view of a panel: one design row per match, with the units that
/// are left out (observations or whole matches).
#[derive(Debug, Clone, PartialEq)]
pub struct LeaveOutData {
    pub variant: Variant,
    pub n_p: usize,
    pub n_f: usize,
    pub n_obs: usize,
    pub match_person: Vec<usize>,
    pub match_firm: Vec<usize>,
    /// Observations per match.
    pub match_weight: Vec<f64>,
    /// Match of each unit.
    pub unit_match: Vec<usize>,
    /// Outcome per unit; match means for the match variant.
    pub unit_y: Vec<f64>,
    /// Observation weight per unit.
    pub unit_w: Vec<f64>,
    pub person_counts: Vec<f64>,
    pub firm_counts: Vec<f64>,
    pub person_labels: Vec<String>,
    pub firm_labels: Vec<String>,
}

impl LeaveOutData {
    pub fn new(panel: &Panel, variant: Variant) -> Self {
        let mi = panel.match_index();
        let n_m = mi.matches.len();
        let match_weight: Vec<f64> = mi.matches.iter().map(|m| m.n_obs as f64).collect();
        let (unit_match, unit_y, unit_w) = match variant {
            Variant::Obs => (mi.obs_match.clone(), panel.y().to_vec(), vec![1.0; panel.n_obs()]),
            Variant::Match => {
                let mut sums = vec![0.0; n_m];
                for (i, &m) in mi.obs_match.iter().enumerate() {
                    sums[m] += panel.y()[i];
                }
                let means = sums.iter().zip(&match_weight).map(|(s, w)| s / w).collect();
                ((0..n_m).collect(), means, match_weight.clone())
            }
        };
        Self {
            variant,
            n_p: panel.n_persons(),
            n_f: panel.n_firms(),
            n_obs: panel.n_obs(),
            match_person: mi.matches.iter().map(|m| m.person).collect(),
            match_firm: mi.matches.iter().map(|m| m.firm).collect(),
            match_weight,
            unit_match,
            unit_y,
            unit_w,
            person_counts: panel.person_counts().into_iter().map(|c| c as f64).collect(),
            firm_counts: panel.firm_counts().into_iter().map(|c| c as f64).collect(),
            person_labels: panel.person_labels().to_vec(),
            firm_labels: panel.firm_labels().to_vec(),
        }
    }

    pub fn n_matches(&self) -> usize {
        self.match_person.len()
    }

    pub fn n_units(&self) -> usize {
        self.unit_y.len()
    }

    /// Coefficient dimension: all persons and all firms but the last.
    pub fn dim(&self) -> usize {
        self.n_p + self.n_f - 1
    }

    fn firm_col(&self, f: usize) -> Option<usize> {
        (f + 1 < self.n_f).then_some(self.n_p + f)
    }

    /// `x_mᵀ v` for a coefficient vector.
    fn row_dot(&self, m: usize, v: &[f64]) -> f64 {
        let mut s = v[self.match_person[m]];
        if let Some(c) = self.firm_col(self.match_firm[m]) {
            s += v[c];
        }
        s
    }

    /// Observation-weighted mean outcome.
    pub fn mean_y(&self) -> f64 {
        self.unit_y.iter().zip(&self.unit_w).map(|(y, w)| y * w).sum::<f64>() / self.n_obs as f64
    }
}

/// Match-level panel with the left-out units being whole matches.
pub fn collapse_matches(panel: &Panel) -> LeaveOutData {
    LeaveOutData::new(panel, Variant::Match)
}

/// Restricts to the match-level leave-out connected set, then collapses.
pub fn collapse_to_matches(panel: &Panel) -> Result<LeaveOutData, KssError> {
    let restricted = restrict_leave_out(panel, Variant::Match)?;
    Ok(collapse_matches(&restricted))
}

/// Subpanel on the leave-out connected set of the given variant.
pub fn restrict_leave_out(panel: &Panel, variant: Variant) -> Result<Panel, KssError> {
    if panel.is_empty() {
        return Err(KssError::EmptyLeaveOutSet);
    }
    let g = BipartiteGraph::from_panel(panel);
    let set = leave_out_connected_set(&g, variant.level())?;
    Ok(restrict_to_graph(panel, &set))
}

/// Factorization of `S = Σ_m w_m x_m x_mᵀ` (last firm dropped).
pub struct TwoWaySolver {
    factor: CholeskyFactor,
}

impl TwoWaySolver {
    pub fn new(data: &LeaveOutData) -> Result<Self, KssError> {
        let n = data.dim();
        let mut trip = Vec::with_capacity(n + 2 * data.n_matches());
        for (p, c) in data.person_counts.iter().enumerate() {
            trip.push((p, p, *c));
        }
        for f in 0..data.n_f.saturating_sub(1) {
            trip.push((data.n_p + f, data.n_p + f, data.firm_counts[f]));
        }
        for m in 0..data.n_matches() {
            if let Some(c) = data.firm_col(data.match_firm[m]) {
                let p = data.match_person[m];
                trip.push((p, c, data.match_weight[m]));
                trip.push((c, p, data.match_weight[m]));
            }
        }
        let s = CsrMatrix::from_triplets(n, n, trip)?;
        let factor = SymbolicCholesky::analyze(&s, &Ordering::MinimumDegree)?.factor(&s)?;
        Ok(Self { factor })
    }

    pub fn solve_into(&self, b: &[f64], out: &mut [f64], work: &mut [f64]) {
        self.factor.solve_into(b, out, work);
    }
}

/// Full-sample two-way fit of the unit outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct DummyFit {
    /// Coefficients, persons then firms; the last firm is the reference (0).
    pub coef: Vec<f64>,
    pub match_fitted: Vec<f64>,
    pub unit_residual: Vec<f64>,
}

pub fn fit_dummies(data: &LeaveOutData, solver: &TwoWaySolver) -> DummyFit {
    let n = data.dim();
    let mut rhs = vec![0.0; n];
    for u in 0..data.n_units() {
        let m = data.unit_match[u];
        let v = data.unit_w[u] * data.unit_y[u];
        rhs[data.match_person[m]] += v;
        if let Some(c) = data.firm_col(data.match_firm[m]) {
            rhs[c] += v;
        }
    }
    let mut coef = vec![0.0; n];
    let mut work = vec![0.0; n];
    solver.solve_into(&rhs, &mut coef, &mut work);
    let match_fitted: Vec<f64> = (0..data.n_matches()).map(|m| data.row_dot(m, &coef)).collect();
    let unit_residual = (0..data.n_units())
        .map(|u| data.unit_y[u] - match_fitted[data.unit_match[u]])
        .collect();
    DummyFit {
        coef,
        match_fitted,
        unit_residual,
    }
}

/// Observation-weighted centred second moments of a coefficient vector's
/// person and firm parts: `(var_p, var_f, cov)`.
fn quad_forms(data: &LeaveOutData, z: &[f64]) -> (f64, f64, f64) {
    let n = data.n_obs as f64;
    let firm_val = |f: usize| data.firm_col(f).map_or(0.0, |c| z[c]);
    let (mut sp, mut spp) = (0.0, 0.0);
    for p in 0..data.n_p {
        let v = z[p];
        sp += data.person_counts[p] * v;
        spp += data.person_counts[p] * v * v;
    }
    let (mut sf, mut sff) = (0.0, 0.0);
    for f in 0..data.n_f {
        let v = firm_val(f);
        sf += data.firm_counts[f] * v;
        sff += data.firm_counts[f] * v * v;
    }
    let mut spf = 0.0;
    for m in 0..data.n_matches() {
        spf += data.match_weight[m] * z[data.match_person[m]] * firm_val(data.match_firm[m]);
    }
    let (mp, mf) = (sp / n, sf / n);
    (spp / n - mp * mp, sff / n - mf * mf, spf / n - mp * mf)
}

/// Per-unit leverages and per-match quadratic-form weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeverageSet {
    pub method: LeverageMethod,
    pub variant: Variant,
    /// `P_uu` per unit.
    pub p_unit: Vec<f64>,
    /// Standard error of each sketched `P_uu`.
    pub p_se: Option<Vec<f64>>,
    /// `x_mᵀ S⁻¹ x_m` per match.
    pub h_match: Vec<f64>,
    pub b_person: Vec<f64>,
    pub b_firm: Vec<f64>,
    pub b_cov: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeverageSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub sum: f64,
    pub count_at_one: usize,
}

impl LeverageSet {
    fn from_match_values(
        data: &LeaveOutData,
        method: LeverageMethod,
        h: Vec<f64>,
        h_se: Option<Vec<f64>>,
        b: Vec<(f64, f64, f64)>,
    ) -> Self {
        let scale = |u: usize| match data.variant {
            Variant::Obs => 1.0,
            Variant::Match => data.match_weight[data.unit_match[u]],
        };
        let p_unit = (0..data.n_units()).map(|u| scale(u) * h[data.unit_match[u]]).collect();
        let p_se = h_se.map(|se| (0..data.n_units()).map(|u| scale(u) * se[data.unit_match[u]]).collect());
        Self {
            method,
            variant: data.variant,
            p_unit,
            p_se,
            h_match: h,
            b_person: b.iter().map(|t| t.0).collect(),
            b_firm: b.iter().map(|t| t.1).collect(),
            b_cov: b.iter().map(|t| t.2).collect(),
        }
    }

    /// Summary over units; the sum is observation-weighted for the obs variant.
    pub fn summary(&self) -> LeverageSummary {
        let n = self.p_unit.len().max(1) as f64;
        LeverageSummary {
            min: self.p_unit.iter().copied().fold(f64::INFINITY, f64::min),
            max: self.p_unit.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: self.p_unit.iter().sum::<f64>() / n,
            sum: self.p_unit.iter().sum(),
            count_at_one: self.p_unit.iter().filter(|p| **p >= LEVERAGE_ONE).count(),
        }
    }
}

/// One solve per match.
pub fn leverages_exact(data: &LeaveOutData, solver: &TwoWaySolver) -> LeverageSet {
    let n = data.dim();
    let per_match: Vec<(f64, (f64, f64, f64))> = (0..data.n_matches())
        .into_par_iter()
        .map_init(
            || (vec![0.0; n], vec![0.0; n], vec![0.0; n]),
            |(rhs, z, work), m| {
                rhs.iter_mut().for_each(|v| *v = 0.0);
                rhs[data.match_person[m]] = 1.0;
                if let Some(c) = data.firm_col(data.match_firm[m]) {
                    rhs[c] = 1.0;
                }
                solver.solve_into(rhs, z, work);
                (data.row_dot(m, z), quad_forms(data, z))
            },
        )
        .collect();
    let (h, b): (Vec<f64>, Vec<_>) = per_match.into_iter().unzip();
    LeverageSet::from_match_values(data, LeverageMethod::Exact, h, None, b)
}

/// Random-projection estimates from `3·probes` solves.
pub fn leverages_sketch(
    data: &LeaveOutData,
    solver: &TwoWaySolver,
    probes: usize,
    seed: u64,
) -> Result<LeverageSet, KssError> {
    if probes == 0 {
        return Err(KssError::NoProbes);
    }
    let n = data.dim();
    let n_m = data.n_matches();
    let n_obs = data.n_obs as f64;
    // Each probe j yields, per match, (x_mᵀa, x_mᵀd, x_mᵀf) for
    // a = S⁻¹Xᵀr, d = S⁻¹DᵀMr, f = S⁻¹FᵀMr.
    let projections: Vec<Vec<[f64; 3]>> = (0..probes)
        .into_par_iter()
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut match_sum = vec![0.0; n_m];
            for m in 0..n_m {
                for _ in 0..data.match_weight[m] as usize {
                    match_sum[m] += if rng.random::<bool>() { 1.0 } else { -1.0 };
                }
            }
            let rbar = match_sum.iter().sum::<f64>() / n_obs;
            let mut xr = vec![0.0; n];
            let mut dr = vec![0.0; n];
            let mut fr = vec![0.0; n];
            for m in 0..n_m {
                let centred = match_sum[m] - rbar * data.match_weight[m];
                let p = data.match_person[m];
                xr[p] += match_sum[m];
                dr[p] += centred;
                if let Some(c) = data.firm_col(data.match_firm[m]) {
                    xr[c] += match_sum[m];
                    fr[c] += centred;
                }
            }
            let mut work = vec![0.0; n];
            let mut a = vec![0.0; n];
            let mut d = vec![0.0; n];
            let mut f = vec![0.0; n];
            solver.solve_into(&xr, &mut a, &mut work);
            solver.solve_into(&dr, &mut d, &mut work);
            solver.solve_into(&fr, &mut f, &mut work);
            (0..n_m)
                .map(|m| [data.row_dot(m, &a), data.row_dot(m, &d), data.row_dot(m, &f)])
                .collect()
        })
        .collect();
    let k = probes as f64;
    let mut h = vec![0.0; n_m];
    let mut h_se = vec![0.0; n_m];
    let mut b = vec![(0.0, 0.0, 0.0); n_m];
    for m in 0..n_m {
        let samples: Vec<f64> = projections.iter().map(|pr| pr[m][0] * pr[m][0]).collect();
        let mean = samples.iter().sum::<f64>() / k;
        let var = if probes > 1 {
            samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        h[m] = mean;
        h_se[m] = (var / k).sqrt();
        let (mut bp, mut bf, mut bc) = (0.0, 0.0, 0.0);
        for pr in &projections {
            bp += pr[m][1] * pr[m][1];
            bf += pr[m][2] * pr[m][2];
            bc += pr[m][1] * pr[m][2];
        }
        b[m] = (bp / (k * n_obs), bf / (k * n_obs), bc / (k * n_obs));
    }
    Ok(LeverageSet::from_match_values(
        data,
        LeverageMethod::Sketch { probes, seed },
        h,
        Some(h_se),
        b,
    ))
}

pub fn compute_leverages(
    data: &LeaveOutData,
    solver: &TwoWaySolver,
    method: LeverageMethod,
) -> Result<LeverageSet, KssError> {
    match method {
        LeverageMethod::Exact => Ok(leverages_exact(data, solver)),
        LeverageMethod::Sketch { probes, seed } => leverages_sketch(data, solver, probes, seed),
    }
}

/// Leave-out variance estimates per unit; `None` marks units with `P = 1`.
///
/// `σ̂_u² = (y_u − ȳ)·ε̂_u / (1 − P_uu)`.
pub fn sigma_i_leave_out(data: &LeaveOutData, fit: &DummyFit, lev: &LeverageSet) -> Vec<Option<f64>> {
    let ybar = data.mean_y();
    (0..data.n_units())
        .map(|u| {
            let p = lev.p_unit[u];
            (p < LEVERAGE_ONE).then(|| (data.unit_y[u] - ybar) * fit.unit_residual[u] / (1.0 - p))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PluginMoments {
    pub var_person: f64,
    pub var_firm: f64,
    pub cov_pf: f64,
    pub corr_pf: f64,
}

fn corr(cov: f64, vp: f64, vf: f64) -> f64 {
    if vp > 0.0 && vf > 0.0 {
        cov / (vp * vf).sqrt()
    } else {
        f64::NAN
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KssEstimate {
    pub variant: Variant,
    pub var_person: f64,
    pub var_firm: f64,
    pub cov_pf: f64,
    /// NaN when either corrected variance is not positive.
    pub corr_pf: f64,
    /// `(var_person + var_firm + 2 cov_pf) / Var(y)`.
    pub share: f64,
    pub var_y: f64,
    pub plugin: PluginMoments,
    pub n_obs: usize,
    pub n_persons: usize,
    pub n_firms: usize,
    pub n_units_used: usize,
    pub n_dropped_p_ii_eq_1: usize,
    /// Observation-weighted mean of `σ̂_u²` per observation over used units.
    pub mean_sigma2: f64,
    pub negative_variance: bool,
    pub leverage: LeverageSummary,
    pub leverage_method: LeverageMethod,
}

/// Plug-in moments minus `Σ_u w_u² B_u σ̂_u²`. `var_y` is the outcome variance
/// used for the share.
pub fn correct_variance_components(
    data: &LeaveOutData,
    fit: &DummyFit,
    lev: &LeverageSet,
    var_y: f64,
) -> KssEstimate {
    let (pp, pf_, pc) = quad_forms(data, &fit.coef);
    let sigma = sigma_i_leave_out(data, fit, lev);
    let (mut cp, mut cf, mut cc) = (0.0, 0.0, 0.0);
    let (mut used, mut dropped) = (0, 0);
    let mut sig_sum = 0.0;
    let mut sig_w = 0.0;
    for (u, s) in sigma.iter().enumerate() {
        let Some(s) = s else {
            dropped += 1;
            continue;
        };
        used += 1;
        let m = data.unit_match[u];
        let w2 = data.unit_w[u] * data.unit_w[u];
        cp += w2 * lev.b_person[m] * s;
        cf += w2 * lev.b_firm[m] * s;
        cc += w2 * lev.b_cov[m] * s;
        // A match mean's variance is σ²/w, so σ̂²·w estimates the per-observation variance.
        sig_sum += data.unit_w[u] * data.unit_w[u] * s;
        sig_w += data.unit_w[u];
    }
    let (vp, vf, cov) = (pp - cp, pf_ - cf, pc - cc);
    let negative = vp < 0.0 || vf < 0.0;
    if negative {
        log::warn!("bias-corrected variance is negative (person {vp:e}, firm {vf:e})");
    }
    KssEstimate {
        variant: data.variant,
        var_person: vp,
        var_firm: vf,
        cov_pf: cov,
        corr_pf: corr(cov, vp, vf),
        share: (vp + vf + 2.0 * cov) / var_y,
        var_y,
        plugin: PluginMoments {
            var_person: pp,
            var_firm: pf_,
            cov_pf: pc,
            corr_pf: corr(pc, pp, pf_),
        },
        n_obs: data.n_obs,
        n_persons: data.n_p,
        n_firms: data.n_f,
        n_units_used: used,
        n_dropped_p_ii_eq_1: dropped,
        mean_sigma2: if sig_w > 0.0 { sig_sum / sig_w } else { f64::NAN },
        negative_variance: negative,
        leverage: lev.summary(),
        leverage_method: lev.method,
    }
}

/// Full pipeline on a connected panel given covariate coefficients `beta`
/// (normally from the joint fixed-effects fit): composite residual, leave-out
/// set, dummy fit, leverages and correction.
pub fn kss_estimate(
    panel: &Panel,
    beta: &[f64],
    variant: Variant,
    method: LeverageMethod,
) -> Result<(KssEstimate, LeaveOutData, DummyFit), KssError> {
    if beta.len() != panel.k() {
        return Err(KssError::BetaLength {
            expected: panel.k(),
            got: beta.len(),
        });
    }
    let restricted = restrict_leave_out(panel, variant)?;
    let n = restricted.n_obs() as f64;
    let ybar = restricted.mean_y();
    let var_y = restricted.y().iter().map(|v| (v - ybar).powi(2)).sum::<f64>() / n;
    let composite: Vec<f64> = (0..restricted.n_obs())
        .map(|i| restricted.y()[i] - restricted.x_row(i).iter().zip(beta).map(|(x, b)| x * b).sum::<f64>())
        .collect();
    let e_panel = restricted.without_covariates().with_outcome(composite).expect("same length");
    let data = LeaveOutData::new(&e_panel, variant);
    let solver = TwoWaySolver::new(&data)?;
    let fit = fit_dummies(&data, &solver);
    let lev = compute_leverages(&data, &solver, method)?;
    let est = correct_variance_components(&data, &fit, &lev, var_y);
    Ok((est, data, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::Observation;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn obs(p: usize, f: usize, t: i64, y: f64) -> Observation {
        Observation {
            person: format!("p{p}"),
            firm: format!("f{f}"),
            period: t,
            y,
            x: vec![],
        }
    }

    fn cycle(ys: [f64; 4]) -> Panel {
        Panel::from_observations(
            vec![obs(1, 1, 0, ys[0]), obs(1, 2, 1, ys[1]), obs(2, 1, 0, ys[2]), obs(2, 2, 1, ys[3])],
            vec![],
        )
        .unwrap()
    }

    /// Dense obs-level design `[1 D F]`.
    fn dense_design(panel: &Panel) -> DMatrix<f64> {
        let (np, nf) = (panel.n_persons(), panel.n_firms());
        DMatrix::from_fn(panel.n_obs(), 1 + np + nf, |i, j| {
            if j == 0 {
                1.0
            } else if j <= np {
                (panel.persons()[i] == j - 1) as u8 as f64
            } else {
                (panel.firms()[i] == j - 1 - np) as u8 as f64
            }
        })
    }

    fn hat_diagonal(a: &DMatrix<f64>) -> (Vec<f64>, usize) {
        let svd = a.clone().svd(true, false);
        let u = svd.u.unwrap();
        let tol = svd.singular_values.max() * 1e-10;
        let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
        let diag = (0..a.nrows())
            .map(|i| {
                (0..svd.singular_values.len())
                    .filter(|&j| svd.singular_values[j] > tol)
                    .map(|j| u[(i, j)] * u[(i, j)])
                    .sum()
            })
            .collect();
        (diag, rank)
    }

    fn random_two_way(seed: u64, n_persons: usize, n_firms: usize, periods: usize, noise: f64) -> Panel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nrm = Normal::new(0.0, 1.0).unwrap();
        let psi: Vec<f64> = (0..n_firms).map(|_| 0.5 * nrm.sample(&mut rng)).collect();
        let mut rows = Vec::new();
        for p in 0..n_persons {
            let theta = 0.5 * nrm.sample(&mut rng);
            let f1 = p % n_firms;
            let f2 = if rng.random::<f64>() < 0.6 { (p + 1 + rng.random_range(0..n_firms - 1)) % n_firms } else { f1 };
            for t in 0..periods {
                let f = if t < periods / 2 { f1 } else { f2 };
                let y = theta + psi[f] + noise * nrm.sample(&mut rng);
                rows.push(obs(p, f, t as i64, y));
            }
        }
        Panel::from_observations(rows, vec![]).unwrap()
    }

    #[test]
    fn cycle_leverages_match_hat_matrix() {
        let p = cycle([1.0, 2.0, 4.0, 3.5]);
        let data = LeaveOutData::new(&p, Variant::Obs);
        let solver = TwoWaySolver::new(&data).unwrap();
        let lev = leverages_exact(&data, &solver);
        let (hat, rank) = hat_diagonal(&dense_design(&p));
        for (a, b) in lev.p_unit.iter().zip(&hat) {
            assert!((a - b).abs() <= 1e-10);
        }
        assert!((lev.summary().sum - rank as f64).abs() < 1e-10);
        assert!((lev.p_unit[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn cycle_sigma_matches_leave_one_out_refit() {
        let p = cycle([1.0, 2.0, 4.0, 3.5]);
        let data = LeaveOutData::new(&p, Variant::Obs);
        let solver = TwoWaySolver::new(&data).unwrap();
        let fit = fit_dummies(&data, &solver);
        let lev = leverages_exact(&data, &solver);
        let sig = sigma_i_leave_out(&data, &fit, &lev);
        let a = dense_design(&p);
        let ybar = p.mean_y();
        for i in 0..p.n_obs() {
            let rows: Vec<usize> = (0..p.n_obs()).filter(|&r| r != i).collect();
            let a_i = a.select_rows(&rows);
            let y_i = DVector::from_iterator(rows.len(), rows.iter().map(|&r| p.y()[r]));
            let coef = a_i.svd(true, true).solve(&y_i, 1e-10).unwrap();
            let pred = (a.row(i) * coef)[(0, 0)];
            let oracle = (p.y()[i] - ybar) * (p.y()[i] - pred);
            assert!((sig[i].unwrap() - oracle).abs() <= 1e-10, "{:?} vs {oracle}", sig[i]);
        }
    }

    #[test]
    fn exact_fit_gives_zero_sigma_and_no_correction() {
        // Additive outcome without noise.
        let p = Panel::from_observations(
            vec![
                obs(1, 1, 0, 1.0 + 0.5),
                obs(1, 2, 1, 1.0 - 0.2),
                obs(2, 1, 0, -0.3 + 0.5),
                obs(2, 2, 1, -0.3 - 0.2),
                obs(3, 1, 0, 0.1 + 0.5),
                obs(3, 2, 1, 0.1 - 0.2),
            ],
            vec![],
        )
        .unwrap();
        let data = LeaveOutData::new(&p, Variant::Obs);
        let solver = TwoWaySolver::new(&data).unwrap();
        let fit = fit_dummies(&data, &solver);
        let lev = leverages_exact(&data, &solver);
        for s in sigma_i_leave_out(&data, &fit, &lev) {
            assert!(s.unwrap().abs() < 1e-14);
        }
        let est = correct_variance_components(&data, &fit, &lev, 1.0);
        assert!((est.var_person - est.plugin.var_person).abs() < 1e-14);
        assert!((est.var_firm - est.plugin.var_firm).abs() < 1e-14);
        assert!((est.var_firm - 0.1225).abs() < 1e-12);
    }

    #[test]
    fn collapse_arithmetic() {
        let rows = vec![
            obs(1, 1, 0, 1.0),
            obs(1, 1, 1, 3.0),
            obs(1, 2, 2, 5.0),
            obs(2, 1, 0, 2.0),
            obs(2, 2, 1, 0.0),
            obs(2, 2, 2, 4.0),
        ];
        let p = Panel::from_observations(rows, vec![]).unwrap();
        let c = collapse_to_matches(&p).unwrap();
        assert_eq!(c.n_matches(), 4);
        assert_eq!(c.unit_y, vec![2.0, 5.0, 2.0, 2.0]);
        assert_eq!(c.unit_w, vec![2.0, 1.0, 1.0, 2.0]);
        assert_eq!(c.n_obs, 6);
    }

    #[test]
    fn star_has_no_match_leave_out_set() {
        let p = Panel::from_observations(vec![obs(1, 1, 0, 1.0), obs(2, 1, 0, 2.0), obs(3, 1, 0, 3.0)], vec![]).unwrap();
        assert!(matches!(collapse_to_matches(&p), Err(KssError::EmptyLeaveOutSet)));
        assert_eq!(KssError::EmptyLeaveOutSet.to_string(), "empty leave-out connected set; try the observation variant");
    }

    #[test]
    fn match_leverage_equals_weighted_match_hat() {
        let p = random_two_way(5, 20, 4, 4, 0.3);
        let restricted = restrict_leave_out(&p, Variant::Match).unwrap();
        let data = LeaveOutData::new(&restricted, Variant::Match);
        let solver = TwoWaySolver::new(&data).unwrap();
        let lev = leverages_exact(&data, &solver);
        // Weighted match-level design W^{1/2} [1 D F].
        let (np, nf) = (data.n_p, data.n_f);
        let a = DMatrix::from_fn(data.n_matches(), 1 + np + nf, |m, j| {
            let w = data.match_weight[m].sqrt();
            w * if j == 0 {
                1.0
            } else if j <= np {
                (data.match_person[m] == j - 1) as u8 as f64
            } else {
                (data.match_firm[m] == j - 1 - np) as u8 as f64
            }
        });
        let (hat, rank) = hat_diagonal(&a);
        for (x, y) in lev.p_unit.iter().zip(&hat) {
            assert!((x - y).abs() <= 1e-10);
        }
        assert!((lev.summary().sum - rank as f64).abs() < 1e-6);
        assert_eq!(rank, np + nf - 1);
    }

    #[test]
    fn pipeline_rejects_bad_beta() {
        let p = random_two_way(1, 10, 3, 4, 0.3);
        assert!(matches!(
            kss_estimate(&p, &[1.0], Variant::Obs, LeverageMethod::Exact),
            Err(KssError::BetaLength { .. })
        ));
    }

    #[test]
    fn sketch_converges_to_exact() {
        let p = random_two_way(9, 60, 6, 4, 0.3);
        let data = LeaveOutData::new(&restrict_leave_out(&p, Variant::Obs).unwrap(), Variant::Obs);
        let solver = TwoWaySolver::new(&data).unwrap();
        let exact = leverages_exact(&data, &solver);
        let err = |k: usize| {
            let s = leverages_sketch(&data, &solver, k, 77).unwrap();
            s.h_match.iter().zip(&exact.h_match).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let (e50, e2000) = (err(50), err(2000));
        assert!(e2000 < e50, "{e2000} !< {e50}");
        assert!(e2000 <= 0.02);
        let s = leverages_sketch(&data, &solver, 2000, 5).unwrap();
        for m in 0..data.n_matches() {
            assert!((s.b_person[m] - exact.b_person[m]).abs() <= 0.1 * exact.b_person[m].abs() + 1e-3);
        }
        assert!(leverages_sketch(&data, &solver, 0, 1).is_err());
    }

    #[test]
    fn quadratic_weights_match_dense_oracle() {
        let p = random_two_way(3, 15, 4, 4, 0.3);
        let data = LeaveOutData::new(&restrict_leave_out(&p, Variant::Obs).unwrap(), Variant::Obs);
        let solver = TwoWaySolver::new(&data).unwrap();
        let lev = leverages_exact(&data, &solver);
        // Dense: S, A_pp over observations, B = x S⁻¹ A S⁻¹ x.
        let d = data.dim();
        let n = data.n_obs;
        let x = DMatrix::from_fn(n, d, |i, j| {
            let m = data.unit_match[i];
            let in_p = j == data.match_person[m];
            let in_f = data.firm_col(data.match_firm[m]) == Some(j);
            (in_p || in_f) as u8 as f64
        });
        let s_inv = (x.transpose() * &x).try_inverse().unwrap();
        let centre = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
        let dp = DMatrix::from_fn(n, d, |i, j| if j < data.n_p { x[(i, j)] } else { 0.0 });
        let app = dp.transpose() * &centre * &dp / n as f64;
        for m in 0..data.n_matches() {
            let u = data.unit_match.iter().position(|&v| v == m).unwrap();
            let row = x.row(u).transpose();
            let b = (row.transpose() * &s_inv * &app * &s_inv * &row)[(0, 0)];
            assert!((b - lev.b_person[m]).abs() < 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn leverages_match_hat_and_rank(seed in any::<u64>(), np in 4usize..25, nf in 2usize..6) {
            let p = random_two_way(seed, np, nf, 2, 0.3);
            prop_assume!(restrict_leave_out(&p, Variant::Obs).is_ok());
            let r = restrict_leave_out(&p, Variant::Obs).unwrap();
            let data = LeaveOutData::new(&r, Variant::Obs);
            let solver = TwoWaySolver::new(&data).unwrap();
            let lev = leverages_exact(&data, &solver);
            let (hat, rank) = hat_diagonal(&dense_design(&r));
            for (a, b) in lev.p_unit.iter().zip(&hat) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
            prop_assert!((lev.summary().sum - rank as f64).abs() <= 1e-6);
            prop_assert!(lev.p_unit.iter().all(|v| *v >= 0.0 && *v <= 1.0 + 1e-10));
        }
    }
}
