//! Variance decompositions of the outcome into covariate, person, firm and
//! residual parts. All moments are observation-weighted population moments.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fe::FeEstimate;
use crate::me::MeEstimate;
use crate::panel::Panel;

#[derive(Debug, Error, PartialEq)]
pub enum DecompError {
    #[error("estimate does not match panel: {0}")]
    Dimension(String),
}

/// Additive pieces of a fitted two-way model, however estimated.
#[derive(Debug, Clone, PartialEq)]
pub struct Effects {
    pub intercept: f64,
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    pub beta: Vec<f64>,
}

impl From<&FeEstimate> for Effects {
    fn from(e: &FeEstimate) -> Self {
        Self {
            intercept: e.intercept,
            theta: e.theta.clone(),
            psi: e.psi.clone(),
            beta: e.beta.clone(),
        }
    }
}

impl From<&MeEstimate> for Effects {
    fn from(e: &MeEstimate) -> Self {
        Self {
            intercept: e.intercept,
            theta: e.modes_p.clone(),
            psi: e.modes_f.clone(),
            beta: e.beta.clone(),
        }
    }
}

impl Effects {
    fn check(&self, panel: &Panel) -> Result<(), DecompError> {
        let mismatch = |what: &str, got: usize, want: usize| {
            Err(DecompError::Dimension(format!("{what}: estimate has {got}, panel has {want}")))
        };
        if self.theta.len() != panel.n_persons() {
            return mismatch("persons", self.theta.len(), panel.n_persons());
        }
        if self.psi.len() != panel.n_firms() {
            return mismatch("firms", self.psi.len(), panel.n_firms());
        }
        if self.beta.len() != panel.k() {
            return mismatch("covariates", self.beta.len(), panel.k());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64
}

fn mean_sd(v: &[f64]) -> MeanSd {
    MeanSd {
        mean: mean(v),
        sd: cov(v, v).sqrt(),
    }
}

fn corr(c: f64, va: f64, vb: f64) -> f64 {
    if va > 0.0 && vb > 0.0 {
        c / (va * vb).sqrt()
    } else {
        f64::NAN
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompTable {
    pub n_obs: usize,
    pub y: MeanSd,
    pub xb: MeanSd,
    /// `y − xβ`.
    pub composite: MeanSd,
    pub residual: MeanSd,
    pub person: MeanSd,
    pub firm: MeanSd,
    pub corr_pf: f64,
    pub var_y: f64,
    pub var_xb: f64,
    pub var_person: f64,
    pub var_firm: f64,
    pub cov_pf: f64,
    /// `Var(θ) + Var(ψ) + 2 Cov(θ, ψ)`.
    pub combined: f64,
    pub var_residual: f64,
    /// Remainder of the identity.
    pub other_cov: f64,
    /// The same remainder from its covariance terms.
    pub other_cov_direct: f64,
    pub total: f64,
    pub share: f64,
}

impl DecompTable {
    /// Relative gap between `Var(y)` and the directly computed row sum.
    pub fn identity_error(&self) -> f64 {
        let rows = self.var_xb + self.combined + self.var_residual + self.other_cov_direct;
        (rows - self.var_y).abs() / self.var_y.abs().max(f64::MIN_POSITIVE)
    }

    /// `(label, value)` rows in display order.
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("mean_y", self.y.mean),
            ("sd_y", self.y.sd),
            ("mean_xb", self.xb.mean),
            ("sd_xb", self.xb.sd),
            ("mean_y_minus_xb", self.composite.mean),
            ("sd_y_minus_xb", self.composite.sd),
            ("mean_person", self.person.mean),
            ("sd_person", self.person.sd),
            ("mean_firm", self.firm.mean),
            ("sd_firm", self.firm.sd),
            ("corr_person_firm", self.corr_pf),
            ("mean_residual", self.residual.mean),
            ("sd_residual", self.residual.sd),
            ("var_y", self.var_y),
            ("var_xb", self.var_xb),
            ("var_person_plus_firm", self.combined),
            ("var_residual", self.var_residual),
            ("other_covariances", self.other_cov),
            ("total", self.total),
            ("share_person_plus_firm", self.share),
        ]
    }
}

/// Table of means, SDs and variance rows for a fit on `panel`.
pub fn components_table(panel: &Panel, est: &Effects) -> Result<DecompTable, DecompError> {
    est.check(panel)?;
    if panel.is_empty() {
        return Err(DecompError::Dimension("empty panel".into()));
    }
    let n = panel.n_obs();
    let y = panel.y();
    let xb: Vec<f64> = (0..n)
        .map(|i| panel.x_row(i).iter().zip(&est.beta).map(|(x, b)| x * b).sum())
        .collect();
    let th: Vec<f64> = panel.persons().iter().map(|&p| est.theta[p]).collect();
    let ps: Vec<f64> = panel.firms().iter().map(|&f| est.psi[f]).collect();
    let composite: Vec<f64> = (0..n).map(|i| y[i] - xb[i]).collect();
    let residual: Vec<f64> = (0..n).map(|i| composite[i] - est.intercept - th[i] - ps[i]).collect();
    let pf: Vec<f64> = (0..n).map(|i| th[i] + ps[i]).collect();

    let var_y = cov(y, y);
    let var_xb = cov(&xb, &xb);
    let var_person = cov(&th, &th);
    let var_firm = cov(&ps, &ps);
    let cov_pf = cov(&th, &ps);
    let combined = var_person + var_firm + 2.0 * cov_pf;
    let var_residual = cov(&residual, &residual);
    let other_cov = var_y - var_xb - combined - var_residual;
    let other_cov_direct = 2.0 * (cov(&xb, &pf) + cov(&pf, &residual) + cov(&xb, &residual));
    Ok(DecompTable {
        n_obs: n,
        y: mean_sd(y),
        xb: mean_sd(&xb),
        composite: mean_sd(&composite),
        residual: mean_sd(&residual),
        person: mean_sd(&th),
        firm: mean_sd(&ps),
        corr_pf: corr(cov_pf, var_person, var_firm),
        var_y,
        var_xb,
        var_person,
        var_firm,
        cov_pf,
        combined,
        var_residual,
        other_cov,
        other_cov_direct,
        total: var_xb + combined + var_residual + other_cov,
        share: combined / var_y,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PluginCovariance {
    pub var_person: f64,
    pub var_firm: f64,
    pub cov_pf: f64,
    /// `NaN` when either effect has zero variance.
    pub corr_pf: f64,
    pub share: f64,
}

/// Second moments of the effect assignments over observations.
pub fn plugin_covariance(panel: &Panel, est: &Effects) -> Result<PluginCovariance, DecompError> {
    est.check(panel)?;
    if panel.is_empty() {
        return Err(DecompError::Dimension("empty panel".into()));
    }
    let th: Vec<f64> = panel.persons().iter().map(|&p| est.theta[p]).collect();
    let ps: Vec<f64> = panel.firms().iter().map(|&f| est.psi[f]).collect();
    let (vp, vf, c) = (cov(&th, &th), cov(&ps, &ps), cov(&th, &ps));
    Ok(PluginCovariance {
        var_person: vp,
        var_firm: vf,
        cov_pf: c,
        corr_pf: corr(c, vp, vf),
        share: (vp + vf + 2.0 * c) / cov(panel.y(), panel.y()),
    })
}

/// Writes `row,value` with values at four significant digits.
pub fn write_table3<W: std::io::Write>(table: &DecompTable, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row", "value"])?;
    for (label, v) in table.rows() {
        w.write_record([label.to_string(), crate::sim::sig4(v)])?;
    }
    w.flush()?;
    Ok(())
}
