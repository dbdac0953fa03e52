//! Simulated linked panels and the estimator-comparison study.
//!
//! Each person draws a person component and two correlated firm components.
//! All `2n` firm draws are cut into `n_firms` equal-count bins; a bin is a
//! firm and its effect is the mean of the draws that fall in it. The first
//! half of a person's periods is spent at the bin of the first draw, the
//! second half at the bin of the second.
//!
//! Random numbers come from per-person streams keyed by `(seed, rep, person)`
//! only, so cells that differ in `rho` or `periods` share their draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fe::fit_akm;
use crate::graph::largest_component;
use crate::kss::{kss_estimate, LeverageMethod, Variant};
use crate::me::{fit_ml, MlConfig};
use crate::panel::{Observation, Panel};
use crate::solver::CgConfig;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_persons: usize,
    pub n_firms: usize,
    pub periods: usize,
    pub rho: f64,
    pub sigma_p: f64,
    pub sigma_f: f64,
    pub sigma_e: f64,
    pub exp_lambda: f64,
    pub exp_max: u32,
    pub base: f64,
    /// Coefficients of experience to the powers 1..=4.
    pub exp_coefs: [f64; 4],
    pub n_reps: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_persons: 2000,
            n_firms: 40,
            periods: 6,
            rho: 0.0,
            sigma_p: 0.26,
            sigma_f: 0.25,
            sigma_e: 0.39,
            exp_lambda: 4.0,
            exp_max: 24,
            base: 10.0,
            exp_coefs: [0.06, -3.0e-3, 8.0e-5, -9.0e-7],
            n_reps: 25,
            seed: 20230517,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(self.rho * self.rho < 1.0) || !self.rho.is_finite() {
            return bad("rho must satisfy rho^2 < 1");
        }
        if self.periods < 2 || self.periods % 2 != 0 {
            return bad("periods must be even and at least 2");
        }
        if !(self.sigma_p > 0.0 && self.sigma_f > 0.0 && self.sigma_e > 0.0) {
            return bad("standard deviations must be positive");
        }
        if self.n_persons == 0 || self.n_firms == 0 || 2 * self.n_persons < self.n_firms {
            return bad("need n_firms >= 1 and 2 * n_persons >= n_firms");
        }
        if !(self.exp_lambda > 0.0) {
            return bad("exp_lambda must be positive");
        }
        if self.n_reps == 0 {
            return bad("n_reps must be at least 1");
        }
        Ok(())
    }

    pub fn experience_effect(&self, exp: f64) -> f64 {
        let c = &self.exp_coefs;
        exp * (c[0] + exp * (c[1] + exp * (c[2] + exp * c[3])))
    }
}

/// Generating values, indexed like the panel's dense indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    /// Experience profile value per observation.
    pub experience_effect: Vec<f64>,
    /// Draws per bin, in bin order.
    pub bin_sizes: Vec<usize>,
    pub movers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPanel {
    pub panel: Panel,
    pub truth: SimTruth,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const ATTRIBUTES: u64 = 1;
const NOISE: u64 = 2;

fn person_rng(seed: u64, rep: usize, person: usize, stream: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(splitmix(splitmix(seed) ^ rep as u64) ^ person as u64) ^ stream);
    ChaCha8Rng::seed_from_u64(key)
}

struct PersonDraws {
    earn_p: f64,
    z: [f64; 2],
    exp0: f64,
}

fn draw_person(cfg: &SimConfig, rep: usize, person: usize) -> PersonDraws {
    let mut rng = person_rng(cfg.seed, rep, person, ATTRIBUTES);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let pois = Poisson::new(cfg.exp_lambda).expect("positive rate");
    let earn_p = cfg.sigma_p * std.sample(&mut rng);
    let z = [std.sample(&mut rng), std.sample(&mut rng)];
    let exp0 = loop {
        let v: f64 = pois.sample(&mut rng);
        if v <= cfg.exp_max as f64 {
            break v;
        }
    };
    PersonDraws { earn_p, z, exp0 }
}

/// One replication; identical `(cfg, rep)` give bit-identical panels.
pub fn generate(cfg: &SimConfig, rep: usize) -> Result<SimulatedPanel, SimError> {
    cfg.validate()?;
    let n = cfg.n_persons;
    let people: Vec<PersonDraws> = (0..n).map(|i| draw_person(cfg, rep, i)).collect();
    let scale = cfg.rho * cfg.sigma_f / cfg.sigma_p;
    let resid = (1.0 - cfg.rho * cfg.rho).sqrt() * cfg.sigma_f;
    let draws: Vec<f64> = people
        .iter()
        .flat_map(|d| [scale * d.earn_p + resid * d.z[0], scale * d.earn_p + resid * d.z[1]])
        .collect();
    let mut order: Vec<usize> = (0..2 * n).collect();
    order.sort_by(|&a, &b| draws[a].total_cmp(&draws[b]).then(a.cmp(&b)));
    let mut bin = vec![0usize; 2 * n];
    let mut bin_sizes = vec![0usize; cfg.n_firms];
    let mut bin_sum = vec![0.0; cfg.n_firms];
    for (rank, &d) in order.iter().enumerate() {
        let b = rank * cfg.n_firms / (2 * n);
        bin[d] = b;
        bin_sizes[b] += 1;
        bin_sum[b] += draws[d];
    }
    let bin_effect: Vec<f64> = bin_sum.iter().zip(&bin_sizes).map(|(s, c)| s / *c as f64).collect();

    let half = cfg.periods / 2;
    let noise = Normal::new(0.0, cfg.sigma_e).expect("positive sd");
    let mut rows = Vec::with_capacity(n * cfg.periods);
    let mut experience_effect = Vec::with_capacity(n * cfg.periods);
    let mut movers = 0;
    for (i, d) in people.iter().enumerate() {
        let mut rng = person_rng(cfg.seed, rep, i, NOISE);
        let spells = [bin[2 * i], bin[2 * i + 1]];
        if spells[0] != spells[1] {
            movers += 1;
        }
        for t in 0..cfg.periods {
            let b = spells[usize::from(t >= half)];
            let exp = d.exp0 + t as f64;
            let g = cfg.experience_effect(exp);
            let y = cfg.base + d.earn_p + bin_effect[b] + g + noise.sample(&mut rng);
            rows.push(Observation {
                person: format!("p{i}"),
                firm: format!("f{b}"),
                period: t as i64,
                y,
                x: vec![exp, exp.powi(2), exp.powi(3), exp.powi(4)],
            });
            experience_effect.push(g);
        }
    }
    let names = (1..=4).map(|k| format!("exp{k}")).collect();
    let panel = Panel::from_observations(rows, names).expect("generated panel is valid");
    let theta = people.iter().map(|d| d.earn_p).collect();
    let psi = panel
        .firm_labels()
        .iter()
        .map(|l| bin_effect[l[1..].parse::<usize>().expect("generated label")])
        .collect();
    Ok(SimulatedPanel {
        panel,
        truth: SimTruth {
            theta,
            psi,
            experience_effect,
            bin_sizes,
            movers,
        },
    })
}

/// Observation-weighted population moments of effect assignments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectMoments {
    pub var_person: f64,
    pub var_firm: f64,
    pub cov_pf: f64,
}

impl EffectMoments {
    pub fn from_effects(panel: &Panel, theta: &[f64], psi: &[f64]) -> Self {
        let n = panel.n_obs() as f64;
        let tp: Vec<f64> = panel.persons().iter().map(|&p| theta[p]).collect();
        let tf: Vec<f64> = panel.firms().iter().map(|&f| psi[f]).collect();
        let mp = tp.iter().sum::<f64>() / n;
        let mf = tf.iter().sum::<f64>() / n;
        let mut out = Self {
            var_person: 0.0,
            var_firm: 0.0,
            cov_pf: 0.0,
        };
        for (a, b) in tp.iter().zip(&tf) {
            out.var_person += (a - mp).powi(2) / n;
            out.var_firm += (b - mf).powi(2) / n;
            out.cov_pf += (a - mp) * (b - mf) / n;
        }
        out
    }

    pub fn sd_person(&self) -> f64 {
        self.var_person.sqrt()
    }

    pub fn sd_firm(&self) -> f64 {
        self.var_firm.sqrt()
    }

    pub fn corr(&self) -> f64 {
        if self.var_person > 0.0 && self.var_firm > 0.0 {
            self.cov_pf / (self.var_person * self.var_firm).sqrt()
        } else {
            f64::NAN
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthReport {
    pub sd_person: f64,
    pub sd_firm: f64,
    pub corr: f64,
    pub var_person: f64,
    pub var_firm: f64,
    pub cov_pf: f64,
    pub mover_share: f64,
    pub firms_realized: usize,
}

pub fn truth_report(sp: &SimulatedPanel) -> TruthReport {
    let m = EffectMoments::from_effects(&sp.panel, &sp.truth.theta, &sp.truth.psi);
    TruthReport {
        sd_person: m.sd_person(),
        sd_firm: m.sd_firm(),
        corr: m.corr(),
        var_person: m.var_person,
        var_firm: m.var_firm,
        cov_pf: m.cov_pf,
        mover_share: sp.truth.movers as f64 / sp.panel.n_persons() as f64,
        firms_realized: sp.panel.n_firms(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    FixedEffects,
    MixedEffects,
    KssMatch,
    KssObs,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [
        Estimator::FixedEffects,
        Estimator::MixedEffects,
        Estimator::KssMatch,
        Estimator::KssObs,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Estimator::FixedEffects => "fe-plugin",
            Estimator::MixedEffects => "me-plugin",
            Estimator::KssMatch => "kss-match",
            Estimator::KssObs => "kss-obs",
        }
    }
}

/// One estimator's output in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub moments: EffectMoments,
    /// Plug-in moments on the estimator's own sample (KSS variants), or the
    /// fitted variance components as `(σ_p², σ_f², 0)` (mixed effects).
    pub reference: Option<EffectMoments>,
    /// Realized truth on the estimator's sample.
    pub truth: EffectMoments,
    /// Mean leave-out variance estimate per observation (KSS variants).
    pub mean_sigma2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepResult {
    pub rho: f64,
    pub periods: usize,
    pub rep: usize,
    pub truth: TruthReport,
    /// In `Estimator::ALL` order; `Err` holds the failure message.
    pub estimates: Vec<Result<EstimatorResult, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub base: SimConfig,
    pub rhos: Vec<f64>,
    pub periods: Vec<usize>,
    pub leverage: LeverageMethod,
    pub ml: MlConfig,
    pub cg: CgConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            base: SimConfig::default(),
            rhos: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            periods: vec![6, 12, 24],
            leverage: LeverageMethod::Exact,
            ml: MlConfig::default(),
            cg: CgConfig::default(),
        }
    }
}

fn truth_on(panel: &Panel, full: &Panel, truth: &SimTruth) -> EffectMoments {
    let pos = |labels: &[String], lab: &str| labels.iter().position(|l| l == lab).expect("label present");
    let theta: Vec<f64> = panel
        .person_labels()
        .iter()
        .map(|l| truth.theta[pos(full.person_labels(), l)])
        .collect();
    let psi: Vec<f64> = panel
        .firm_labels()
        .iter()
        .map(|l| truth.psi[pos(full.firm_labels(), l)])
        .collect();
    EffectMoments::from_effects(panel, &theta, &psi)
}

/// Fits every estimator on one simulated panel.
pub fn run_replication(cfg: &StudyConfig, sim: &SimConfig, rep: usize) -> Result<RepResult, SimError> {
    let sp = generate(sim, rep)?;
    let truth = truth_report(&sp);
    let panel = largest_component(&sp.panel);
    let full_truth = truth_on(&panel, &sp.panel, &sp.truth);
    let fe = fit_akm(&panel, true, &cfg.cg).map_err(|e| e.to_string());
    let fe_res = fe.as_ref().map_err(Clone::clone).map(|fe| EstimatorResult {
        moments: EffectMoments::from_effects(&panel, &fe.theta, &fe.psi),
        reference: None,
        truth: full_truth,
        mean_sigma2: None,
    });
    let me_res = fit_ml(&panel, &cfg.ml).map_err(|e| e.to_string()).map(|me| EstimatorResult {
        moments: EffectMoments::from_effects(&panel, &me.modes_p, &me.modes_f),
        reference: Some(EffectMoments {
            var_person: me.vc.sigma_p2,
            var_firm: me.vc.sigma_f2,
            cov_pf: 0.0,
        }),
        truth: full_truth,
        mean_sigma2: None,
    });
    let kss = |variant: Variant| -> Result<EstimatorResult, String> {
        let fe = fe.as_ref().map_err(Clone::clone)?;
        let (est, _, _) = kss_estimate(&panel, &fe.beta, variant, cfg.leverage).map_err(|e| e.to_string())?;
        let restricted = crate::kss::restrict_leave_out(&panel, variant).map_err(|e| e.to_string())?;
        Ok(EstimatorResult {
            moments: EffectMoments {
                var_person: est.var_person,
                var_firm: est.var_firm,
                cov_pf: est.cov_pf,
            },
            reference: Some(EffectMoments {
                var_person: est.plugin.var_person,
                var_firm: est.plugin.var_firm,
                cov_pf: est.plugin.cov_pf,
            }),
            truth: truth_on(&restricted, &sp.panel, &sp.truth),
            mean_sigma2: Some(est.mean_sigma2),
        })
    };
    let estimates = vec![fe_res, me_res, kss(Variant::Match), kss(Variant::Obs)];
    Ok(RepResult {
        rho: sim.rho,
        periods: sim.periods,
        rep,
        truth,
        estimates,
    })
}

/// Medians over successful replications of one cell for one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub estimator: Estimator,
    pub periods: usize,
    pub rho: f64,
    pub sd_person: f64,
    pub sd_firm: f64,
    pub corr: f64,
    pub n_success: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub config: StudyConfig,
    pub reps: Vec<RepResult>,
    pub cells: Vec<CellSummary>,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn finite_median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
    median(&mut v)
}

/// Runs every `(rho, periods, rep)` job concurrently and summarizes each cell.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult, SimError> {
    cfg.base.validate()?;
    let mut jobs = Vec::new();
    for &periods in &cfg.periods {
        for &rho in &cfg.rhos {
            let sim = SimConfig {
                rho,
                periods,
                ..cfg.base.clone()
            };
            sim.validate()?;
            for rep in 0..cfg.base.n_reps {
                jobs.push((sim.clone(), rep));
            }
        }
    }
    let reps: Vec<RepResult> = jobs
        .par_iter()
        .map(|(sim, rep)| run_replication(cfg, sim, *rep))
        .collect::<Result<_, _>>()?;
    let mut cells = Vec::new();
    for (e_idx, &estimator) in Estimator::ALL.iter().enumerate() {
        for &periods in &cfg.periods {
            for &rho in &cfg.rhos {
                let in_cell: Vec<&RepResult> =
                    reps.iter().filter(|r| r.periods == periods && r.rho == rho).collect();
                let ok: Vec<&EstimatorResult> =
                    in_cell.iter().filter_map(|r| r.estimates[e_idx].as_ref().ok()).collect();
                cells.push(CellSummary {
                    estimator,
                    periods,
                    rho,
                    sd_person: finite_median(ok.iter().map(|e| e.moments.sd_person())),
                    sd_firm: finite_median(ok.iter().map(|e| e.moments.sd_firm())),
                    corr: finite_median(ok.iter().map(|e| e.moments.corr())),
                    n_success: ok.len(),
                    n_failed: in_cell.len() - ok.len(),
                });
            }
        }
    }
    Ok(StudyResult {
        config: cfg.clone(),
        reps,
        cells,
    })
}

impl StudyResult {
    pub fn cell(&self, estimator: Estimator, periods: usize, rho: f64) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.estimator == estimator && c.periods == periods && c.rho == rho)
    }
}

/// Four significant digits, the precision of human-readable tables.
pub fn sig4(v: f64) -> String {
    if !v.is_finite() {
        return "NA".to_string();
    }
    if v == 0.0 {
        return "0".to_string();
    }
    let digits = (3 - v.abs().log10().floor() as i32).max(0) as usize;
    format!("{v:.digits$}")
}

/// Table layout: one row per estimator, periods and rho.
pub fn write_table5<W: std::io::Write>(result: &StudyResult, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "estimator",
        "periods",
        "rho",
        "person_sd",
        "firm_sd",
        "corr",
        "n_success",
        "n_failed",
        "single_draw",
    ])?;
    for c in &result.cells {
        w.write_record([
            c.estimator.label().to_string(),
            c.periods.to_string(),
            format!("{:.1}", c.rho),
            sig4(c.sd_person),
            sig4(c.sd_firm),
            sig4(c.corr),
            c.n_success.to_string(),
            c.n_failed.to_string(),
            (c.n_success == 1).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
