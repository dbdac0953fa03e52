//! Job-year panel ingestion, sample-construction filters and dense reindexing.
//!
//! A [`Panel`] stores observations column-wise. Persons and firms are mapped to
//! dense indices `0..n_p` and `0..n_f` in order of first appearance, so every
//! subset operation that preserves row order also preserves relative index order.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("line {line}: cannot parse column `{column}` value {value:?}")]
    Parse {
        line: usize,
        column: String,
        value: String,
    },
    #[error("line {line}: non-finite value in column `{column}`")]
    NonFinite { line: usize, column: String },
    #[error("duplicate (person, firm, period) key ({person}, {firm}, {period})")]
    DuplicateKey {
        person: String,
        firm: String,
        period: i64,
    },
    #[error("observation has {got} covariates, panel expects {expected}")]
    CovariateCount { expected: usize, got: usize },
    #[error("outcome vector has length {got}, panel has {expected} observations")]
    OutcomeLength { expected: usize, got: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// One job-year record.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub person: String,
    pub firm: String,
    pub period: i64,
    pub y: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    person_labels: Vec<String>,
    firm_labels: Vec<String>,
    covariate_names: Vec<String>,
    person: Vec<usize>,
    firm: Vec<usize>,
    period: Vec<i64>,
    y: Vec<f64>,
    /// Row-major `n_obs × k`.
    x: Vec<f64>,
}

/// Column mapping for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub person: String,
    pub firm: String,
    pub period: String,
    pub y: String,
    pub covariates: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            person: "person".into(),
            firm: "firm".into(),
            period: "period".into(),
            y: "y".into(),
            covariates: Vec::new(),
        }
    }
}

impl Schema {
    pub fn with_covariates(covariates: Vec<String>) -> Self {
        Self {
            covariates,
            ..Self::default()
        }
    }
}

/// One distinct person-firm pair and its observation count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Match {
    pub person: usize,
    pub firm: usize,
    pub n_obs: usize,
}

/// Matches in order of first appearance plus the match id of every observation.
#[derive(Debug, Clone)]
pub struct MatchIndex {
    pub matches: Vec<Match>,
    pub obs_match: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelSummary {
    pub n_obs: usize,
    pub n_jobs: usize,
    pub n_persons: usize,
    pub n_firms: usize,
}

impl Panel {
    /// Builds a panel, assigning dense indices in order of first appearance.
    pub fn from_observations(
        observations: Vec<Observation>,
        covariate_names: Vec<String>,
    ) -> Result<Self, PanelError> {
        let k = covariate_names.len();
        let n = observations.len();
        let mut person_ix: HashMap<String, usize> = HashMap::new();
        let mut firm_ix: HashMap<String, usize> = HashMap::new();
        let mut panel = Panel {
            person_labels: Vec::new(),
            firm_labels: Vec::new(),
            covariate_names,
            person: Vec::with_capacity(n),
            firm: Vec::with_capacity(n),
            period: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
            x: Vec::with_capacity(n * k),
        };
        let mut keys: HashSet<(usize, usize, i64)> = HashSet::with_capacity(n);
        for (row, obs) in observations.into_iter().enumerate() {
            if obs.x.len() != k {
                return Err(PanelError::CovariateCount {
                    expected: k,
                    got: obs.x.len(),
                });
            }
            if !obs.y.is_finite() {
                return Err(PanelError::NonFinite {
                    line: row + 1,
                    column: "y".into(),
                });
            }
            if let Some(c) = obs.x.iter().position(|v| !v.is_finite()) {
                return Err(PanelError::NonFinite {
                    line: row + 1,
                    column: panel.covariate_names[c].clone(),
                });
            }
            let p = *person_ix.entry(obs.person.clone()).or_insert_with(|| {
                panel.person_labels.push(obs.person.clone());
                panel.person_labels.len() - 1
            });
            let f = *firm_ix.entry(obs.firm.clone()).or_insert_with(|| {
                panel.firm_labels.push(obs.firm.clone());
                panel.firm_labels.len() - 1
            });
            if !keys.insert((p, f, obs.period)) {
                return Err(PanelError::DuplicateKey {
                    person: obs.person,
                    firm: obs.firm,
                    period: obs.period,
                });
            }
            panel.person.push(p);
            panel.firm.push(f);
            panel.period.push(obs.period);
            panel.y.push(obs.y);
            panel.x.extend_from_slice(&obs.x);
        }
        Ok(panel)
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_persons(&self) -> usize {
        self.person_labels.len()
    }

    pub fn n_firms(&self) -> usize {
        self.firm_labels.len()
    }

    /// Number of covariates `k`.
    pub fn k(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn person_labels(&self) -> &[String] {
        &self.person_labels
    }

    pub fn firm_labels(&self) -> &[String] {
        &self.firm_labels
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Dense person index of every observation.
    pub fn persons(&self) -> &[usize] {
        &self.person
    }

    /// Dense firm index of every observation.
    pub fn firms(&self) -> &[usize] {
        &self.firm
    }

    pub fn periods(&self) -> &[i64] {
        &self.period
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Row-major covariate block.
    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        let k = self.k();
        &self.x[i * k..(i + 1) * k]
    }

    pub fn observation(&self, i: usize) -> Observation {
        Observation {
            person: self.person_labels[self.person[i]].clone(),
            firm: self.firm_labels[self.firm[i]].clone(),
            period: self.period[i],
            y: self.y[i],
            x: self.x_row(i).to_vec(),
        }
    }

    pub fn observations(&self) -> impl Iterator<Item = Observation> + '_ {
        (0..self.n_obs()).map(|i| self.observation(i))
    }

    /// Observation count per person.
    pub fn person_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_persons()];
        for &p in &self.person {
            c[p] += 1;
        }
        c
    }

    /// Observation count per firm.
    pub fn firm_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_firms()];
        for &f in &self.firm {
            c[f] += 1;
        }
        c
    }

    pub fn match_index(&self) -> MatchIndex {
        let mut ids: HashMap<(usize, usize), usize> = HashMap::new();
        let mut matches: Vec<Match> = Vec::new();
        let mut obs_match = Vec::with_capacity(self.n_obs());
        for i in 0..self.n_obs() {
            let key = (self.person[i], self.firm[i]);
            let id = *ids.entry(key).or_insert_with(|| {
                matches.push(Match {
                    person: key.0,
                    firm: key.1,
                    n_obs: 0,
                });
                matches.len() - 1
            });
            matches[id].n_obs += 1;
            obs_match.push(id);
        }
        MatchIndex { matches, obs_match }
    }

    /// Same panel with a replaced outcome column.
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Self, PanelError> {
        if y.len() != self.n_obs() {
            return Err(PanelError::OutcomeLength {
                expected: self.n_obs(),
                got: y.len(),
            });
        }
        Ok(Self { y, ..self.clone() })
    }

    /// Same panel with the covariate block removed.
    pub fn without_covariates(&self) -> Self {
        Self {
            covariate_names: Vec::new(),
            x: Vec::new(),
            ..self.clone()
        }
    }

    /// Subpanel of the rows with `keep[i] == true`, densely reindexed in order
    /// of first appearance.
    pub fn subset(&self, keep: &[bool]) -> Self {
        assert_eq!(keep.len(), self.n_obs());
        let k = self.k();
        let mut p_map = vec![usize::MAX; self.n_persons()];
        let mut f_map = vec![usize::MAX; self.n_firms()];
        let mut out = Panel {
            person_labels: Vec::new(),
            firm_labels: Vec::new(),
            covariate_names: self.covariate_names.clone(),
            person: Vec::new(),
            firm: Vec::new(),
            period: Vec::new(),
            y: Vec::new(),
            x: Vec::new(),
        };
        for i in (0..self.n_obs()).filter(|&i| keep[i]) {
            let (p, f) = (self.person[i], self.firm[i]);
            if p_map[p] == usize::MAX {
                p_map[p] = out.person_labels.len();
                out.person_labels.push(self.person_labels[p].clone());
            }
            if f_map[f] == usize::MAX {
                f_map[f] = out.firm_labels.len();
                out.firm_labels.push(self.firm_labels[f].clone());
            }
            out.person.push(p_map[p]);
            out.firm.push(f_map[f]);
            out.period.push(self.period[i]);
            out.y.push(self.y[i]);
            out.x.extend_from_slice(&self.x[i * k..(i + 1) * k]);
        }
        out
    }

    /// Observation-weighted mean of `y`.
    pub fn mean_y(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.y.iter().sum::<f64>() / self.n_obs() as f64
    }
}

fn read_panel<R: Read>(reader: R, schema: &Schema) -> Result<Panel, PanelError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize, PanelError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PanelError::Schema(format!("missing column `{name}`")))
    };
    let ip = col(&schema.person)?;
    let ifm = col(&schema.firm)?;
    let it = col(&schema.period)?;
    let iy = col(&schema.y)?;
    let ix: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<_, _>>()?;

    let mut observations = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // Header is line 1.
        let line = row + 2;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let parse_f64 = |i: usize, name: &str| -> Result<f64, PanelError> {
            let raw = field(i);
            let v: f64 = raw.parse().map_err(|_| PanelError::Parse {
                line,
                column: name.to_string(),
                value: raw.to_string(),
            })?;
            if !v.is_finite() {
                return Err(PanelError::NonFinite {
                    line,
                    column: name.to_string(),
                });
            }
            Ok(v)
        };
        let period: i64 = field(it).parse().map_err(|_| PanelError::Parse {
            line,
            column: schema.period.clone(),
            value: field(it).to_string(),
        })?;
        let y = parse_f64(iy, &schema.y)?;
        let x = ix
            .iter()
            .zip(&schema.covariates)
            .map(|(&i, name)| parse_f64(i, name))
            .collect::<Result<Vec<_>, _>>()?;
        observations.push(Observation {
            person: field(ip).to_string(),
            firm: field(ifm).to_string(),
            period,
            y,
            x,
        });
    }
    Panel::from_observations(observations, schema.covariates.clone())
}

/// Reads a comma-delimited file with a header row. Row order is preserved.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Panel, PanelError> {
    read_panel(File::open(path)?, schema)
}

/// Parses CSV text already in memory.
pub fn parse_csv(text: &str, schema: &Schema) -> Result<Panel, PanelError> {
    read_panel(text.as_bytes(), schema)
}

/// Writes `person,firm,period,y,<covariates>` with shortest round-trip float formatting.
pub fn write_csv<W: Write>(panel: &Panel, out: W) -> Result<(), PanelError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["person".to_string(), "firm".into(), "period".into(), "y".into()];
    header.extend(panel.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..panel.n_obs() {
        let mut rec = vec![
            panel.person_labels[panel.person[i]].clone(),
            panel.firm_labels[panel.firm[i]].clone(),
            panel.period[i].to_string(),
            format!("{:?}", panel.y[i]),
        ];
        rec.extend(panel.x_row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Sample-construction thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Persons active in fewer distinct periods are dropped.
    pub min_active_years: usize,
    /// Persons with more distinct employers are dropped.
    pub max_total_jobs: usize,
    /// Firms with fewer distinct workers are dropped.
    pub min_firm_workers: usize,
    /// Persons earning less than this share (in levels) at firms meeting
    /// `min_firm_workers` are dropped.
    pub min_earnings_share_in_multiworker_firms: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_active_years: 1,
            max_total_jobs: 40,
            min_firm_workers: 2,
            min_earnings_share_in_multiworker_firms: 0.8,
        }
    }
}

impl FilterConfig {
    /// Thresholds that drop nothing.
    pub fn identity() -> Self {
        Self {
            min_active_years: 0,
            max_total_jobs: usize::MAX,
            min_firm_workers: 0,
            min_earnings_share_in_multiworker_firms: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), PanelError> {
        let s = self.min_earnings_share_in_multiworker_firms;
        if !(0.0..=1.0).contains(&s) {
            return Err(PanelError::Schema(format!("earnings share {s} outside [0,1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub panel: Panel,
    /// Number of passes that removed at least one observation.
    pub passes: usize,
}

/// One pass of the person and firm rules; returns rows to keep.
fn filter_pass(panel: &Panel, cfg: &FilterConfig) -> Vec<bool> {
    let np = panel.n_persons();
    let nf = panel.n_firms();
    let mut periods: Vec<HashSet<i64>> = vec![HashSet::new(); np];
    let mut employers: Vec<HashSet<usize>> = vec![HashSet::new(); np];
    let mut workers: Vec<HashSet<usize>> = vec![HashSet::new(); nf];
    for i in 0..panel.n_obs() {
        let (p, f) = (panel.person[i], panel.firm[i]);
        periods[p].insert(panel.period[i]);
        employers[p].insert(f);
        workers[f].insert(p);
    }
    let firm_ok: Vec<bool> = workers.iter().map(|w| w.len() >= cfg.min_firm_workers).collect();
    let mut earn_total = vec![0.0; np];
    let mut earn_multi = vec![0.0; np];
    for i in 0..panel.n_obs() {
        let p = panel.person[i];
        let level = panel.y[i].exp();
        earn_total[p] += level;
        if firm_ok[panel.firm[i]] {
            earn_multi[p] += level;
        }
    }
    let person_ok: Vec<bool> = (0..np)
        .map(|p| {
            let share = if earn_total[p] > 0.0 {
                earn_multi[p] / earn_total[p]
            } else {
                1.0
            };
            periods[p].len() >= cfg.min_active_years
                && employers[p].len() <= cfg.max_total_jobs
                && share >= cfg.min_earnings_share_in_multiworker_firms
        })
        .collect();
    (0..panel.n_obs())
        .map(|i| person_ok[panel.person[i]] && firm_ok[panel.firm[i]])
        .collect()
}

/// Applies the person and firm rules repeatedly until nothing more is removed.
pub fn apply_filters(panel: &Panel, cfg: &FilterConfig) -> FilterOutcome {
    let mut current = panel.clone();
    let mut passes = 0;
    loop {
        let keep = filter_pass(&current, cfg);
        if keep.iter().all(|k| *k) {
            break;
        }
        current = current.subset(&keep);
        passes += 1;
    }
    FilterOutcome {
        panel: current,
        passes,
    }
}

/// Replaces `y` and every covariate by its deviation from the mean over the
/// observations of the same person-firm match.
pub fn within_job_demean(panel: &Panel) -> Panel {
    let idx = panel.match_index();
    let k = panel.k();
    let m = idx.matches.len();
    let mut sum_y = vec![0.0; m];
    let mut sum_x = vec![0.0; m * k];
    for i in 0..panel.n_obs() {
        let id = idx.obs_match[i];
        sum_y[id] += panel.y[i];
        for c in 0..k {
            sum_x[id * k + c] += panel.x[i * k + c];
        }
    }
    let mut out = panel.clone();
    for i in 0..panel.n_obs() {
        let id = idx.obs_match[i];
        let cnt = idx.matches[id].n_obs as f64;
        out.y[i] = if idx.matches[id].n_obs == 1 {
            0.0
        } else {
            panel.y[i] - sum_y[id] / cnt
        };
        for c in 0..k {
            out.x[i * k + c] = if idx.matches[id].n_obs == 1 {
                0.0
            } else {
                panel.x[i * k + c] - sum_x[id * k + c] / cnt
            };
        }
    }
    out
}

pub fn summarize(panel: &Panel) -> PanelSummary {
    PanelSummary {
        n_obs: panel.n_obs(),
        n_jobs: panel.match_index().matches.len(),
        n_persons: panel.n_persons(),
        n_firms: panel.n_firms(),
    }
}
