//! Command-line driver.
//!
//! Failures print one JSON line to stderr and map to exit codes:
//! 2 configuration, 3 data, 4 numerical.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::decomp::{components_table, write_table3, DecompTable, Effects};
use crate::fe::{fit_akm, fit_glm_two_step, FeError, FeEstimate};
use crate::graph::{diagnose, largest_component};
use crate::kss::{kss_estimate, restrict_leave_out, KssError, LeverageMethod, Variant};
use crate::me::{fit_ml, MeError, MlConfig};
use crate::panel::{apply_filters, load_csv, write_csv, FilterConfig, Panel, PanelError, Schema};
use crate::sim::{generate, run_study, truth_report, write_table5, SimConfig, SimError, StudyConfig};
use crate::solver::CgConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numerical(_) => "numerical",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<PanelError> for CliError {
    fn from(e: PanelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<FeError> for CliError {
    fn from(e: FeError) -> Self {
        match e {
            FeError::Solver(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MeError> for CliError {
    fn from(e: MeError) -> Self {
        match e {
            MeError::EmptyPanel | MeError::Collinear(_) => CliError::Data(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<KssError> for CliError {
    fn from(e: KssError) -> Self {
        match e {
            KssError::EmptyLeaveOutSet => CliError::Data(e.to_string()),
            KssError::NoProbes => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn out_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("cannot write {}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "twoway", version, about = "Person and firm effect models on linked employer-employee panels")]
pub struct Cli {
    /// File of `key=value` lines supplying flags not given on the command line.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Worker threads; 0 or unset uses all available cores.
    #[arg(long, global = true, env = "TWOWAY_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a panel CSV and write effects and decompositions.
    Estimate(EstimateArgs),
    /// Write a simulated panel CSV.
    Simulate(SimulateArgs),
    /// Run the simulation grid and write the estimator comparison table.
    #[command(name = "replicate-table5")]
    ReplicateTable5(ReplicateArgs),
    /// Recompute the decomposition table from an estimate run directory.
    Decompose(DecomposeArgs),
    /// Report connectivity statistics of a panel.
    #[command(name = "diagnose-graph")]
    DiagnoseGraph(DiagnoseArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Akm,
    AkmNr,
    Glm,
    Mix,
    KssObs,
    KssMatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LeverageKind {
    Exact,
    Sketch,
}

#[derive(Debug, Clone, Args)]
pub struct FilterArgs {
    #[arg(long, default_value_t = 1)]
    pub min_active_years: usize,
    #[arg(long, default_value_t = 40)]
    pub max_jobs: usize,
    #[arg(long, default_value_t = 2)]
    pub min_firm_workers: usize,
    #[arg(long, default_value_t = 0.8)]
    pub earnings_share: f64,
    /// Skip the sample filters entirely.
    #[arg(long)]
    pub no_filter: bool,
    /// Keep every connected component instead of the largest.
    #[arg(long)]
    pub keep_all_components: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long, value_delimiter = ',')]
    pub covars: Vec<String>,
    #[command(flatten)]
    pub filters: FilterArgs,
    #[arg(long, value_enum, default_value_t = LeverageKind::Exact)]
    pub leverage: LeverageKind,
    #[arg(long, default_value_t = 200)]
    pub probes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 6)]
    pub periods: usize,
    /// Replications to write; more than one appends `_rep<r>` to the file stem.
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    #[arg(long, default_value_t = SimConfig::default().seed)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub persons: usize,
    #[arg(long, default_value_t = 40)]
    pub firms: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplicateArgs {
    #[arg(long, default_value_t = SimConfig::default().seed)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 25)]
    pub reps: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.2, 0.4, 0.6, 0.8])]
    pub rho_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [6, 12, 24])]
    pub periods: Vec<usize>,
    #[arg(long, default_value_t = 2000)]
    pub persons: usize,
    #[arg(long, default_value_t = 40)]
    pub firms: usize,
    #[arg(long, value_enum, default_value_t = LeverageKind::Exact)]
    pub leverage: LeverageKind,
    #[arg(long, default_value_t = 200)]
    pub probes: usize,
}

#[derive(Debug, Clone, Args)]
pub struct DecomposeArgs {
    /// Directory written by `estimate`.
    #[arg(long)]
    pub fit: PathBuf,
    /// Defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub covars: Vec<String>,
    /// JSON destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

const BOOL_KEYS: [&str; 2] = ["no-filter", "keep-all-components"];

/// Turns `key=value` lines into flags, refusing keys also given on the command line.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let path = strs.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            strs.get(i + 1).cloned()
        } else {
            a.strip_prefix("--config=").map(str::to_string)
        }
    });
    let Some(path) = path else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| CliError::Config(format!("cannot read config {path}: {e}")))?;
    let mut out = args;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("config line {}: expected key=value", n + 1)))?;
        let (key, value) = (key.trim().trim_start_matches("--"), value.trim());
        if key == "config" {
            return Err(CliError::Config("config files cannot include other config files".into()));
        }
        let flag = format!("--{key}");
        if strs.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}="))) {
            return Err(CliError::Config(format!("`{key}` set both in {path} and on the command line")));
        }
        if BOOL_KEYS.contains(&key) {
            match value {
                "true" => out.push(flag.into()),
                "false" => {}
                _ => return Err(CliError::Config(format!("config key `{key}` expects true or false"))),
            }
        } else {
            out.push(flag.into());
            out.push(value.into());
        }
    }
    Ok(out)
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let result = expand_config(args).and_then(|args| match Cli::try_parse_from(args) {
        Ok(cli) => Ok(Some(cli)),
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            Ok(None)
        }
        Err(e) => Err(CliError::Config(e.to_string().lines().next().unwrap_or_default().to_string())),
    });
    let outcome = result.and_then(|cli| match cli {
        Some(cli) => dispatch(cli),
        None => Ok(()),
    });
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.message()}));
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::ReplicateTable5(a) => cmd_replicate_table5(a),
        Command::Decompose(a) => cmd_decompose(a),
        Command::DiagnoseGraph(a) => cmd_diagnose_graph(a),
    })
}

fn leverage_method(kind: LeverageKind, probes: usize, seed: u64) -> LeverageMethod {
    match kind {
        LeverageKind::Exact => LeverageMethod::Exact,
        LeverageKind::Sketch => LeverageMethod::Sketch { probes, seed },
    }
}

/// Everything needed to rebuild the estimation sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSettings {
    pub input: PathBuf,
    pub method: Method,
    pub covariates: Vec<String>,
    /// `None` when filters were skipped.
    pub filters: Option<FilterConfig>,
    pub largest_component: bool,
    pub leverage: LeverageMethod,
}

impl EstimateSettings {
    fn from_args(a: &EstimateArgs) -> Result<Self, CliError> {
        let filters = if a.filters.no_filter {
            None
        } else {
            let f = FilterConfig {
                min_active_years: a.filters.min_active_years,
                max_total_jobs: a.filters.max_jobs,
                min_firm_workers: a.filters.min_firm_workers,
                min_earnings_share_in_multiworker_firms: a.filters.earnings_share,
            };
            f.validate().map_err(|e| CliError::Config(e.to_string()))?;
            Some(f)
        };
        if a.method == Method::AkmNr && !a.covars.is_empty() {
            return Err(CliError::Config("method akm-nr takes no covariates".into()));
        }
        if a.leverage == LeverageKind::Sketch && a.probes == 0 {
            return Err(CliError::Config("--probes must be positive".into()));
        }
        Ok(Self {
            input: a.input.clone(),
            method: a.method,
            covariates: a.covars.clone(),
            filters,
            largest_component: !a.filters.keep_all_components,
            leverage: leverage_method(a.leverage, a.probes, a.seed),
        })
    }
}

#[derive(Debug, Default, Serialize)]
struct Timings(BTreeMap<&'static str, f64>);

impl Timings {
    fn lap(&mut self, name: &'static str, start: &mut Instant) {
        self.0.insert(name, start.elapsed().as_secs_f64());
        *start = Instant::now();
    }
}

#[derive(Debug, Serialize)]
struct SampleCounts {
    loaded: crate::panel::PanelSummary,
    filter_passes: usize,
    estimation: crate::panel::PanelSummary,
}

fn prepare_panel(s: &EstimateSettings, timings: &mut Timings) -> Result<(Panel, SampleCounts), CliError> {
    let mut clock = Instant::now();
    let loaded = load_csv(&s.input, &Schema::with_covariates(s.covariates.clone()))?;
    timings.lap("load", &mut clock);
    let (mut panel, passes) = match &s.filters {
        Some(f) => {
            let o = apply_filters(&loaded, f);
            (o.panel, o.passes)
        }
        None => (loaded.clone(), 0),
    };
    if s.largest_component {
        panel = largest_component(&panel);
    }
    if s.method == Method::KssMatch {
        panel = restrict_leave_out(&panel, Variant::Match)?;
    }
    timings.lap("prepare", &mut clock);
    if panel.is_empty() {
        return Err(CliError::Data("estimation sample is empty after filtering".into()));
    }
    let counts = SampleCounts {
        loaded: crate::panel::summarize(&loaded),
        filter_passes: passes,
        estimation: crate::panel::summarize(&panel),
    };
    Ok((panel, counts))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| out_err(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| out_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| out_err(path, e))
}

fn write_rows(path: &Path, header: [&str; 2], rows: impl Iterator<Item = (String, f64)>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| out_err(path, e))?;
    w.write_record(header).map_err(|e| out_err(path, e))?;
    for (k, v) in rows {
        w.write_record([k, v.to_string()]).map_err(|e| out_err(path, e))?;
    }
    w.flush().map_err(|e| out_err(path, e))
}

fn write_effects(dir: &Path, panel: &Panel, eff: &Effects) -> Result<(), CliError> {
    write_rows(
        &dir.join("person_effects.csv"),
        ["person", "theta"],
        panel.person_labels().iter().cloned().zip(eff.theta.iter().copied()),
    )?;
    write_rows(
        &dir.join("firm_effects.csv"),
        ["firm", "psi"],
        panel.firm_labels().iter().cloned().zip(eff.psi.iter().copied()),
    )?;
    write_rows(
        &dir.join("beta.csv"),
        ["covariate", "beta"],
        panel.covariate_names().iter().cloned().zip(eff.beta.iter().copied()),
    )
}

fn write_decomposition(dir: &Path, table: &DecompTable) -> Result<(), CliError> {
    let path = dir.join("table3.csv");
    let file = fs::File::create(&path).map_err(|e| out_err(&path, e))?;
    write_table3(table, file).map_err(|e| out_err(&path, e))?;
    write_json(&dir.join("table3.json"), table)
}

fn checked_fe(est: FeEstimate) -> Result<FeEstimate, CliError> {
    if est.converged {
        Ok(est)
    } else {
        Err(CliError::Numerical(format!(
            "conjugate gradient stopped at relative residual {:e} after {} iterations",
            est.rel_residual, est.iterations
        )))
    }
}

fn fe_summary(method: Method, fe: &FeEstimate) -> serde_json::Value {
    json!({
        "method": method,
        "intercept": fe.intercept,
        "iterations": fe.iterations,
        "converged": fe.converged,
        "rel_residual": fe.rel_residual,
    })
}

pub fn cmd_estimate(a: &EstimateArgs) -> Result<(), CliError> {
    let settings = EstimateSettings::from_args(a)?;
    let mut timings = Timings::default();
    let (panel, counts) = prepare_panel(&settings, &mut timings)?;
    create_dir(&a.out)?;
    let mut clock = Instant::now();
    let cg = CgConfig::default();
    let (effects, fit): (Effects, serde_json::Value) = match settings.method {
        Method::Akm | Method::AkmNr => {
            let fe = checked_fe(fit_akm(&panel, settings.method == Method::Akm, &cg)?)?;
            ((&fe).into(), fe_summary(settings.method, &fe))
        }
        Method::Glm => {
            let fe = checked_fe(fit_glm_two_step(&panel, &cg)?)?;
            ((&fe).into(), fe_summary(settings.method, &fe))
        }
        Method::Mix => {
            let me = fit_ml(&panel, &MlConfig::default())?;
            if !me.converged {
                log::warn!("deviance optimizer stopped at its evaluation limit");
            }
            write_json(
                &a.out.join("variance_components.json"),
                &json!({
                    "sigma_p2": me.vc.sigma_p2,
                    "sigma_f2": me.vc.sigma_f2,
                    "sigma_e2": me.vc.sigma_e2,
                    "sigma_pf": me.vc.sigma_pf,
                    "deviance": me.deviance,
                    "log_ratios": me.log_ratios,
                    "boundary_person": me.boundary_p,
                    "boundary_firm": me.boundary_f,
                    "evaluations": me.evaluations,
                    "converged": me.converged,
                }),
            )?;
            let fit = json!({"method": settings.method, "intercept": me.intercept, "deviance": me.deviance});
            ((&me).into(), fit)
        }
        Method::KssObs | Method::KssMatch => {
            let variant = if settings.method == Method::KssObs {
                Variant::Obs
            } else {
                Variant::Match
            };
            let fe = checked_fe(fit_akm(&panel, true, &cg)?)?;
            let (kss, _, _) = kss_estimate(&panel, &fe.beta, variant, settings.leverage)?;
            if kss.negative_variance {
                log::warn!("corrected variance estimate is negative");
            }
            write_json(&a.out.join("kss.json"), &kss)?;
            ((&fe).into(), fe_summary(settings.method, &fe))
        }
    };
    timings.lap("fit", &mut clock);
    let table = components_table(&panel, &effects).map_err(|e| CliError::Numerical(e.to_string()))?;
    timings.lap("decompose", &mut clock);
    write_effects(&a.out, &panel, &effects)?;
    write_decomposition(&a.out, &table)?;
    write_json(&a.out.join("fit.json"), &fit)?;
    write_json(
        &a.out.join("run_manifest.json"),
        &json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "subcommand": "estimate",
            "args": std::env::args().collect::<Vec<_>>(),
            "settings": settings,
            "threads": rayon::current_num_threads(),
            "samples": counts,
            "timings_seconds": timings,
        }),
    )
}

fn read_effect_file(path: &Path, labels: &[String]) -> Result<Vec<f64>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut by_label = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let v: f64 = rec
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CliError::Data(format!("{}: bad value row {rec:?}", path.display())))?;
        by_label.insert(rec.get(0).unwrap_or_default().to_string(), v);
    }
    labels
        .iter()
        .map(|l| {
            by_label
                .get(l)
                .copied()
                .ok_or_else(|| CliError::Data(format!("{}: no row for `{l}`", path.display())))
        })
        .collect()
}

pub fn cmd_decompose(a: &DecomposeArgs) -> Result<(), CliError> {
    let read = |name: &str| -> Result<serde_json::Value, CliError> {
        let p = a.fit.join(name);
        let text = fs::read_to_string(&p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
    };
    let manifest = read("run_manifest.json")?;
    let settings: EstimateSettings = serde_json::from_value(manifest["settings"].clone())
        .map_err(|e| CliError::Data(format!("run_manifest.json settings: {e}")))?;
    let intercept = read("fit.json")?["intercept"]
        .as_f64()
        .ok_or_else(|| CliError::Data("fit.json has no intercept".into()))?;
    let (panel, _) = prepare_panel(&settings, &mut Timings::default())?;
    let effects = Effects {
        intercept,
        theta: read_effect_file(&a.fit.join("person_effects.csv"), panel.person_labels())?,
        psi: read_effect_file(&a.fit.join("firm_effects.csv"), panel.firm_labels())?,
        beta: read_effect_file(&a.fit.join("beta.csv"), panel.covariate_names())?,
    };
    let table = components_table(&panel, &effects).map_err(|e| CliError::Data(e.to_string()))?;
    let out = a.out.clone().unwrap_or_else(|| a.fit.clone());
    create_dir(&out)?;
    write_decomposition(&out, &table)
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let cfg = SimConfig {
        n_persons: a.persons,
        n_firms: a.firms,
        periods: a.periods,
        rho: a.rho,
        n_reps: a.reps,
        seed: a.seed,
        ..SimConfig::default()
    };
    cfg.validate()?;
    for rep in 0..a.reps {
        let path = if a.reps == 1 {
            a.out.clone()
        } else {
            let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            a.out.with_file_name(format!("{stem}_rep{rep}.csv"))
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        let sp = generate(&cfg, rep)?;
        let file = fs::File::create(&path).map_err(|e| out_err(&path, e))?;
        write_csv(&sp.panel, file).map_err(|e| out_err(&path, e))?;
        write_json(
            &path.with_extension("truth.json"),
            &json!({"config": cfg, "rep": rep, "truth": truth_report(&sp)}),
        )?;
    }
    Ok(())
}

pub fn cmd_replicate_table5(a: &ReplicateArgs) -> Result<(), CliError> {
    if a.rho_grid.is_empty() || a.periods.is_empty() {
        return Err(CliError::Config("empty rho or period grid".into()));
    }
    let cfg = StudyConfig {
        base: SimConfig {
            n_persons: a.persons,
            n_firms: a.firms,
            n_reps: a.reps,
            seed: a.seed,
            ..SimConfig::default()
        },
        rhos: a.rho_grid.clone(),
        periods: a.periods.clone(),
        leverage: leverage_method(a.leverage, a.probes, a.seed),
        ..StudyConfig::default()
    };
    let res = run_study(&cfg)?;
    for c in res.cells.iter().filter(|c| c.n_failed > 0) {
        log::warn!(
            "{} at T={} rho={}: {} of {} replications failed",
            c.estimator.label(),
            c.periods,
            c.rho,
            c.n_failed,
            c.n_failed + c.n_success
        );
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let file = fs::File::create(&a.out).map_err(|e| out_err(&a.out, e))?;
    write_table5(&res, file).map_err(|e| out_err(&a.out, e))?;
    write_json(
        &a.out.with_extension("json"),
        &json!({"config": res.config, "cells": res.cells}),
    )
}

pub fn cmd_diagnose_graph(a: &DiagnoseArgs) -> Result<(), CliError> {
    let panel = load_csv(&a.input, &Schema::with_covariates(a.covars.clone()))?;
    let d = diagnose(&panel);
    match &a.out {
        Some(p) => write_json(p, &d),
        None => {
            println!("{}", serde_json::to_string_pretty(&d).expect("serializable"));
            Ok(())
        }
    }
}
