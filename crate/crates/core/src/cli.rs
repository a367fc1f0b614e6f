//! Command-line front end: `estimate`, `simulate` and `seb`.
//!
//! Every option can come from a JSON config file (`--config`); a flag given
//! on the command line overrides the file value for that field.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::clp::{seb_monte_carlo, ClpBasis};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimatorKind, EstimatorOptions, JacobianForm};
use crate::gps::{fit_mle, GpsFamily, GpsFit, GpsKind};
use crate::simulate::{run_study_with, sig6, summary_csv, summary_markdown, Design, StudySpec};

/// Environment variable holding the default worker count.
pub const THREADS_ENV: &str = "AVGCLP_THREADS";

#[derive(Debug, Parser)]
#[command(name = "avgclp", version, about = "Average conditional-linear-predictor slope estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the average slope on a CSV dataset.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo study on preset or custom designs.
    Simulate(SimulateArgs),
    /// Evaluate the efficiency bound of a design.
    Seb(SebArgs),
}

#[derive(Debug, Args, Default)]
pub struct EstimateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub outcome: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub treatments: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub controls: Option<Vec<String>>,
    /// logit, poisson or multinomial.
    #[arg(long)]
    pub gps: Option<String>,
    /// Propensity index basis, e.g. `1,w,w^2` (default: constant and each control).
    #[arg(long)]
    pub gps_basis: Option<String>,
    /// CLP basis without constant, e.g. `w,w^2` (default: each control).
    #[arg(long)]
    pub clp_basis: Option<String>,
    /// Treat the single treatment column as category labels 0..K.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub multinomial_labels: Option<bool>,
    /// Comma-separated subset of ob, gipw, dr, plm.
    #[arg(long, alias = "estimators")]
    pub estimator: Option<String>,
    /// exact, information, asymptotic or numeric (default depends on the estimator).
    #[arg(long)]
    pub jacobian: Option<String>,
    /// Propagate propensity estimation error into the standard errors.
    #[arg(long)]
    pub gps_correction: Option<bool>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// csv or json.
    #[arg(long)]
    pub format: Option<String>,
    /// Full-precision JSON copy of the records.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset ids, comma separated (ignored when the config holds a custom design).
    #[arg(long)]
    pub design: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub estimators: Option<String>,
    #[arg(long)]
    pub jacobian: Option<String>,
    #[arg(long)]
    pub gps_correction: Option<bool>,
    #[arg(long, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub markdown: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct SebArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub design: Option<String>,
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sample size for the implied standard error.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Resolved-or-partial run configuration. Missing fields fall back to
/// built-in defaults at run time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub outcome: Option<String>,
    pub treatments: Option<Vec<String>>,
    pub controls: Option<Vec<String>>,
    pub gps: Option<String>,
    pub gps_basis: Option<String>,
    pub clp_basis: Option<String>,
    pub multinomial_labels: Option<bool>,
    pub estimators: Option<String>,
    pub jacobian: Option<String>,
    pub gps_correction: Option<bool>,
    pub output: Option<PathBuf>,
    pub format: Option<String>,
    pub sidecar: Option<PathBuf>,
    pub markdown: Option<PathBuf>,
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub reps: Option<usize>,
    pub draws: Option<usize>,
    pub threads: Option<usize>,
    pub design: Option<String>,
    pub custom_design: Option<Design>,
}

macro_rules! overlay_fields {
    ($top:ident, $base:ident, $($f:ident),*) => {
        RunConfig { $($f: $top.$f.or($base.$f)),* }
    };
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    /// Field-wise: values set in `self` win over `base`.
    pub fn overlay(self, base: RunConfig) -> RunConfig {
        let top = self;
        overlay_fields!(
            top, base, data, outcome, treatments, controls, gps, gps_basis, clp_basis, multinomial_labels,
            estimators, jacobian, gps_correction, output, format, sidecar, markdown, seed, n, reps, draws,
            threads, design, custom_design
        )
    }

    fn with_file(self, file: Option<&Path>) -> Result<Self> {
        match file {
            Some(p) => Ok(self.overlay(Self::from_json_file(p)?)),
            None => Ok(self),
        }
    }

    fn require<T: Clone>(v: &Option<T>, name: &str) -> Result<T> {
        v.clone()
            .ok_or_else(|| Error::Config(format!("missing required option '{name}'")))
    }
}

impl EstimateArgs {
    pub fn into_config(self) -> Result<RunConfig> {
        let flags = RunConfig {
            data: self.data,
            outcome: self.outcome,
            treatments: self.treatments,
            controls: self.controls,
            gps: self.gps,
            gps_basis: self.gps_basis,
            clp_basis: self.clp_basis,
            multinomial_labels: self.multinomial_labels,
            estimators: self.estimator,
            jacobian: self.jacobian,
            gps_correction: self.gps_correction,
            output: self.output,
            format: self.format,
            sidecar: self.sidecar,
            ..Default::default()
        };
        flags.with_file(self.config.as_deref())
    }
}

impl SimulateArgs {
    pub fn into_config(self) -> Result<RunConfig> {
        let flags = RunConfig {
            design: self.design,
            n: self.n,
            reps: self.reps,
            seed: self.seed,
            estimators: self.estimators,
            jacobian: self.jacobian,
            gps_correction: self.gps_correction,
            threads: self.threads,
            output: self.output,
            markdown: self.markdown,
            ..Default::default()
        };
        flags.with_file(self.config.as_deref())
    }
}

impl SebArgs {
    pub fn into_config(self) -> Result<RunConfig> {
        let flags = RunConfig {
            design: self.design,
            draws: self.draws,
            seed: self.seed,
            n: self.n,
            output: self.output,
            ..Default::default()
        };
        flags.with_file(self.config.as_deref())
    }
}

/// Column roles for [`load_csv`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ColumnRoles {
    pub outcome: String,
    pub treatments: Vec<String>,
    pub controls: Vec<String>,
    /// Expand a single label column `0..=K` into `K` indicators.
    pub multinomial_labels: bool,
}

impl ColumnRoles {
    fn validate(&self) -> Result<()> {
        if self.treatments.is_empty() {
            return Err(Error::Config("at least one treatment column is required".into()));
        }
        let mut all: Vec<&str> = vec![self.outcome.as_str()];
        all.extend(self.treatments.iter().map(String::as_str));
        all.extend(self.controls.iter().map(String::as_str));
        for (i, c) in all.iter().enumerate() {
            if all[..i].contains(c) {
                return Err(Error::Config(format!("column '{c}' is assigned more than one role")));
            }
        }
        if self.multinomial_labels && self.treatments.len() != 1 {
            return Err(Error::Config("label expansion needs exactly one treatment column".into()));
        }
        Ok(())
    }
}

/// Reads a headed, fully numeric CSV. Row numbers in errors count data
/// rows from 1.
pub fn load_csv(path: &Path, roles: &ColumnRoles) -> Result<Dataset> {
    let file = fs::File::open(path)?;
    load_csv_reader(file, roles)
}

pub fn load_csv_reader<R: io::Read>(reader: R, roles: &ColumnRoles) -> Result<Dataset> {
    roles.validate()?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            column: String::new(),
            message: e.to_string(),
        })?
        .clone();
    let index = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let y_idx = index(&roles.outcome)?;
    let x_idx = roles.treatments.iter().map(|c| index(c)).collect::<Result<Vec<_>>>()?;
    let w_idx = roles.controls.iter().map(|c| index(c)).collect::<Result<Vec<_>>>()?;
    let mut y = Vec::new();
    let mut x: Vec<Vec<f64>> = vec![Vec::new(); x_idx.len()];
    let mut w: Vec<Vec<f64>> = vec![Vec::new(); w_idx.len()];
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        let cell = |idx: usize| -> Result<f64> {
            let raw = rec.get(idx).unwrap_or("");
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::NonNumericCell {
                    row,
                    column: header.get(idx).unwrap_or("").to_string(),
                    value: raw.to_string(),
                }),
            }
        };
        y.push(cell(y_idx)?);
        for (col, &idx) in x.iter_mut().zip(&x_idx) {
            col.push(cell(idx)?);
        }
        for (col, &idx) in w.iter_mut().zip(&w_idx) {
            col.push(cell(idx)?);
        }
    }
    if y.is_empty() {
        return Err(Error::EmptyData);
    }
    let n = y.len();
    let (xm, x_names) = if roles.multinomial_labels {
        Dataset::labels_to_indicators(&x[0], &roles.treatments[0])?
    } else {
        (
            DMatrix::from_fn(n, x.len(), |i, j| x[j][i]),
            roles.treatments.clone(),
        )
    };
    Dataset::new(
        DVector::from_vec(y),
        xm,
        DMatrix::from_fn(n, w.len(), |i, j| w[j][i]),
        roles.outcome.clone(),
        x_names,
        roles.controls.clone(),
    )
}

/// One output line of `estimate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub estimator: String,
    pub treatment: String,
    pub beta: f64,
    pub stderr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    pub gps: String,
    pub gps_basis: String,
    pub clp_basis: String,
}

fn parse_jacobian(s: Option<&str>) -> Result<Option<JacobianForm>> {
    s.map(JacobianForm::parse).transpose()
}

/// Runs `estimate` and returns its records.
pub fn run_estimate(cfg: &RunConfig) -> Result<Vec<EstimateRecord>> {
    let roles = ColumnRoles {
        outcome: RunConfig::require(&cfg.outcome, "outcome")?,
        treatments: RunConfig::require(&cfg.treatments, "treatments")?,
        controls: cfg.controls.clone().unwrap_or_default(),
        multinomial_labels: cfg.multinomial_labels.unwrap_or(false),
    };
    let kinds = EstimatorKind::parse_list(cfg.estimators.as_deref().unwrap_or("dr"))?;
    let options = EstimatorOptions {
        jacobian: parse_jacobian(cfg.jacobian.as_deref())?,
        gps_correction: cfg.gps_correction.unwrap_or(true),
        check_jacobian: None,
    };
    let gps_kind_name = cfg.gps.clone();
    if kinds.iter().any(EstimatorKind::needs_gps) && gps_kind_name.is_none() {
        return Err(Error::Config("missing required option 'gps'".into()));
    }
    let data = load_csv(&RunConfig::require(&cfg.data, "data")?, &roles)?;
    let controls = &data.control_names;
    let gps_basis = match &cfg.gps_basis {
        Some(s) => BasisSpec::parse(s, controls)?,
        None => BasisSpec::linear_with_constant(controls),
    };
    let clp_basis = match &cfg.clp_basis {
        Some(s) => BasisSpec::parse(s, controls)?,
        None => BasisSpec::linear(controls),
    };
    let fit: Option<GpsFit> = match &gps_kind_name {
        Some(name) if kinds.iter().any(EstimatorKind::needs_gps) => {
            let family = GpsFamily::new(GpsKind::from_name(name, data.k())?, gps_basis.clone())?;
            let fit = fit_mle(&family, &data)?;
            if !fit.converged {
                return Err(Error::NonConvergence { iterations: fit.iterations });
            }
            Some(fit)
        }
        _ => None,
    };
    let mut records = Vec::new();
    for kind in kinds {
        let clp = if kind.needs_clp() {
            Some(ClpBasis::fit(clp_basis.clone(), &data, kind != EstimatorKind::Plm)?)
        } else {
            None
        };
        let est = estimate(kind, &data, fit.as_ref(), clp.as_ref(), &options)?;
        for (k, name) in data.treatment_names.iter().enumerate() {
            records.push(EstimateRecord {
                estimator: kind.name().into(),
                treatment: name.clone(),
                beta: est.beta[k],
                stderr: est.stderr[k],
                ci_low: est.ci95[k].0,
                ci_high: est.ci95[k].1,
                n: est.n,
                gps: fit.as_ref().map_or("none".into(), |f| f.kind().name().to_string()),
                gps_basis: if kind.needs_gps() { gps_basis.describe() } else { String::new() },
                clp_basis: clp.as_ref().map_or(String::new(), |c| c.basis.describe()),
            });
        }
    }
    Ok(records)
}

/// Records as CSV with 6 significant digits.
pub fn records_csv(records: &[EstimateRecord]) -> String {
    let mut out = String::from("estimator,treatment,beta,stderr,ci_low,ci_high,n,gps,gps_basis,clp_basis\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},\"{}\",\"{}\"\n",
            r.estimator,
            r.treatment,
            sig6(r.beta),
            sig6(r.stderr),
            sig6(r.ci_low),
            sig6(r.ci_high),
            r.n,
            r.gps,
            r.gps_basis,
            r.clp_basis
        ));
    }
    out
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Io(io::Error::other(e)))
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn designs_from(cfg: &RunConfig) -> Result<Vec<Design>> {
    if let Some(d) = &cfg.custom_design {
        return Ok(vec![d.clone()]);
    }
    let ids = cfg.design.as_deref().unwrap_or("1");
    ids.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let id: u8 = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("design id '{s}' is not a number")))?;
            Design::preset(id)
        })
        .collect()
}

pub fn run_simulate(cfg: &RunConfig) -> Result<String> {
    let designs = designs_from(cfg)?;
    let kinds = EstimatorKind::parse_list(cfg.estimators.as_deref().unwrap_or("ob,gipw,dr"))?;
    let mut spec = StudySpec::new(&kinds);
    spec.options.jacobian = parse_jacobian(cfg.jacobian.as_deref())?;
    spec.options.gps_correction = cfg.gps_correction.unwrap_or(true);
    let n = cfg.n.unwrap_or(1000);
    let reps = cfg.reps.unwrap_or(5000);
    let seed = cfg.seed.unwrap_or(0);
    let threads = cfg.threads.unwrap_or(0);
    let summaries = designs
        .iter()
        .map(|d| run_study_with(d, n, reps, seed, &spec, threads))
        .collect::<Result<Vec<_>>>()?;
    let csv = summary_csv(&summaries);
    emit(cfg.output.as_deref(), &csv)?;
    if let Some(md) = &cfg.markdown {
        fs::write(md, summary_markdown(&summaries))?;
    }
    Ok(csv)
}

pub fn run_seb(cfg: &RunConfig) -> Result<String> {
    let designs = designs_from(cfg)?;
    let draws = cfg.draws.unwrap_or(1_000_000);
    let seed = cfg.seed.unwrap_or(0);
    let n = cfg.n.unwrap_or(1000);
    if n == 0 {
        return Err(Error::Config("n must be positive".into()));
    }
    let mut out = String::from("design,n_draws,bound_inv,omega_term,var_b_term,n,se_at_n\n");
    for d in &designs {
        let seb = seb_monte_carlo(d, draws, seed)?;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            d.name,
            seb.n_draws,
            sig6(seb.bound_inv[(0, 0)]),
            sig6(seb.omega_term[(0, 0)]),
            sig6(seb.var_b_term[(0, 0)]),
            n,
            sig6(seb.se_at(n, 0))
        ));
    }
    emit(cfg.output.as_deref(), &out)?;
    Ok(out)
}

fn run_command(command: Command) -> Result<()> {
    match command {
        Command::Estimate(args) => {
            let cfg = args.into_config()?;
            let records = run_estimate(&cfg)?;
            let text = match cfg.format.as_deref().unwrap_or("csv") {
                "csv" => records_csv(&records),
                "json" => to_json(&records)? + "\n",
                other => return Err(Error::Config(format!("unknown format '{other}' (expected csv or json)"))),
            };
            emit(cfg.output.as_deref(), &text)?;
            if let Some(p) = &cfg.sidecar {
                fs::write(p, to_json(&records)?)?;
            }
            Ok(())
        }
        Command::Simulate(args) => run_simulate(&args.into_config()?).map(|_| ()),
        Command::Seb(args) => run_seb(&args.into_config()?).map(|_| ()),
    }
}

/// Machine-readable failure record written to stderr.
#[derive(Debug, Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    class: String,
    exit_code: i32,
    message: String,
}

fn report(code: &str, class: String, exit_code: i32, message: String) {
    let rec = ErrorRecord {
        error: code,
        class,
        exit_code,
        message,
    };
    if let Ok(s) = serde_json::to_string(&rec) {
        eprintln!("{s}");
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            report("usage", "config".into(), 2, e.to_string());
            return 2;
        }
    };
    match run_command(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            report(e.code(), e.class().to_string(), e.exit_code(), e.to_string());
            e.exit_code()
        }
    }
}
