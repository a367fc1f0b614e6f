//! Monte Carlo designs with a Poisson treatment and a replication harness.

use std::fmt::Write as _;
use std::io;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::clp::ClpBasis;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimatorKind, EstimatorOptions};
use crate::gps::{fit_mle, GpsFamily, GpsKind};
use crate::rng::stream_rng;

/// Index terms of the true propensity score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GpsTruthBasis {
    /// `(1, w)`
    #[default]
    Linear,
    /// `(1, w, w^2)`
    Quadratic,
}

/// `W ~ N(0,1)`, `X | W ~ Poisson(exp(phi0 + phi1 W + phi2 W^2))`,
/// `Y = a(W) + b(W) X + sigma_u U` with `U ~ N(0,1)` and
/// `a(w) = alpha0 + gamma1 w + gamma2 (w^2 - 1)`,
/// `b(w) = beta0 + delta1 w + delta2 (w^2 - 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    #[serde(default = "custom_name")]
    pub name: String,
    pub alpha0: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub beta0: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub phi0: f64,
    pub phi1: f64,
    pub phi2: f64,
    #[serde(default)]
    pub gps_truth_basis: GpsTruthBasis,
    #[serde(default = "unit")]
    pub sigma_u: f64,
}

fn custom_name() -> String {
    "custom".into()
}

fn unit() -> f64 {
    1.0
}

impl Design {
    /// The four calibrated presets, `id` in `1..=4`.
    pub fn preset(id: u8) -> Result<Self> {
        let (alpha0, gamma2, beta0, delta1, delta2, phi2) = match id {
            1 => (1.0, 0.0, 2.0, 1.22, 0.0, 0.0),
            2 => (1.0, 0.0, 2.0, 1.26, 0.0, 0.1),
            3 => (1.5, 0.5, 2.5, 1.0, 0.5, 0.0),
            4 => (1.5, 0.5, 2.5, 1.05, 0.5, 0.1),
            _ => return Err(Error::Config(format!("unknown design {id} (expected 1-4)"))),
        };
        Ok(Self {
            name: id.to_string(),
            alpha0,
            gamma1: 1.0,
            gamma2,
            beta0,
            delta1,
            delta2,
            phi0: 0.1,
            phi1: 0.5,
            phi2,
            gps_truth_basis: if phi2 == 0.0 {
                GpsTruthBasis::Linear
            } else {
                GpsTruthBasis::Quadratic
            },
            sigma_u: 1.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let values = [
            self.alpha0, self.gamma1, self.gamma2, self.beta0, self.delta1, self.delta2, self.phi0, self.phi1,
            self.phi2, self.sigma_u,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("design parameters must be finite".into()));
        }
        if self.sigma_u < 0.0 {
            return Err(Error::Config("sigma_u must be non-negative".into()));
        }
        if self.gps_truth_basis == GpsTruthBasis::Linear && self.phi2 != 0.0 {
            return Err(Error::Config("phi2 must be 0 for a linear propensity index".into()));
        }
        Ok(())
    }

    pub fn a0(&self, w: f64) -> f64 {
        self.alpha0 + self.gamma1 * w + self.gamma2 * (w * w - 1.0)
    }

    pub fn b0(&self, w: f64) -> f64 {
        self.beta0 + self.delta1 * w + self.delta2 * (w * w - 1.0)
    }

    pub fn gps_index(&self, w: f64) -> f64 {
        self.phi0 + self.phi1 * w + self.phi2 * w * w
    }

    /// Conditional mean of the treatment, equal to its variance.
    pub fn treatment_mean(&self, w: f64) -> f64 {
        self.gps_index(w).exp()
    }

    pub fn treatment_variance(&self, w: f64) -> f64 {
        self.gps_index(w).exp()
    }

    /// Population average slope.
    pub fn truth(&self) -> f64 {
        self.beta0
    }
}

/// Random stream of replicate `r`.
pub fn replicate_rng(seed: u64, r: u64) -> rand_chacha::ChaCha20Rng {
    stream_rng(seed, r)
}

/// Draws `n` rows; per row `W`, then `X`, then `U`.
pub fn draw_sample<R: Rng + ?Sized>(design: &Design, n: usize, rng: &mut R) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidInput("sample size must be at least 1".into()));
    }
    design.validate()?;
    let mut y = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for _ in 0..n {
        let wi: f64 = rng.sample(StandardNormal);
        let rate = design.treatment_mean(wi);
        let xi: f64 = Poisson::new(rate)
            .map_err(|_| Error::InvalidInput(format!("invalid Poisson rate {rate}")))?
            .sample(rng);
        let ui: f64 = rng.sample(StandardNormal);
        y.push(design.a0(wi) + design.b0(wi) * xi + design.sigma_u * ui);
        x.push(xi);
        w.push(wi);
    }
    Dataset::from_columns(&y, &[x], &[w])
}

/// Writes a dataset as CSV with shortest round-trip float formatting.
pub fn export_csv<W: io::Write>(data: &Dataset, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec![data.outcome_name.clone()];
    header.extend(data.treatment_names.iter().cloned());
    header.extend(data.control_names.iter().cloned());
    wtr.write_record(&header).map_err(csv_io)?;
    for i in 0..data.n() {
        let mut rec = vec![data.y[i].to_string()];
        rec.extend(data.x.row(i).iter().map(f64::to_string));
        rec.extend(data.w.row(i).iter().map(f64::to_string));
        wtr.write_record(&rec).map_err(csv_io)?;
    }
    wtr.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(io::Error::other(e))
}

/// Estimator set and working models used in every replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct StudySpec {
    pub estimators: Vec<EstimatorKind>,
    pub options: EstimatorOptions,
    /// Propensity index basis used for estimation.
    pub gps_basis: String,
    /// CLP basis (no constant).
    pub clp_basis: String,
}

impl StudySpec {
    /// Poisson score on `(1, w)` and a CLP linear in `w`.
    pub fn new(estimators: &[EstimatorKind]) -> Self {
        Self {
            estimators: estimators.to_vec(),
            options: EstimatorOptions::default(),
            gps_basis: "1,w".into(),
            clp_basis: "w".into(),
        }
    }
}

/// Outcome of one estimator in one replicate.
pub type ReplicateOutcome = Option<(f64, f64)>;

fn run_replicate(design: &Design, n: usize, seed: u64, r: u64, spec: &StudySpec) -> Vec<ReplicateOutcome> {
    let mut rng = replicate_rng(seed, r);
    let Ok(data) = draw_sample(design, n, &mut rng) else {
        return vec![None; spec.estimators.len()];
    };
    let controls = &data.control_names;
    let fit = if spec.estimators.iter().any(EstimatorKind::needs_gps) {
        BasisSpec::parse(&spec.gps_basis, controls)
            .and_then(|b| GpsFamily::new(GpsKind::PoissonLog, b))
            .and_then(|fam| fit_mle(&fam, &data))
            .ok()
            .filter(|f| f.converged)
    } else {
        None
    };
    let clp_for = |interactions: bool| {
        BasisSpec::parse(&spec.clp_basis, controls).and_then(|b| ClpBasis::fit(b, &data, interactions))
    };
    spec.estimators
        .iter()
        .map(|&kind| {
            if kind.needs_gps() && fit.is_none() {
                return None;
            }
            let clp = if kind.needs_clp() {
                Some(clp_for(kind != EstimatorKind::Plm).ok()?)
            } else {
                None
            };
            let est = estimate(kind, &data, fit.as_ref(), clp.as_ref(), &spec.options).ok()?;
            Some((est.beta[0], est.stderr[0]))
        })
        .collect()
}

/// Per-replicate outcomes in replicate order, `out[r][e]` for estimator `e`.
pub fn run_replicates(
    design: &Design,
    n: usize,
    reps: usize,
    seed: u64,
    spec: &StudySpec,
    threads: usize,
) -> Result<Vec<Vec<ReplicateOutcome>>> {
    design.validate()?;
    if reps == 0 {
        return Err(Error::Config("at least one replicate is required".into()));
    }
    if n == 0 {
        return Err(Error::Config("sample size must be at least 1".into()));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if threads > 0 {
        builder = builder.num_threads(threads);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| {
        (0..reps as u64)
            .into_par_iter()
            .map(|r| run_replicate(design, n, seed, r, spec))
            .collect()
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub estimator: EstimatorKind,
    pub median_bias: f64,
    pub sd: f64,
    pub median_se: f64,
    pub coverage: f64,
    /// `sqrt(0.05 * 0.95 / B)`.
    pub coverage_mc_se: f64,
    pub fail_rate: f64,
    pub successes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudySummary {
    pub design: String,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub truth: f64,
    pub rows: Vec<SummaryRow>,
}

impl StudySummary {
    pub fn row(&self, kind: EstimatorKind) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.estimator == kind)
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Summary of `(estimate, stderr)` pairs against `truth`.
pub fn summarize(estimator: EstimatorKind, replicates: &[(f64, f64)], truth: f64) -> Result<SummaryRow> {
    if replicates.is_empty() {
        return Err(Error::InvalidInput("no replicates to summarize".into()));
    }
    let b = replicates.len();
    let mut errors: Vec<f64> = replicates.iter().map(|(e, _)| e - truth).collect();
    errors.sort_by(f64::total_cmp);
    let mut ses: Vec<f64> = replicates.iter().map(|(_, s)| *s).collect();
    ses.sort_by(f64::total_cmp);
    let mean = replicates.iter().map(|(e, _)| e).sum::<f64>() / b as f64;
    let sd = if b > 1 {
        (replicates.iter().map(|(e, _)| (e - mean).powi(2)).sum::<f64>() / (b - 1) as f64).sqrt()
    } else {
        0.0
    };
    let covered = replicates
        .iter()
        .filter(|(e, s)| (e - truth).abs() <= crate::estimators::Z_95 * s)
        .count();
    Ok(SummaryRow {
        estimator,
        median_bias: median(&errors),
        sd,
        median_se: median(&ses),
        coverage: covered as f64 / b as f64,
        coverage_mc_se: (0.05 * 0.95 / b as f64).sqrt(),
        fail_rate: 0.0,
        successes: b,
    })
}

/// Largest tolerated share of failed replicates per estimator.
pub const MAX_FAIL_RATE: f64 = 0.01;

pub fn run_study(
    design: &Design,
    n: usize,
    reps: usize,
    seed: u64,
    estimators: &[EstimatorKind],
    threads: usize,
) -> Result<StudySummary> {
    run_study_with(design, n, reps, seed, &StudySpec::new(estimators), threads)
}

pub fn run_study_with(
    design: &Design,
    n: usize,
    reps: usize,
    seed: u64,
    spec: &StudySpec,
    threads: usize,
) -> Result<StudySummary> {
    if spec.estimators.is_empty() {
        return Err(Error::Config("no estimator selected".into()));
    }
    let outcomes = run_replicates(design, n, reps, seed, spec, threads)?;
    let truth = design.truth();
    let mut rows = Vec::with_capacity(spec.estimators.len());
    for (e, &kind) in spec.estimators.iter().enumerate() {
        let ok: Vec<(f64, f64)> = outcomes.iter().filter_map(|r| r[e]).collect();
        let failed = reps - ok.len();
        if failed as f64 > MAX_FAIL_RATE * reps as f64 || ok.is_empty() {
            return Err(Error::TooManyFailures {
                estimator: kind.name().into(),
                failed,
                reps,
            });
        }
        let mut row = summarize(kind, &ok, truth)?;
        row.fail_rate = failed as f64 / reps as f64;
        rows.push(row);
    }
    Ok(StudySummary {
        design: design.name.clone(),
        n,
        reps,
        seed,
        truth,
        rows,
    })
}

/// `v` rounded to 6 significant digits, printed in shortest form.
pub fn sig6(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let rounded: f64 = format!("{v:.5e}").parse().unwrap_or(v);
    rounded.to_string()
}

pub const SUMMARY_HEADER: [&str; 9] = [
    "design",
    "estimator",
    "N",
    "B",
    "median_bias",
    "sd",
    "median_se",
    "coverage",
    "fail_rate",
];

/// Summary CSV, one row per estimator.
pub fn summary_csv(summaries: &[StudySummary]) -> String {
    let mut out = SUMMARY_HEADER.join(",");
    out.push('\n');
    for s in summaries {
        for r in &s.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                s.design,
                r.estimator.name(),
                s.n,
                s.reps,
                sig6(r.median_bias),
                sig6(r.sd),
                sig6(r.median_se),
                sig6(r.coverage),
                sig6(r.fail_rate)
            );
        }
    }
    out
}

/// Markdown table: one block of rows per design, statistics as columns.
pub fn summary_markdown(summaries: &[StudySummary]) -> String {
    let mut out = String::from("| Design | N | Estimator | Median bias | SD | Median SE | Coverage |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for s in summaries {
        for r in &s.rows {
            let label = match r.estimator {
                EstimatorKind::OaxacaBlinder => "Oaxaca-Blinder",
                EstimatorKind::Gipw => "GIPW",
                EstimatorKind::Dr => "DR",
                EstimatorKind::Plm => "PLM",
            };
            let _ = writeln!(
                out,
                "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |",
                s.design, s.n, label, r.median_bias, r.sd, r.median_se, r.coverage
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn presets_match_calibration_table() {
        let d4 = Design::preset(4).unwrap();
        assert_eq!(
            (d4.alpha0, d4.gamma1, d4.gamma2, d4.beta0, d4.delta1, d4.delta2, d4.phi0, d4.phi1, d4.phi2),
            (1.5, 1.0, 0.5, 2.5, 1.05, 0.5, 0.1, 0.5, 0.1)
        );
        assert_eq!(Design::preset(2).unwrap().gps_truth_basis, GpsTruthBasis::Quadratic);
        assert_eq!(Design::preset(3).unwrap().gps_truth_basis, GpsTruthBasis::Linear);
        assert!(Design::preset(5).is_err());
    }

    #[test]
    fn noiseless_constant_slope_design_is_exact() {
        let d = Design {
            sigma_u: 0.0,
            gamma1: 0.0,
            delta1: 0.0,
            ..Design::preset(1).unwrap()
        };
        let data = draw_sample(&d, 200, &mut replicate_rng(1, 0)).unwrap();
        for i in 0..data.n() {
            assert_eq!(data.y[i], d.alpha0 + d.beta0 * data.x[(i, 0)]);
        }
    }

    #[test]
    fn draws_are_deterministic() {
        let d = Design::preset(2).unwrap();
        let a = draw_sample(&d, 50, &mut replicate_rng(9, 3)).unwrap();
        let b = draw_sample(&d, 50, &mut replicate_rng(9, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn summary_of_exact_replicates() {
        let row = summarize(EstimatorKind::Dr, &[(2.0, 1.0); 4], 2.0).unwrap();
        assert_eq!((row.median_bias, row.sd, row.coverage), (0.0, 0.0, 1.0));
        let single = summarize(EstimatorKind::Dr, &[(2.3, 0.1)], 2.0).unwrap();
        assert_relative_eq!(single.median_bias, 0.3, epsilon = 1e-12);
        assert_eq!(single.sd, 0.0);
    }

    #[test]
    fn coverage_mc_se_at_5000() {
        let row = summarize(EstimatorKind::Dr, &vec![(0.0, 1.0); 5000], 0.0).unwrap();
        assert_relative_eq!(row.coverage_mc_se, 0.003, epsilon = 1e-4);
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.050012345), "0.0500123");
        assert_eq!(sig6(-0.25971234), "-0.259712");
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(1.0), "1");
    }

    #[test]
    fn design_rejects_inconsistent_basis() {
        let d = Design {
            phi2: 0.1,
            gps_truth_basis: GpsTruthBasis::Linear,
            ..Design::preset(1).unwrap()
        };
        assert!(d.validate().is_err());
    }
}
