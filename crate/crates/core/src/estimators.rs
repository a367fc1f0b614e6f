//! Estimators of `beta = E[b(W)]`, the average conditional-linear-predictor
//! slope.
//!
//! Every estimator is a just-identified stacked moment system over
//! `theta = (phi, mu, lambda, beta)`:
//!
//! * `phi`: propensity score coefficients, moments = likelihood score;
//! * `mu`: mean of the CLP basis, moments = `k(W) - mu`;
//! * `lambda`: CLP working-model coefficients `(alpha, gamma, delta)`, moments `R U`;
//! * `beta`: the target, moments `Z U` with `Z` the propensity instrument
//!   (or `X` itself for Oaxaca-Blinder),
//!
//! where `U = Y - R' lambda - X' beta`. Blocks absent from an estimator are
//! simply dropped. Standard errors come from the sandwich of the full system,
//! so the sampling error of `phi` and `mu` is propagated.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::clp::ClpBasis;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gps::{GpsFamily, GpsFit, GpsKind};
use crate::mom::{numeric_jacobian, sandwich_from_rows, solve_guarded, solve_linear_iv, MomentSystem};

/// Two-sided 95% normal critical value.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    OaxacaBlinder,
    Gipw,
    Dr,
    Plm,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::OaxacaBlinder,
        EstimatorKind::Gipw,
        EstimatorKind::Dr,
        EstimatorKind::Plm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::OaxacaBlinder => "ob",
            EstimatorKind::Gipw => "gipw",
            EstimatorKind::Dr => "dr",
            EstimatorKind::Plm => "plm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ob" | "oaxaca" | "oaxaca_blinder" | "oaxaca-blinder" => Ok(EstimatorKind::OaxacaBlinder),
            "gipw" => Ok(EstimatorKind::Gipw),
            "dr" => Ok(EstimatorKind::Dr),
            "plm" => Ok(EstimatorKind::Plm),
            other => Err(Error::Config(format!(
                "unknown estimator '{other}' (expected ob, gipw, dr or plm)"
            ))),
        }
    }

    /// Comma-separated list; duplicates are dropped, order kept.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let k = Self::parse(part)?;
            if !out.contains(&k) {
                out.push(k);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("no estimator selected".into()));
        }
        Ok(out)
    }

    pub fn needs_gps(&self) -> bool {
        !matches!(self, EstimatorKind::OaxacaBlinder)
    }

    pub fn needs_clp(&self) -> bool {
        !matches!(self, EstimatorKind::Gipw)
    }
}

/// How the derivative of the stacked moments is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianForm {
    /// Exact sample derivative of every block.
    Exact,
    /// Blocks involving the propensity score use the information-equality
    /// forms `-mean(S S')` and `-mean(Z U S')`; everything else is exact.
    InformationEquality,
    /// Information equality, plus the population values of the instrument
    /// rows that hold under a correct score model: `E[Z R'] = 0` and
    /// `E[Z X'] = I`. The `beta` influence is then exactly
    /// `Z U - Pi S + M (k - mu)` with `M = mean(Z dU/dmu')`.
    Asymptotic,
    /// Central finite differences.
    Numeric,
}

impl JacobianForm {
    pub fn name(&self) -> &'static str {
        match self {
            JacobianForm::Exact => "exact",
            JacobianForm::InformationEquality => "information",
            JacobianForm::Asymptotic => "asymptotic",
            JacobianForm::Numeric => "numeric",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "exact" => Ok(JacobianForm::Exact),
            "information" | "information_equality" => Ok(JacobianForm::InformationEquality),
            "asymptotic" => Ok(JacobianForm::Asymptotic),
            "numeric" => Ok(JacobianForm::Numeric),
            other => Err(Error::Config(format!(
                "unknown jacobian form '{other}' (expected exact, information, asymptotic or numeric)"
            ))),
        }
    }

    /// Form used when none is requested.
    pub fn default_for(kind: EstimatorKind) -> Self {
        match kind {
            EstimatorKind::OaxacaBlinder => JacobianForm::Exact,
            EstimatorKind::Gipw => JacobianForm::InformationEquality,
            EstimatorKind::Dr | EstimatorKind::Plm => JacobianForm::Asymptotic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOptions {
    /// `None` selects [`JacobianForm::default_for`] the estimator.
    pub jacobian: Option<JacobianForm>,
    /// Propagate the estimation error of `phi`. Off gives the conservative
    /// variance that treats the propensity score as known.
    pub gps_correction: bool,
    /// When set, also form the exact analytic and numeric Jacobians and fail
    /// with [`Error::JacobianMismatch`] if they differ by more than this.
    pub check_jacobian: Option<f64>,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            jacobian: None,
            gps_correction: true,
            check_jacobian: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub estimator: EstimatorKind,
    pub gps: Option<GpsKind>,
    pub beta: Vec<f64>,
    /// `(alpha, gamma', delta')'` of the CLP working model, when estimated.
    pub nuisance: Option<Vec<f64>>,
    pub cov_beta: DMatrix<f64>,
    pub stderr: Vec<f64>,
    pub ci95: Vec<(f64, f64)>,
    /// `N x K`; `cov_beta = influence' influence / N^2`.
    pub influence: DMatrix<f64>,
    /// Full stacked parameter vector.
    pub theta: Vec<f64>,
    pub jacobian: DMatrix<f64>,
    pub layout: Layout,
    pub n: usize,
}

/// Block sizes of `theta`, in order `phi, mu, lambda, beta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Layout {
    pub phi: usize,
    pub mu: usize,
    pub lambda: usize,
    pub beta: usize,
}

impl Layout {
    pub fn total(&self) -> usize {
        self.phi + self.mu + self.lambda + self.beta
    }

    pub fn mu_start(&self) -> usize {
        self.phi
    }

    pub fn lambda_start(&self) -> usize {
        self.phi + self.mu
    }

    pub fn beta_start(&self) -> usize {
        self.phi + self.mu + self.lambda
    }
}

struct GpsPart<'a> {
    family: &'a GpsFamily,
    design: DMatrix<f64>,
    /// Held fixed (not part of `theta`) when the correction is off.
    fixed_phi: Option<Vec<f64>>,
}

struct ClpPart<'a> {
    clp: &'a ClpBasis,
    design: DMatrix<f64>,
}

/// Stacked moment system of one estimator on one dataset.
pub struct StackedSystem<'a> {
    data: &'a Dataset,
    gps: Option<GpsPart<'a>>,
    clp: Option<ClpPart<'a>>,
    own_instrument: bool,
    layout: Layout,
    phi_hat: Vec<f64>,
}

#[derive(Default)]
struct RowWork {
    x: Vec<f64>,
    kg: Vec<f64>,
    eta: Vec<f64>,
    e: Vec<f64>,
    kc: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
}

impl<'a> StackedSystem<'a> {
    /// `fit` enters the system when given; `own_instrument` selects `X` rather
    /// than the propensity instrument for the `beta` moments.
    pub fn new(
        data: &'a Dataset,
        fit: Option<&'a GpsFit>,
        clp: Option<&'a ClpBasis>,
        own_instrument: bool,
        gps_correction: bool,
    ) -> Result<Self> {
        let k = data.k();
        if k == 0 {
            return Err(Error::InvalidInput("at least one treatment column is required".into()));
        }
        if !own_instrument && fit.is_none() {
            return Err(Error::InvalidInput("the propensity instrument needs a fitted score".into()));
        }
        let gps = match fit {
            Some(f) => {
                if !f.converged {
                    return Err(Error::NonConvergence { iterations: f.iterations });
                }
                if f.family.kind.dim() != k {
                    return Err(Error::InvalidInput(format!(
                        "propensity score has {} categories, dataset has {k} treatment columns",
                        f.family.kind.dim()
                    )));
                }
                Some(GpsPart {
                    family: &f.family,
                    design: f.family.design_matrix(data),
                    fixed_phi: (!gps_correction).then(|| f.phi_hat.clone()),
                })
            }
            None => None,
        };
        let clp = clp.map(|c| ClpPart {
            clp: c,
            design: c.design_matrix(data),
        });
        let layout = Layout {
            phi: gps
                .as_ref()
                .filter(|g| g.fixed_phi.is_none())
                .map_or(0, |g| g.family.dim_phi()),
            mu: clp.as_ref().map_or(0, |c| c.clp.j()),
            lambda: clp.as_ref().map_or(0, |c| c.clp.dim_r(k)),
            beta: k,
        };
        if data.n() < layout.total() + 1 {
            return Err(Error::InvalidInput(format!(
                "{} rows is too few for {} parameters",
                data.n(),
                layout.total()
            )));
        }
        Ok(Self {
            data,
            gps,
            clp,
            own_instrument,
            layout,
            phi_hat: fit.map(|f| f.phi_hat.clone()).unwrap_or_default(),
        })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    fn work(&self) -> RowWork {
        let k = self.data.k();
        let (l, kd) = self
            .gps
            .as_ref()
            .map_or((0, 0), |g| (g.family.n_terms(), g.family.kind.dim()));
        let (j, dr) = self.clp.as_ref().map_or((0, 0), |c| (c.clp.j(), c.clp.dim_r(k)));
        RowWork {
            x: vec![0.0; k],
            kg: vec![0.0; l],
            eta: vec![0.0; kd],
            e: vec![0.0; kd],
            kc: vec![0.0; j],
            r: vec![0.0; dr],
            z: vec![0.0; k],
        }
    }

    fn phi<'t>(&'t self, theta: &'t [f64]) -> &'t [f64] {
        match &self.gps {
            Some(g) => g.fixed_phi.as_deref().unwrap_or(&theta[..self.layout.phi]),
            None => &[],
        }
    }

    /// Fills the row buffers at `theta` and returns the residual `U`.
    fn row_state(&self, i: usize, theta: &[f64], w: &mut RowWork) -> Result<f64> {
        let ly = self.layout;
        for (c, xv) in w.x.iter_mut().enumerate() {
            *xv = self.data.x[(i, c)];
        }
        if let Some(g) = &self.gps {
            for (j, kv) in w.kg.iter_mut().enumerate() {
                *kv = g.design[(i, j)];
            }
            g.family.index_into(self.phi(theta), &w.kg, &mut w.eta);
            g.family.kind.mean_into(&w.eta, &mut w.e);
        }
        let mut fitted = 0.0;
        if let Some(c) = &self.clp {
            for (j, kv) in w.kc.iter_mut().enumerate() {
                *kv = c.design[(i, j)];
            }
            let mu = &theta[ly.mu_start()..ly.lambda_start()];
            c.clp.r_from_basis(&w.kc, mu, &w.x, &mut w.r);
            let lambda = &theta[ly.lambda_start()..ly.beta_start()];
            fitted += w.r.iter().zip(lambda).map(|(a, b)| a * b).sum::<f64>();
        }
        let beta = &theta[ly.beta_start()..];
        fitted += w.x.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>();
        if self.own_instrument {
            w.z.copy_from_slice(&w.x);
        } else {
            let g = self.gps.as_ref().expect("instrument requires a score model");
            g.family.instrument_from_index(&w.eta, &w.x, i, &mut w.z)?;
        }
        Ok(self.data.y[i] - fitted)
    }

    fn write_moments(&self, i: usize, theta: &[f64], w: &mut RowWork, out: &mut [f64]) -> Result<()> {
        let ly = self.layout;
        let u = self.row_state(i, theta, w)?;
        if ly.phi > 0 {
            let l = w.kg.len();
            for c in 0..w.e.len() {
                let res = w.x[c] - w.e[c];
                for j in 0..l {
                    out[c * l + j] = res * w.kg[j];
                }
            }
        }
        let mu = &theta[ly.mu_start()..ly.lambda_start()];
        for j in 0..ly.mu {
            out[ly.mu_start() + j] = w.kc[j] - mu[j];
        }
        for (q, rv) in w.r.iter().enumerate() {
            out[ly.lambda_start() + q] = rv * u;
        }
        for (c, zv) in w.z.iter().enumerate() {
            out[ly.beta_start() + c] = zv * u;
        }
        Ok(())
    }

    /// Solves the system: `phi` and `mu` are plugged in, `(lambda, beta)`
    /// come from the linear IV fit with instruments `[R; Z]` and regressors
    /// `[R; X]`.
    pub fn solve(&self) -> Result<Vec<f64>> {
        let ly = self.layout;
        let n = self.data.n();
        let mut theta = vec![0.0; ly.total()];
        theta[..ly.phi].copy_from_slice(&self.phi_hat[..ly.phi]);
        if let Some(c) = &self.clp {
            theta[ly.mu_start()..ly.lambda_start()].copy_from_slice(&c.clp.mu_hat);
        }
        let width = ly.lambda + ly.beta;
        let mut q = DMatrix::zeros(n, width);
        let mut d = DMatrix::zeros(n, width);
        let mut w = self.work();
        for i in 0..n {
            self.row_state(i, &theta, &mut w)?;
            for (a, rv) in w.r.iter().enumerate() {
                q[(i, a)] = *rv;
                d[(i, a)] = *rv;
            }
            for c in 0..ly.beta {
                q[(i, ly.lambda + c)] = w.z[c];
                d[(i, ly.lambda + c)] = w.x[c];
            }
        }
        let coef = solve_linear_iv(&q, &d, &self.data.y)?;
        theta[ly.lambda_start()..].copy_from_slice(coef.as_slice());
        Ok(theta)
    }

    /// `N x dim` moment rows, failing on the first row whose instrument is
    /// undefined.
    pub fn checked_moment_rows(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        let m = self.layout.total();
        let mut out = DMatrix::zeros(self.data.n(), m);
        let mut w = self.work();
        let mut buf = vec![0.0; m];
        for i in 0..self.data.n() {
            self.write_moments(i, theta, &mut w, &mut buf)?;
            for (j, v) in buf.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFiniteMoment { coordinate: j });
                }
                out[(i, j)] = *v;
            }
        }
        Ok(out)
    }

    /// Analytic sample Jacobian `(1/N) sum dm_i/dtheta'`.
    pub fn analytic_jacobian(&self, theta: &[f64], form: JacobianForm) -> Result<DMatrix<f64>> {
        if form == JacobianForm::Numeric {
            return numeric_jacobian(self, theta);
        }
        let ly = self.layout;
        let dim = ly.total();
        let (ms, ls, bs) = (ly.mu_start(), ly.lambda_start(), ly.beta_start());
        let kd = ly.beta;
        let mut jac = DMatrix::zeros(dim, dim);
        let mut w = self.work();
        let mut score = vec![0.0; ly.phi];
        let mut q = vec![0.0; ly.lambda + ly.beta];
        let mut du_dmu = vec![0.0; ly.mu];
        let lambda = theta[ls..bs].to_vec();
        let interactions = self.clp.as_ref().is_some_and(|c| c.clp.include_interactions);
        for i in 0..self.data.n() {
            let u = self.row_state(i, theta, &mut w)?;
            let l = w.kg.len();
            if ly.phi > 0 {
                for c in 0..kd {
                    let res = w.x[c] - w.e[c];
                    for j in 0..l {
                        score[c * l + j] = res * w.kg[j];
                    }
                }
                match form {
                    JacobianForm::Exact => {
                        let v = self.gps.as_ref().unwrap().family.kind.variance(&w.e);
                        for a in 0..kd {
                            for b in 0..kd {
                                let vab = v[(a, b)];
                                for j in 0..l {
                                    for m in 0..l {
                                        jac[(a * l + j, b * l + m)] -= vab * w.kg[j] * w.kg[m];
                                    }
                                }
                            }
                        }
                    }
                    _ => {
                        for a in 0..ly.phi {
                            for b in 0..ly.phi {
                                jac[(a, b)] -= score[a] * score[b];
                            }
                        }
                    }
                }
            }
            q[..ly.lambda].copy_from_slice(&w.r);
            q[ly.lambda..].copy_from_slice(&w.z);
            // d/dphi of the Z U rows
            if ly.phi > 0 && !self.own_instrument {
                match form {
                    JacobianForm::Exact => {
                        let g = self.gps.as_ref().unwrap();
                        let dz = g.family.instrument_deta(&w.eta, &w.x);
                        for a in 0..kd {
                            for c in 0..kd {
                                for j in 0..l {
                                    jac[(bs + a, c * l + j)] += dz[(a, c)] * w.kg[j] * u;
                                }
                            }
                        }
                    }
                    _ => {
                        for a in 0..kd {
                            for b in 0..ly.phi {
                                jac[(bs + a, b)] -= w.z[a] * u * score[b];
                            }
                        }
                    }
                }
            }
            // d/dmu: (dR/dmu') U on the R rows plus Q (dU/dmu')
            if ly.mu > 0 {
                let jn = ly.mu;
                for a in 0..jn {
                    let mut d = lambda[1 + a];
                    jac[(ls + 1 + a, ms + a)] -= u;
                    if interactions {
                        for b in 0..kd {
                            d += lambda[1 + jn + a * kd + b] * w.x[b];
                            jac[(ls + 1 + jn + a * kd + b, ms + a)] -= w.x[b] * u;
                        }
                    }
                    du_dmu[a] = d;
                }
                for (p, qv) in q.iter().enumerate() {
                    for a in 0..jn {
                        jac[(ls + p, ms + a)] += qv * du_dmu[a];
                    }
                }
            }
            // d/dlambda and d/dbeta: -Q [R' X']
            for (p, qv) in q.iter().enumerate() {
                for (r, rv) in w.r.iter().enumerate() {
                    jac[(ls + p, ls + r)] -= qv * rv;
                }
                for (c, xv) in w.x.iter().enumerate() {
                    jac[(ls + p, bs + c)] -= qv * xv;
                }
            }
        }
        jac /= self.data.n() as f64;
        for a in 0..ly.mu {
            jac[(ms + a, ms + a)] = -1.0;
        }
        if form == JacobianForm::Asymptotic && !self.own_instrument {
            for a in 0..kd {
                for c in ls..bs {
                    jac[(bs + a, c)] = 0.0;
                }
                for c in 0..kd {
                    jac[(bs + a, bs + c)] = if a == c { -1.0 } else { 0.0 };
                }
            }
        }
        Ok(jac)
    }
}

impl MomentSystem for StackedSystem<'_> {
    fn n_obs(&self) -> usize {
        self.data.n()
    }

    fn dim_theta(&self) -> usize {
        self.layout.total()
    }

    fn moments(&self, row: usize, theta: &[f64], out: &mut [f64]) {
        let mut w = self.work();
        if self.write_moments(row, theta, &mut w, out).is_err() {
            out.fill(f64::NAN);
        }
    }
}

/// `max |a - b| / max(1, max |b|)`.
pub fn jacobian_discrepancy(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = b.amax().max(1.0);
    (a - b).amax() / scale
}

fn run(kind: EstimatorKind, system: &StackedSystem<'_>, opts: &EstimatorOptions) -> Result<Estimate> {
    let ly = system.layout();
    let n = system.data.n();
    let theta = system.solve()?;
    let rows = system.checked_moment_rows(&theta)?;
    let form = opts.jacobian.unwrap_or(JacobianForm::default_for(kind));
    let jacobian = system.analytic_jacobian(&theta, form)?;
    if let Some(tol) = opts.check_jacobian {
        let exact = if form == JacobianForm::Exact {
            jacobian.clone()
        } else {
            system.analytic_jacobian(&theta, JacobianForm::Exact)?
        };
        let numeric = numeric_jacobian(system, &theta)?;
        let discrepancy = jacobian_discrepancy(&exact, &numeric);
        if !(discrepancy <= tol) {
            return Err(Error::JacobianMismatch { discrepancy });
        }
    }
    let sw = sandwich_from_rows(&rows, &jacobian)?;
    let bs = ly.beta_start();
    let cov_beta = sw.block(bs, ly.beta);
    let jinv = solve_guarded(&jacobian, &DMatrix::identity(ly.total(), ly.total()), "stacked Jacobian")?;
    let jinv_beta = jinv.rows(bs, ly.beta).into_owned();
    let influence = -(&rows * jinv_beta.transpose());
    let beta: Vec<f64> = theta[bs..].to_vec();
    let stderr: Vec<f64> = (0..ly.beta).map(|k| cov_beta[(k, k)].max(0.0).sqrt()).collect();
    if beta.iter().chain(&stderr).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteMoment { coordinate: bs });
    }
    let ci95 = beta.iter().zip(&stderr).map(|(b, s)| (b - Z_95 * s, b + Z_95 * s)).collect();
    let nuisance = (ly.lambda > 0).then(|| theta[ly.lambda_start()..bs].to_vec());
    Ok(Estimate {
        estimator: kind,
        gps: system.gps.as_ref().map(|g| g.family.kind),
        beta,
        nuisance,
        cov_beta,
        stderr,
        ci95,
        influence,
        theta,
        jacobian,
        layout: ly,
        n,
    })
}

/// Builds the stacked system an estimator solves.
pub fn stacked_system<'a>(
    kind: EstimatorKind,
    data: &'a Dataset,
    fit: Option<&'a GpsFit>,
    clp: Option<&'a ClpBasis>,
    opts: &EstimatorOptions,
) -> Result<StackedSystem<'a>> {
    let need = |what: &str| Error::InvalidInput(format!("{} requires {what}", kind.name()));
    match kind {
        EstimatorKind::OaxacaBlinder => {
            let clp = clp.ok_or_else(|| need("a CLP basis"))?;
            if !clp.include_interactions {
                return Err(Error::InvalidInput("ob uses the interacted CLP basis".into()));
            }
            StackedSystem::new(data, None, Some(clp), true, false)
        }
        EstimatorKind::Gipw => {
            let fit = fit.ok_or_else(|| need("a propensity score fit"))?;
            StackedSystem::new(data, Some(fit), None, false, opts.gps_correction)
        }
        EstimatorKind::Dr | EstimatorKind::Plm => {
            let fit = fit.ok_or_else(|| need("a propensity score fit"))?;
            let clp = clp.ok_or_else(|| need("a CLP basis"))?;
            let want = kind == EstimatorKind::Dr;
            if clp.include_interactions != want {
                return Err(Error::InvalidInput(format!(
                    "{} needs include_interactions = {want}",
                    kind.name()
                )));
            }
            StackedSystem::new(data, Some(fit), Some(clp), false, opts.gps_correction)
        }
    }
}

/// Dispatches on `kind`. `clp` must carry interactions for ob and dr and
/// none for plm; it is ignored by gipw.
pub fn estimate(
    kind: EstimatorKind,
    data: &Dataset,
    fit: Option<&GpsFit>,
    clp: Option<&ClpBasis>,
    opts: &EstimatorOptions,
) -> Result<Estimate> {
    let system = stacked_system(kind, data, fit, clp, opts)?;
    run(kind, &system, opts)
}

/// Least squares of `Y` on `(1, k - mu, (k - mu) ⊗ X, X)`.
pub fn oaxaca_blinder(data: &Dataset, clp: &ClpBasis) -> Result<Estimate> {
    estimate(EstimatorKind::OaxacaBlinder, data, None, Some(clp), &EstimatorOptions::default())
}

/// IV fit of `Y` on `X` (no constant) with the propensity instrument.
pub fn gipw(data: &Dataset, fit: &GpsFit) -> Result<Estimate> {
    gipw_with(data, fit, &EstimatorOptions::default())
}

pub fn gipw_with(data: &Dataset, fit: &GpsFit, opts: &EstimatorOptions) -> Result<Estimate> {
    estimate(EstimatorKind::Gipw, data, Some(fit), None, opts)
}

/// IV fit of `Y` on `(R, X)` with instruments `(R, Z)`.
pub fn dr(data: &Dataset, fit: &GpsFit, clp: &ClpBasis) -> Result<Estimate> {
    dr_with(data, fit, clp, &EstimatorOptions::default())
}

pub fn dr_with(data: &Dataset, fit: &GpsFit, clp: &ClpBasis, opts: &EstimatorOptions) -> Result<Estimate> {
    estimate(EstimatorKind::Dr, data, Some(fit), Some(clp), opts)
}

/// The doubly robust machinery without the interaction block of `R`.
pub fn plm(data: &Dataset, fit: &GpsFit, clp: &ClpBasis) -> Result<Estimate> {
    estimate(EstimatorKind::Plm, data, Some(fit), Some(clp), &EstimatorOptions::default())
}

/// `(1/N) sum psi_i psi_i'` for an `N x K` influence matrix.
pub fn influence_covariance(influence: &DMatrix<f64>) -> DMatrix<f64> {
    let n = influence.nrows() as f64;
    influence.tr_mul(influence) / (n * n)
}

/// Mean of the influence columns.
pub fn influence_mean(influence: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(influence.ncols(), |k, _| influence.column(k).mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSpec;
    use crate::gps::fit_mle;
    use approx::assert_relative_eq;

    fn names() -> Vec<String> {
        vec!["w".into()]
    }

    fn toy() -> Dataset {
        let w = vec![-1.2, -0.4, 0.3, 0.9, 1.5, -0.7, 0.1, 2.0, -1.8, 0.6, 1.1, -0.2];
        let x = vec![0.0, 1.0, 1.0, 2.0, 3.0, 0.0, 1.0, 4.0, 0.0, 2.0, 1.0, 1.0];
        let y: Vec<f64> = w
            .iter()
            .zip(&x)
            .enumerate()
            .map(|(i, (w, x))| 1.0 + 0.5 * w + (2.0 + 0.3 * w) * x + ((i * 7 % 5) as f64 - 2.0) * 0.1)
            .collect();
        Dataset::from_columns(&y, &[x], &[w]).unwrap()
    }

    fn poisson_fit(d: &Dataset) -> GpsFit {
        let fam = GpsFamily::new(GpsKind::PoissonLog, BasisSpec::linear_with_constant(&names())).unwrap();
        fit_mle(&fam, d).unwrap()
    }

    #[test]
    fn ob_without_controls_is_ols_slope() {
        let d = toy();
        let clp = ClpBasis::fit(BasisSpec::new(vec![], names()).unwrap(), &d, true).unwrap();
        let est = oaxaca_blinder(&d, &clp).unwrap();
        let xm = d.x.column(0).mean();
        let ym = d.y.mean();
        let sxy: f64 = (0..d.n()).map(|i| (d.x[(i, 0)] - xm) * (d.y[i] - ym)).sum();
        let sxx: f64 = (0..d.n()).map(|i| (d.x[(i, 0)] - xm).powi(2)).sum();
        assert_relative_eq!(est.beta[0], sxy / sxx, epsilon = 1e-10);
    }

    #[test]
    fn gipw_constant_score_is_projection_slope() {
        let x = vec![0.0, 1.0, 3.0, 2.0, 4.0];
        let y = vec![1.0, 2.5, 7.0, 4.0, 10.0];
        let d = Dataset::from_columns(&y, std::slice::from_ref(&x), &[vec![0.0; 5]]).unwrap();
        let fam = GpsFamily::new(GpsKind::PoissonLog, BasisSpec::constant_only(&names())).unwrap();
        let fit = fit_mle(&fam, &d).unwrap();
        let est = gipw(&d, &fit).unwrap();
        // Poisson with a constant: e = v = mean(x) = 2
        let z: Vec<f64> = x.iter().map(|v| (v - 2.0) / 2.0).collect();
        let num: f64 = z.iter().zip(&y).map(|(a, b)| a * b).sum();
        let den: f64 = z.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert_relative_eq!(est.beta[0], num / den, epsilon = 1e-10);
    }

    #[test]
    fn defining_moments_vanish() {
        let d = toy();
        let fit = poisson_fit(&d);
        let clp = ClpBasis::fit(BasisSpec::linear(&names()), &d, true).unwrap();
        for kind in [EstimatorKind::OaxacaBlinder, EstimatorKind::Gipw, EstimatorKind::Dr] {
            let est = estimate(kind, &d, Some(&fit), Some(&clp), &EstimatorOptions::default()).unwrap();
            let sys = stacked_system(kind, &d, Some(&fit), Some(&clp), &EstimatorOptions::default()).unwrap();
            let m = crate::mom::mean_moments(&sys, &est.theta);
            assert!(m.amax() < 1e-8, "{kind:?}: {m}");
            assert!(influence_mean(&est.influence).amax() < 1e-8);
            assert_relative_eq!(influence_covariance(&est.influence), est.cov_beta, max_relative = 1e-8);
            assert_relative_eq!(est.ci95[0].1 - est.beta[0], 1.96 * est.stderr[0], epsilon = 1e-12);
        }
    }

    #[test]
    fn exact_jacobian_matches_numeric() {
        let d = toy();
        let fit = poisson_fit(&d);
        let clp = ClpBasis::fit(BasisSpec::linear(&names()), &d, true).unwrap();
        let opts = EstimatorOptions {
            jacobian: Some(JacobianForm::Exact),
            check_jacobian: Some(1e-4),
            ..Default::default()
        };
        for kind in [EstimatorKind::OaxacaBlinder, EstimatorKind::Gipw, EstimatorKind::Dr] {
            estimate(kind, &d, Some(&fit), Some(&clp), &opts).unwrap();
        }
    }

    #[test]
    fn uncorrected_gipw_drops_score_block() {
        let d = toy();
        let fit = poisson_fit(&d);
        let opts = EstimatorOptions {
            gps_correction: false,
            ..Default::default()
        };
        let a = gipw_with(&d, &fit, &opts).unwrap();
        let b = gipw(&d, &fit).unwrap();
        assert_eq!(a.layout.phi, 0);
        assert_relative_eq!(a.beta[0], b.beta[0], epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let d = toy();
        let fit = poisson_fit(&d);
        let plain = ClpBasis::fit(BasisSpec::linear(&names()), &d, false).unwrap();
        assert!(dr(&d, &fit, &plain).is_err());
        let mut bad = fit.clone();
        bad.converged = false;
        assert!(matches!(gipw(&d, &bad), Err(Error::NonConvergence { .. })));
        let tiny = Dataset::from_columns(&[1.0, 2.0], &[vec![0.0, 1.0]], &[vec![0.0, 1.0]]).unwrap();
        let clp = ClpBasis::fit(BasisSpec::linear(&names()), &tiny, true).unwrap();
        assert!(matches!(oaxaca_blinder(&tiny, &clp), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn estimator_names_round_trip() {
        for k in EstimatorKind::ALL {
            assert_eq!(EstimatorKind::parse(k.name()).unwrap(), k);
        }
        assert_eq!(
            EstimatorKind::parse_list("ob, dr,ob").unwrap(),
            vec![EstimatorKind::OaxacaBlinder, EstimatorKind::Dr]
        );
        assert!(EstimatorKind::parse_list("x").is_err());
    }
}
