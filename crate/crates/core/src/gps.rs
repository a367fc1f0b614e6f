//! Parametric generalized propensity scores `f(x | w; phi)`.
//!
//! All three families use canonical links, so per row the score is
//! `(x - e(eta)) ⊗ k(w)` and the information is `v(eta) ⊗ k(w) k(w)'`.
//! Coefficients are stored category-major: `phi[c * L + l]`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mom::{solve_vec_guarded, CONDITION_LIMIT};

pub const MAX_NEWTON_ITERATIONS: usize = 100;
pub const MAX_STEP_HALVINGS: usize = 50;
pub const SCORE_TOLERANCE: f64 = 1e-10;
/// Newton step size, relative to `1 + |phi|`, below which the fit has converged.
pub const STEP_TOLERANCE: f64 = 1e-8;
/// Smallest admissible eigenvalue (or probability) of the conditional variance.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpsKind {
    BernoulliLogit,
    PoissonLog,
    /// `categories` non-base categories; category 0 is the base.
    MultinomialLogit { categories: usize },
}

impl GpsKind {
    /// Treatment dimension `K`.
    pub fn dim(&self) -> usize {
        match self {
            GpsKind::BernoulliLogit | GpsKind::PoissonLog => 1,
            GpsKind::MultinomialLogit { categories } => *categories,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GpsKind::BernoulliLogit => "logit",
            GpsKind::PoissonLog => "poisson",
            GpsKind::MultinomialLogit { .. } => "multinomial",
        }
    }

    /// CLI family string; `k` is the treatment width (multinomial only).
    pub fn from_name(name: &str, k: usize) -> Result<Self> {
        match name {
            "logit" | "bernoulli" | "bernoulli_logit" => Ok(GpsKind::BernoulliLogit),
            "poisson" | "poisson_log" => Ok(GpsKind::PoissonLog),
            "multinomial" | "multinomial_logit" => Ok(GpsKind::MultinomialLogit { categories: k }),
            other => Err(Error::Config(format!(
                "unknown propensity family '{other}' (expected logit, poisson or multinomial)"
            ))),
        }
    }

    pub(crate) fn mean_into(&self, eta: &[f64], e: &mut [f64]) -> f64 {
        match self {
            GpsKind::BernoulliLogit => {
                e[0] = sigmoid(eta[0]);
                1.0 - e[0]
            }
            GpsKind::PoissonLog => {
                e[0] = eta[0].exp();
                f64::NAN
            }
            GpsKind::MultinomialLogit { .. } => softmax_with_base(eta, e),
        }
    }

    fn loglik(&self, eta: &[f64], x: &[f64]) -> f64 {
        match self {
            GpsKind::BernoulliLogit => x[0] * eta[0] - softplus(eta[0]),
            GpsKind::PoissonLog => x[0] * eta[0] - eta[0].exp() - libm::lgamma(x[0] + 1.0),
            GpsKind::MultinomialLogit { .. } => {
                let m = eta.iter().fold(0.0f64, |a, &b| a.max(b));
                let lse = m + ((-m).exp() + eta.iter().map(|v| (v - m).exp()).sum::<f64>()).ln();
                eta.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - lse
            }
        }
    }

    /// Conditional variance matrix given the mean vector.
    pub(crate) fn variance(&self, e: &[f64]) -> DMatrix<f64> {
        match self {
            GpsKind::BernoulliLogit => DMatrix::from_element(1, 1, e[0] * (1.0 - e[0])),
            GpsKind::PoissonLog => DMatrix::from_element(1, 1, e[0]),
            GpsKind::MultinomialLogit { .. } => {
                let k = e.len();
                DMatrix::from_fn(k, k, |a, b| if a == b { e[a] - e[a] * e[b] } else { -e[a] * e[b] })
            }
        }
    }

    fn check_support(&self, row: usize, x: &[f64]) -> Result<bool> {
        let bad = |value: f64| Error::SupportViolation {
            row,
            value,
            family: self.name(),
        };
        match self {
            GpsKind::BernoulliLogit => {
                if x[0] != 0.0 && x[0] != 1.0 {
                    return Err(bad(x[0]));
                }
                Ok(false)
            }
            GpsKind::PoissonLog => {
                if !(x[0] >= 0.0) || !x[0].is_finite() {
                    return Err(bad(x[0]));
                }
                Ok(x[0].fract() != 0.0)
            }
            GpsKind::MultinomialLogit { .. } => {
                let mut total = 0.0;
                for &v in x {
                    if v != 0.0 && v != 1.0 {
                        return Err(bad(v));
                    }
                    total += v;
                }
                if total > 1.0 {
                    return Err(bad(total));
                }
                Ok(false)
            }
        }
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Writes the non-base probabilities into `p` and returns the base probability.
fn softmax_with_base(eta: &[f64], p: &mut [f64]) -> f64 {
    let m = eta.iter().fold(0.0f64, |a, &b| a.max(b));
    let base = (-m).exp();
    let mut total = base;
    for (pk, &v) in p.iter_mut().zip(eta) {
        *pk = (v - m).exp();
        total += *pk;
    }
    for pk in p.iter_mut() {
        *pk /= total;
    }
    base / total
}

/// Closed-form inverse of the multinomial variance `diag(p) - p p'`:
/// `diag(1/p) + (1/p0) ι ι'`.
pub fn multinomial_vinv(p: &[f64], p0: f64) -> Result<DMatrix<f64>> {
    if p.is_empty() {
        return Err(Error::InvalidInput("empty probability vector".into()));
    }
    let total: f64 = p.iter().sum::<f64>() + p0;
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "category probabilities sum to {total}, expected 1"
        )));
    }
    if p.iter().chain(std::iter::once(&p0)).any(|&q| !(q > VARIANCE_FLOOR)) {
        return Err(Error::DegenerateVariance { row: 0 });
    }
    let k = p.len();
    Ok(DMatrix::from_fn(k, k, |a, b| {
        let d = if a == b { 1.0 / p[a] } else { 0.0 };
        d + 1.0 / p0
    }))
}

/// A propensity family together with the basis `k(W)` of its index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsFamily {
    pub kind: GpsKind,
    pub basis: BasisSpec,
}

impl GpsFamily {
    pub fn new(kind: GpsKind, basis: BasisSpec) -> Result<Self> {
        if basis.is_empty() {
            return Err(Error::InvalidInput("propensity basis needs at least one term".into()));
        }
        if let GpsKind::MultinomialLogit { categories } = kind {
            if categories < 2 {
                return Err(Error::InvalidInput(
                    "multinomial family needs at least two non-base categories (use logit)".into(),
                ));
            }
        }
        Ok(Self { kind, basis })
    }

    pub fn n_terms(&self) -> usize {
        self.basis.len()
    }

    /// Length of `phi`: `L * K`.
    pub fn dim_phi(&self) -> usize {
        self.basis.len() * self.kind.dim()
    }

    /// `N x L` matrix of basis evaluations.
    pub fn design_matrix(&self, data: &Dataset) -> DMatrix<f64> {
        let l = self.basis.len();
        let mut out = DMatrix::zeros(data.n(), l);
        let mut buf = vec![0.0; l];
        for i in 0..data.n() {
            self.basis.eval_into(&data.w_row(i), &mut buf);
            for (j, v) in buf.iter().enumerate() {
                out[(i, j)] = *v;
            }
        }
        out
    }

    pub fn index_into(&self, phi: &[f64], k_row: &[f64], eta: &mut [f64]) {
        let l = k_row.len();
        for (c, e) in eta.iter_mut().enumerate() {
            *e = k_row.iter().zip(&phi[c * l..(c + 1) * l]).map(|(a, b)| a * b).sum();
        }
    }

    pub fn index(&self, phi: &[f64], k_row: &[f64]) -> Vec<f64> {
        let mut eta = vec![0.0; self.kind.dim()];
        self.index_into(phi, k_row, &mut eta);
        eta
    }

    pub fn row_loglik(&self, phi: &[f64], x: &[f64], k_row: &[f64]) -> f64 {
        self.kind.loglik(&self.index(phi, k_row), x)
    }

    /// Score `(x - e) ⊗ k` of one row.
    pub fn row_score(&self, phi: &[f64], x: &[f64], k_row: &[f64], out: &mut [f64]) {
        let kd = self.kind.dim();
        let l = k_row.len();
        let eta = self.index(phi, k_row);
        let mut e = vec![0.0; kd];
        self.kind.mean_into(&eta, &mut e);
        for c in 0..kd {
            let r = x[c] - e[c];
            for j in 0..l {
                out[c * l + j] = r * k_row[j];
            }
        }
    }

    /// Conditional mean and variance at `k_row`.
    pub fn mean_var_at(&self, phi: &[f64], k_row: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let eta = self.index(phi, k_row);
        if eta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite propensity index".into()));
        }
        let mut e = vec![0.0; self.kind.dim()];
        self.kind.mean_into(&eta, &mut e);
        let v = self.kind.variance(&e);
        Ok((DVector::from_vec(e), v))
    }

    /// `v^-1 (x - e)` at `k_row`; `row` is only used for error reporting.
    pub fn instrument_at(&self, phi: &[f64], x: &[f64], k_row: &[f64], row: usize) -> Result<DVector<f64>> {
        let eta = self.index(phi, k_row);
        let mut z = vec![0.0; self.kind.dim()];
        self.instrument_from_index(&eta, x, row, &mut z)?;
        Ok(DVector::from_vec(z))
    }

    pub(crate) fn instrument_from_index(&self, eta: &[f64], x: &[f64], row: usize, z: &mut [f64]) -> Result<()> {
        match self.kind {
            GpsKind::BernoulliLogit => {
                let e = sigmoid(eta[0]);
                if !(e * (1.0 - e) >= VARIANCE_FLOOR) {
                    return Err(Error::DegenerateVariance { row });
                }
                z[0] = x[0] / e - (1.0 - x[0]) / (1.0 - e);
            }
            GpsKind::PoissonLog => {
                let e = eta[0].exp();
                if !(e >= VARIANCE_FLOOR) || !e.is_finite() {
                    return Err(Error::DegenerateVariance { row });
                }
                z[0] = (x[0] - e) / e;
            }
            GpsKind::MultinomialLogit { .. } => {
                let mut p = vec![0.0; eta.len()];
                let p0 = softmax_with_base(eta, &mut p);
                let v = self.kind.variance(&p);
                let min_eig = SymmetricEigen::new(v).eigenvalues.min();
                if !(min_eig >= VARIANCE_FLOOR) {
                    return Err(Error::DegenerateVariance { row });
                }
                let vinv = multinomial_vinv(&p, p0).map_err(|_| Error::DegenerateVariance { row })?;
                let resid = DVector::from_fn(p.len(), |k, _| x[k] - p[k]);
                let zz = vinv * resid;
                z.copy_from_slice(zz.as_slice());
            }
        }
        Ok(())
    }

    /// `dZ/deta'` (K x K) at a row.
    pub(crate) fn instrument_deta(&self, eta: &[f64], x: &[f64]) -> DMatrix<f64> {
        match self.kind {
            GpsKind::BernoulliLogit => {
                let e = sigmoid(eta[0]);
                DMatrix::from_element(1, 1, -x[0] * (1.0 - e) / e - (1.0 - x[0]) * e / (1.0 - e))
            }
            GpsKind::PoissonLog => DMatrix::from_element(1, 1, -x[0] / eta[0].exp()),
            GpsKind::MultinomialLogit { .. } => {
                let k = eta.len();
                let mut p = vec![0.0; k];
                let p0 = softmax_with_base(eta, &mut p);
                let x0 = 1.0 - x.iter().sum::<f64>();
                DMatrix::from_fn(k, k, |a, c| {
                    let kron = if a == c { 1.0 } else { 0.0 };
                    -x[a] * (kron - p[c]) / p[a] - x0 * p[c] / p0
                })
            }
        }
    }

    /// `dZ/dphi'` (K x LK) at a row.
    pub fn instrument_dphi(&self, phi: &[f64], x: &[f64], k_row: &[f64]) -> DMatrix<f64> {
        let eta = self.index(phi, k_row);
        let d = self.instrument_deta(&eta, x);
        let kd = self.kind.dim();
        let l = k_row.len();
        DMatrix::from_fn(kd, kd * l, |a, col| d[(a, col / l)] * k_row[col % l])
    }

    /// Sample log-likelihood, mean score (length LK) and mean information.
    fn likelihood_pieces(
        &self,
        phi: &[f64],
        design: &DMatrix<f64>,
        data: &Dataset,
    ) -> (f64, DVector<f64>, DMatrix<f64>) {
        let kd = self.kind.dim();
        let l = design.ncols();
        let p = kd * l;
        let mut ll = 0.0;
        let mut grad = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        let mut k_row = vec![0.0; l];
        let mut eta = vec![0.0; kd];
        let mut e = vec![0.0; kd];
        let mut x = vec![0.0; kd];
        for i in 0..data.n() {
            for j in 0..l {
                k_row[j] = design[(i, j)];
            }
            for (c, xc) in x.iter_mut().enumerate() {
                *xc = data.x[(i, c)];
            }
            self.index_into(phi, &k_row, &mut eta);
            ll += self.kind.loglik(&eta, &x);
            self.kind.mean_into(&eta, &mut e);
            for c in 0..kd {
                let r = x[c] - e[c];
                for j in 0..l {
                    grad[c * l + j] += r * k_row[j];
                }
            }
            let v = self.kind.variance(&e);
            for a in 0..kd {
                for b in 0..kd {
                    let vab = v[(a, b)];
                    if vab == 0.0 {
                        continue;
                    }
                    for j in 0..l {
                        for m in 0..l {
                            info[(a * l + j, b * l + m)] += vab * k_row[j] * k_row[m];
                        }
                    }
                }
            }
        }
        let n = data.n() as f64;
        (ll, grad / n, info / n)
    }

    fn sample_loglik(&self, phi: &[f64], design: &DMatrix<f64>, data: &Dataset) -> f64 {
        let kd = self.kind.dim();
        let l = design.ncols();
        let mut k_row = vec![0.0; l];
        let mut x = vec![0.0; kd];
        let mut ll = 0.0;
        for i in 0..data.n() {
            for j in 0..l {
                k_row[j] = design[(i, j)];
            }
            for (c, xc) in x.iter_mut().enumerate() {
                *xc = data.x[(i, c)];
            }
            ll += self.row_loglik(phi, &x, &k_row);
        }
        ll
    }
}

/// Fitted propensity model.
#[derive(Debug, Clone, Serialize)]
pub struct GpsFit {
    pub family: GpsFamily,
    /// `L * K` coefficients, category-major.
    pub phi_hat: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Poisson fitted to non-integer counts (quasi-likelihood reading).
    pub non_integer_counts: bool,
}

impl GpsFit {
    pub fn kind(&self) -> GpsKind {
        self.family.kind
    }

    /// Coefficients as an `L x K` matrix.
    pub fn phi_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.family.n_terms(), self.family.kind.dim(), &self.phi_hat)
    }

    pub fn mean_var(&self, w_row: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        mean_var(self, w_row)
    }

    pub fn instrument(&self, x_row: &[f64], w_row: &[f64]) -> Result<DVector<f64>> {
        instrument(self, x_row, w_row)
    }
}

/// Maximum likelihood by Newton's method with step halving from `phi = 0`.
pub fn fit_mle(family: &GpsFamily, data: &Dataset) -> Result<GpsFit> {
    let kd = family.kind.dim();
    if data.k() != kd {
        return Err(Error::InvalidInput(format!(
            "{} family expects {kd} treatment column(s), dataset has {}",
            family.kind.name(),
            data.k()
        )));
    }
    let mut non_integer = false;
    for i in 0..data.n() {
        non_integer |= family.kind.check_support(i, &data.x_row(i))?;
    }
    let design = family.design_matrix(data);
    fit_with_design(family, data, &design, non_integer)
}

pub(crate) fn fit_with_design(
    family: &GpsFamily,
    data: &Dataset,
    design: &DMatrix<f64>,
    non_integer_counts: bool,
) -> Result<GpsFit> {
    let p = family.dim_phi();
    let mut phi = vec![0.0; p];
    let mut converged = false;
    let mut iterations = 0;
    let (mut ll, mut grad, mut info) = family.likelihood_pieces(&phi, design, data);
    while iterations < MAX_NEWTON_ITERATIONS {
        let step = solve_vec_guarded(&info, &grad, "propensity information matrix").map_err(|e| match e {
            Error::SingularSystem { .. } => Error::Separation { iterations },
            other => other,
        })?;
        // a vanishing score alone is not enough: under separation it decays
        // while the Newton step stays large
        let phi_norm = phi.iter().map(|v| v * v).sum::<f64>().sqrt();
        if grad.norm() < SCORE_TOLERANCE && step.norm() <= STEP_TOLERANCE * (1.0 + phi_norm) {
            converged = true;
            break;
        }
        iterations += 1;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_STEP_HALVINGS {
            let cand: Vec<f64> = phi.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let ll_c = family.sample_loglik(&cand, design, data);
            if ll_c.is_finite() && ll_c >= ll - 1e-12 * ll.abs().max(1.0) {
                accepted = Some(cand);
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some(cand) => phi = cand,
            None => return Err(Error::Separation { iterations }),
        }
        (ll, grad, info) = family.likelihood_pieces(&phi, design, data);
        if !(crate::mom::condition_number(&info) < CONDITION_LIMIT) {
            return Err(Error::Separation { iterations });
        }
    }
    Ok(GpsFit {
        family: family.clone(),
        phi_hat: phi,
        loglik: ll,
        converged,
        iterations,
        non_integer_counts,
    })
}

/// Conditional mean `e(w; phi_hat)` and variance `v(w; phi_hat)`.
pub fn mean_var(fit: &GpsFit, w_row: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let k_row = fit.family.basis.eval(w_row);
    fit.family.mean_var_at(&fit.phi_hat, &k_row)
}

/// The instrument `v(w; phi_hat)^-1 (x - e(w; phi_hat))`.
pub fn instrument(fit: &GpsFit, x_row: &[f64], w_row: &[f64]) -> Result<DVector<f64>> {
    let k_row = fit.family.basis.eval(w_row);
    fit.family.instrument_at(&fit.phi_hat, x_row, &k_row, 0)
}

/// `N x LK` matrix of per-row scores at `phi_hat`.
pub fn score_rows(fit: &GpsFit, data: &Dataset) -> DMatrix<f64> {
    let design = fit.family.design_matrix(data);
    score_rows_with_design(&fit.family, &fit.phi_hat, &design, data)
}

pub(crate) fn score_rows_with_design(
    family: &GpsFamily,
    phi: &[f64],
    design: &DMatrix<f64>,
    data: &Dataset,
) -> DMatrix<f64> {
    let p = family.dim_phi();
    let mut out = DMatrix::zeros(data.n(), p);
    let mut buf = vec![0.0; p];
    let l = design.ncols();
    let mut k_row = vec![0.0; l];
    for i in 0..data.n() {
        for j in 0..l {
            k_row[j] = design[(i, j)];
        }
        family.row_score(phi, &data.x_row(i), &k_row, &mut buf);
        for (j, v) in buf.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    out
}

/// Mean per-row Hessian of the log-likelihood, `-(1/N) sum v ⊗ k k'`.
pub fn mean_hessian(family: &GpsFamily, phi: &[f64], data: &Dataset) -> DMatrix<f64> {
    let design = family.design_matrix(data);
    -family.likelihood_pieces(phi, &design, data).2
}
