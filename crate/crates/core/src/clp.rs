//! Conditional linear predictor utilities.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::basis::BasisSpec;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mom::solve_vec_guarded;
use crate::rng::stream_rng;
use crate::simulate::Design;

/// Control basis `k(W)` for the CLP working model together with its sample
/// mean. Regressors are `R = (1, (k - mu)', ((k - mu) ⊗ x)')'`, the last
/// block only when `include_interactions` is set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClpBasis {
    pub basis: BasisSpec,
    pub mu_hat: Vec<f64>,
    pub include_interactions: bool,
}

impl ClpBasis {
    /// Evaluates the basis on `data` and stores its sample mean.
    pub fn fit(basis: BasisSpec, data: &Dataset, include_interactions: bool) -> Result<Self> {
        let j = basis.len();
        let mut mu = vec![0.0; j];
        let mut buf = vec![0.0; j];
        for i in 0..data.n() {
            basis.eval_into(&data.w_row(i), &mut buf);
            for (m, v) in mu.iter_mut().zip(&buf) {
                *m += v;
            }
        }
        let n = data.n() as f64;
        mu.iter_mut().for_each(|m| *m /= n);
        Self::with_mean(basis, mu, include_interactions)
    }

    pub fn with_mean(basis: BasisSpec, mu_hat: Vec<f64>, include_interactions: bool) -> Result<Self> {
        if basis.has_constant() {
            return Err(Error::InvalidInput(
                "CLP basis must not contain a constant term (R already has an intercept)".into(),
            ));
        }
        if mu_hat.len() != basis.len() {
            return Err(Error::InvalidInput("basis mean has the wrong length".into()));
        }
        Ok(Self {
            basis,
            mu_hat,
            include_interactions,
        })
    }

    pub fn j(&self) -> usize {
        self.basis.len()
    }

    /// Length of `R` for `k` treatments.
    pub fn dim_r(&self, k: usize) -> usize {
        let j = self.j();
        1 + j + if self.include_interactions { j * k } else { 0 }
    }

    /// Builds `R` from already evaluated basis values `k_row` and centring `mu`.
    pub fn r_from_basis(&self, k_row: &[f64], mu: &[f64], x: &[f64], out: &mut [f64]) {
        let j = k_row.len();
        out[0] = 1.0;
        for a in 0..j {
            out[1 + a] = k_row[a] - mu[a];
        }
        if self.include_interactions {
            let kd = x.len();
            for a in 0..j {
                let c = k_row[a] - mu[a];
                for (b, xb) in x.iter().enumerate() {
                    out[1 + j + a * kd + b] = c * xb;
                }
            }
        }
    }

    pub fn build_r(&self, w_row: &[f64], x_row: &[f64]) -> Vec<f64> {
        let k_row = self.basis.eval(w_row);
        let mut out = vec![0.0; self.dim_r(x_row.len())];
        self.r_from_basis(&k_row, &self.mu_hat, x_row, &mut out);
        out
    }

    /// `N x J` matrix of basis evaluations.
    pub fn design_matrix(&self, data: &Dataset) -> DMatrix<f64> {
        let j = self.j();
        let mut out = DMatrix::zeros(data.n(), j);
        let mut buf = vec![0.0; j];
        for i in 0..data.n() {
            self.basis.eval_into(&data.w_row(i), &mut buf);
            for (c, v) in buf.iter().enumerate() {
                out[(i, c)] = *v;
            }
        }
        out
    }
}

pub fn build_r(clp: &ClpBasis, w_row: &[f64], x_row: &[f64]) -> Vec<f64> {
    clp.build_r(w_row, x_row)
}

/// One control cell of the brute-force CLP.
#[derive(Debug, Clone, Serialize)]
pub struct ClpCell {
    pub w: Vec<f64>,
    pub count: usize,
    pub intercept: f64,
    pub slope: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BruteForceClp {
    pub cells: Vec<ClpCell>,
    /// Cell-frequency weighted average of the slopes.
    pub beta: Vec<f64>,
}

/// Per-cell least squares of `Y` on `(1, X)` for discrete controls.
pub fn brute_force_clp(data: &Dataset) -> Result<BruteForceClp> {
    let kd = data.k();
    let mut groups: BTreeMap<Vec<u64>, Vec<usize>> = BTreeMap::new();
    for i in 0..data.n() {
        let key = data.w.row(i).iter().map(|v| v.to_bits()).collect();
        groups.entry(key).or_default().push(i);
    }
    let mut cells = Vec::with_capacity(groups.len());
    let mut beta = vec![0.0; kd];
    for rows in groups.values() {
        let w = data.w_row(rows[0]);
        let describe = || format!("{w:?}");
        if rows.len() < kd + 2 {
            return Err(Error::CellTooSmall {
                cell: describe(),
                size: rows.len(),
            });
        }
        let p = kd + 1;
        let mut xtx = DMatrix::zeros(p, p);
        let mut xty = DVector::zeros(p);
        let mut d = vec![0.0; p];
        for &i in rows {
            d[0] = 1.0;
            for c in 0..kd {
                d[c + 1] = data.x[(i, c)];
            }
            for a in 0..p {
                xty[a] += d[a] * data.y[i];
                for b in 0..p {
                    xtx[(a, b)] += d[a] * d[b];
                }
            }
        }
        let coef = solve_vec_guarded(&xtx, &xty, "within-cell design").map_err(|_| Error::CellTooSmall {
            cell: describe(),
            size: rows.len(),
        })?;
        let share = rows.len() as f64 / data.n() as f64;
        for c in 0..kd {
            beta[c] += share * coef[c + 1];
        }
        cells.push(ClpCell {
            w,
            count: rows.len(),
            intercept: coef[0],
            slope: coef.iter().skip(1).copied().collect(),
        });
    }
    Ok(BruteForceClp { cells, beta })
}

/// Efficiency bound decomposition `I^-1 = E[Omega(W)] + V(b(W))`.
#[derive(Debug, Clone)]
pub struct SebResult {
    pub bound_inv: DMatrix<f64>,
    pub omega_term: DMatrix<f64>,
    pub var_b_term: DMatrix<f64>,
    pub n_draws: usize,
}

impl SebResult {
    /// `sqrt(I^-1[k,k] / n)`: the best attainable standard error at sample size `n`.
    pub fn se_at(&self, n: usize, k: usize) -> f64 {
        (self.bound_inv[(k, k)] / n as f64).sqrt()
    }
}

const SEB_SHARDS: u64 = 64;

#[derive(Clone, Copy, Default)]
struct Moments {
    count: f64,
    omega_sum: f64,
    b_mean: f64,
    b_m2: f64,
}

impl Moments {
    fn merge(self, other: Moments) -> Moments {
        if self.count == 0.0 {
            return other;
        }
        if other.count == 0.0 {
            return self;
        }
        let count = self.count + other.count;
        let delta = other.b_mean - self.b_mean;
        Moments {
            count,
            omega_sum: self.omega_sum + other.omega_sum,
            b_mean: self.b_mean + delta * other.count / count,
            b_m2: self.b_m2 + other.b_m2 + delta * delta * self.count * other.count / count,
        }
    }
}

/// Monte Carlo integration of the efficiency bound over the design's control
/// law. Given `W = w`, the treatment and the (independent, homoskedastic)
/// error are integrated exactly: `Omega(w) = sigma_u^2 / v(w)`.
pub fn seb_monte_carlo(design: &Design, n_draws: usize, seed: u64) -> Result<SebResult> {
    if n_draws < 2 {
        return Err(Error::InvalidInput("need at least two draws".into()));
    }
    design.validate()?;
    let shards = SEB_SHARDS.min(n_draws as u64);
    let per = n_draws as u64 / shards;
    let extra = n_draws as u64 % shards;
    let sigma2 = design.sigma_u * design.sigma_u;
    let parts: Vec<Moments> = (0..shards)
        .into_par_iter()
        .map(|s| {
            let draws = per + u64::from(s < extra);
            let mut rng = stream_rng(seed, s);
            let mut m = Moments::default();
            for _ in 0..draws {
                let w: f64 = rng.sample(StandardNormal);
                let b = design.b0(w);
                m.count += 1.0;
                m.omega_sum += sigma2 / design.treatment_variance(w);
                let delta = b - m.b_mean;
                m.b_mean += delta / m.count;
                m.b_m2 += delta * (b - m.b_mean);
            }
            m
        })
        .collect();
    let total = parts.into_iter().fold(Moments::default(), Moments::merge);
    let omega = total.omega_sum / total.count;
    let var_b = total.b_m2 / total.count;
    let omega_term = DMatrix::from_element(1, 1, omega);
    let var_b_term = DMatrix::from_element(1, 1, var_b);
    let bound_inv = &omega_term + &var_b_term;
    Ok(SebResult {
        bound_inv,
        omega_term,
        var_b_term,
        n_draws,
    })
}

/// Uniform quadrature grid on `[lower, upper]`.
#[derive(Debug, Clone, Copy)]
pub struct Grid {
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
}

impl Grid {
    pub fn new(lower: f64, upper: f64, points: usize) -> Result<Self> {
        if !(upper > lower) || points < 3 {
            return Err(Error::InvalidInput("grid needs upper > lower and at least 3 points".into()));
        }
        Ok(Self { lower, upper, points })
    }

    pub fn step(&self) -> f64 {
        (self.upper - self.lower) / (self.points - 1) as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        let h = self.step();
        (0..self.points).map(|i| self.lower + h * i as f64).collect()
    }
}

fn trapezoid(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    let inner: f64 = values[1..n - 1].iter().sum();
    h * (inner + 0.5 * (values[0] + values[n - 1]))
}

/// Derivative weights `omega(w, x)` for a scalar continuous treatment at a
/// fixed control value, evaluated on a grid.
#[derive(Debug, Clone)]
pub struct DerivativeWeights {
    pub x: Vec<f64>,
    pub weights: Vec<f64>,
    pub density: Vec<f64>,
    /// `int E[X - e | X >= t] (1 - F(t)) dt`.
    pub denominator: f64,
    step: f64,
}

impl DerivativeWeights {
    /// `int g(x) omega(w, x) f(x | w) dx` by the trapezoid rule.
    pub fn weighted_average(&self, g: impl Fn(f64) -> f64) -> f64 {
        let vals: Vec<f64> = self
            .x
            .iter()
            .zip(&self.weights)
            .zip(&self.density)
            .map(|((&x, &om), &f)| g(x) * om * f)
            .collect();
        trapezoid(&vals, self.step)
    }

    /// `int omega(w, x) f(x | w) dx`.
    pub fn unit_mass(&self) -> f64 {
        self.weighted_average(|_| 1.0)
    }
}

/// Computes `omega(w, x_j)` on the grid. `density(x, w)` is the conditional
/// density of the treatment and `mean(w)` its conditional mean.
pub fn derivative_weights(
    density: impl Fn(f64, f64) -> f64,
    mean: impl Fn(f64) -> f64,
    w: f64,
    grid: &Grid,
) -> Result<DerivativeWeights> {
    let x = grid.nodes();
    let h = grid.step();
    let mut f = Vec::with_capacity(x.len());
    for &xi in &x {
        let v = density(xi, w);
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::NegativeDensity { x: xi, value: v });
        }
        f.push(v);
    }
    let e0 = mean(w);
    // tail[j] = int_{x_j}^{upper} (t - e0) f(t) dt
    let n = x.len();
    let mut tail = vec![0.0; n];
    for j in (0..n - 1).rev() {
        let g0 = (x[j] - e0) * f[j];
        let g1 = (x[j + 1] - e0) * f[j + 1];
        tail[j] = tail[j + 1] + 0.5 * h * (g0 + g1);
    }
    let denominator = trapezoid(&tail, h);
    if !(denominator > 0.0) {
        return Err(Error::InvalidInput("derivative weight denominator is not positive".into()));
    }
    let weights = tail.iter().zip(&f).map(|(t, fx)| t / (fx * denominator)).collect();
    Ok(DerivativeWeights {
        x,
        weights,
        density: f,
        denominator,
        step: h,
    })
}
