//! Just-identified method-of-moments machinery: guarded linear solves,
//! linear IV fits, sample Jacobians and the sandwich covariance.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Systems whose cross-moment matrix exceeds this condition number are
/// reported as [`Error::SingularSystem`].
pub const CONDITION_LIMIT: f64 = 1e12;

/// 2-norm condition number from the singular values.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let sv = a.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(min > 0.0) || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `a * x = b` with full-pivot LU after checking the condition number.
pub fn solve_guarded(a: &DMatrix<f64>, b: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let condition = condition_number(a);
    if !(condition < CONDITION_LIMIT) {
        return Err(Error::SingularSystem {
            context: context.to_string(),
            condition,
        });
    }
    a.clone()
        .full_piv_lu()
        .solve(b)
        .ok_or_else(|| Error::SingularSystem {
            context: context.to_string(),
            condition,
        })
}

pub fn solve_vec_guarded(a: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    let bm = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    let x = solve_guarded(a, &bm, context)?;
    Ok(DVector::from_column_slice(x.as_slice()))
}

/// A just-identified moment system `m(Z_i, theta)`. The system owns (or
/// borrows) its data; rows are addressed by index.
pub trait MomentSystem: Sync {
    fn n_obs(&self) -> usize;

    fn dim_theta(&self) -> usize;

    fn dim_moments(&self) -> usize {
        self.dim_theta()
    }

    /// Writes `m(Z_row, theta)` into `out` (length `dim_moments`).
    fn moments(&self, row: usize, theta: &[f64], out: &mut [f64]);
}

/// Closure-backed moment system.
pub struct FnMomentSystem<F> {
    n: usize,
    dim: usize,
    f: F,
}

impl<F> FnMomentSystem<F>
where
    F: Fn(usize, &[f64], &mut [f64]) + Sync,
{
    pub fn new(n: usize, dim: usize, f: F) -> Self {
        Self { n, dim, f }
    }
}

impl<F> MomentSystem for FnMomentSystem<F>
where
    F: Fn(usize, &[f64], &mut [f64]) + Sync,
{
    fn n_obs(&self) -> usize {
        self.n
    }

    fn dim_theta(&self) -> usize {
        self.dim
    }

    fn moments(&self, row: usize, theta: &[f64], out: &mut [f64]) {
        (self.f)(row, theta, out)
    }
}

fn check_square<S: MomentSystem + ?Sized>(system: &S) -> Result<()> {
    if system.dim_moments() != system.dim_theta() {
        return Err(Error::InvalidInput(format!(
            "moment system is not just-identified: {} moments for {} parameters",
            system.dim_moments(),
            system.dim_theta()
        )));
    }
    Ok(())
}

/// `N x m` matrix of per-observation moments.
pub fn moment_rows<S: MomentSystem + ?Sized>(system: &S, theta: &[f64]) -> DMatrix<f64> {
    let n = system.n_obs();
    let m = system.dim_moments();
    let mut out = DMatrix::zeros(n, m);
    let mut buf = vec![0.0; m];
    for i in 0..n {
        system.moments(i, theta, &mut buf);
        for (j, v) in buf.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    out
}

/// Sample average of the moments.
pub fn mean_moments<S: MomentSystem + ?Sized>(system: &S, theta: &[f64]) -> DVector<f64> {
    let m = system.dim_moments();
    let mut acc = DVector::zeros(m);
    let mut buf = vec![0.0; m];
    for i in 0..system.n_obs() {
        system.moments(i, theta, &mut buf);
        for (a, v) in acc.iter_mut().zip(&buf) {
            *a += v;
        }
    }
    acc / system.n_obs() as f64
}

/// Linear IV fit: the `theta` solving `(1/N) sum Q_i (y_i - D_i' theta) = 0`.
pub fn solve_linear_iv(
    instruments: &DMatrix<f64>,
    regressors: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    if instruments.shape() != regressors.shape() {
        return Err(Error::InvalidInput(format!(
            "instrument shape {:?} differs from regressor shape {:?}",
            instruments.shape(),
            regressors.shape()
        )));
    }
    if y.len() != instruments.nrows() {
        return Err(Error::InvalidInput("outcome length differs from N".into()));
    }
    let n = y.len() as f64;
    let cross = instruments.tr_mul(regressors) / n;
    let rhs = instruments.tr_mul(y) / n;
    let mut theta = solve_vec_guarded(&cross, &rhs, "linear IV cross-moment matrix")?;
    // one step of iterative refinement
    let resid = &rhs - &cross * &theta;
    if let Some(delta) = cross.clone().full_piv_lu().solve(&resid) {
        theta += delta;
    }
    Ok(theta)
}

/// Central-difference Jacobian of the sample-average moments, step
/// `max(1e-6, 1e-6 |theta_j|)` per coordinate.
pub fn numeric_jacobian<S: MomentSystem + ?Sized>(system: &S, theta: &[f64]) -> Result<DMatrix<f64>> {
    check_square(system)?;
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidInput("theta must be finite".into()));
    }
    let p = system.dim_theta();
    let m = system.dim_moments();
    let mut jac = DMatrix::zeros(m, p);
    let mut work = theta.to_vec();
    for j in 0..p {
        let h = (1e-6 * theta[j].abs()).max(1e-6);
        work[j] = theta[j] + h;
        let plus = mean_moments(system, &work);
        work[j] = theta[j] - h;
        let minus = mean_moments(system, &work);
        work[j] = theta[j];
        if plus.iter().chain(minus.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteMoment { coordinate: j });
        }
        let col = (plus - minus) / (2.0 * h);
        jac.set_column(j, &col);
    }
    Ok(jac)
}

/// Sandwich covariance of a just-identified estimator.
#[derive(Debug, Clone)]
pub struct SandwichCov {
    /// Sample mean of `dm/dtheta'`.
    pub jacobian: DMatrix<f64>,
    /// Sample mean of `m m'` (uncentred).
    pub meat: DMatrix<f64>,
    /// `J^-1 meat J^-T / N`.
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl SandwichCov {
    pub fn block(&self, start: usize, len: usize) -> DMatrix<f64> {
        self.cov.view((start, start), (len, len)).into_owned()
    }
}

pub fn sandwich<S: MomentSystem + ?Sized>(
    system: &S,
    theta: &[f64],
    jacobian: &DMatrix<f64>,
) -> Result<SandwichCov> {
    check_square(system)?;
    sandwich_from_rows(&moment_rows(system, theta), jacobian)
}

/// Sandwich from precomputed `N x m` moment rows.
pub fn sandwich_from_rows(rows: &DMatrix<f64>, jacobian: &DMatrix<f64>) -> Result<SandwichCov> {
    let n = rows.nrows();
    if jacobian.nrows() != rows.ncols() || !jacobian.is_square() {
        return Err(Error::InvalidInput(
            "Jacobian dimension does not match the moment vector".into(),
        ));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteMoment { coordinate: 0 });
    }
    let meat = rows.tr_mul(rows) / n as f64;
    let left = solve_guarded(jacobian, &meat, "sandwich Jacobian")?;
    let mut cov = solve_guarded(jacobian, &left.transpose(), "sandwich Jacobian")? / n as f64;
    symmetrize(&mut cov);
    Ok(SandwichCov {
        jacobian: jacobian.clone(),
        meat,
        cov,
        n,
    })
}

pub(crate) fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}
