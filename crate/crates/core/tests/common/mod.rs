#![allow(dead_code)]

use avgclp::rng::stream_rng;
use avgclp::{BasisSpec, ClpBasis, Dataset, GpsFamily, GpsKind};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Poisson, StandardNormal};

pub fn control() -> Vec<String> {
    vec!["w".into()]
}

pub fn family(kind: GpsKind, basis: &str) -> GpsFamily {
    GpsFamily::new(kind, BasisSpec::parse(basis, &control()).unwrap()).unwrap()
}

pub fn clp(data: &Dataset, basis: &str, interactions: bool) -> ClpBasis {
    ClpBasis::fit(BasisSpec::parse(basis, &data.control_names).unwrap(), data, interactions).unwrap()
}

/// One standard normal control; treatment drawn from `kind` with index
/// `0.2 + 0.6 w` (per category `c`: `0.2 - 0.3 c + 0.6 w`); heterogeneous
/// linear outcome with unit noise.
pub fn family_sample(kind: GpsKind, n: usize, seed: u64) -> Dataset {
    let mut rng = stream_rng(seed, 0);
    let k = kind.dim();
    let mut y = Vec::with_capacity(n);
    let mut x = vec![Vec::with_capacity(n); k];
    let mut w = Vec::with_capacity(n);
    for _ in 0..n {
        let wi: f64 = rng.sample(StandardNormal);
        let mut xi = vec![0.0; k];
        match kind {
            GpsKind::BernoulliLogit => {
                let p = 1.0 / (1.0 + (-(0.2 + 0.6 * wi)).exp());
                xi[0] = f64::from(u8::from(Bernoulli::new(p).unwrap().sample(&mut rng)));
            }
            GpsKind::PoissonLog => {
                xi[0] = Poisson::new((0.2 + 0.6 * wi).exp()).unwrap().sample(&mut rng);
            }
            GpsKind::MultinomialLogit { categories } => {
                let weights: Vec<f64> = (0..=categories)
                    .map(|c| if c == 0 { 1.0 } else { (0.2 - 0.3 * c as f64 + 0.6 * wi).exp() })
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut u: f64 = rng.random::<f64>() * total;
                let mut chosen = categories;
                for (c, wt) in weights.iter().enumerate() {
                    if u < *wt {
                        chosen = c;
                        break;
                    }
                    u -= wt;
                }
                if chosen > 0 {
                    xi[chosen - 1] = 1.0;
                }
            }
        }
        let slope_sum: f64 = xi.iter().enumerate().map(|(c, v)| (2.0 + 0.5 * c as f64 + 0.3 * wi) * v).sum();
        let u: f64 = rng.sample(StandardNormal);
        y.push(1.0 + 0.5 * wi + slope_sum + u);
        for (col, v) in x.iter_mut().zip(xi) {
            col.push(v);
        }
        w.push(wi);
    }
    Dataset::from_columns(&y, &x, &[w]).unwrap()
}

/// Binary treatment, control taking values `0..cells.len()`, `cells[c] =
/// (controls, treated)` rows per cell; outcomes are arbitrary draws.
pub fn binary_cells(cells: &[(usize, usize)], seed: u64) -> Dataset {
    let mut rng = stream_rng(seed, 1);
    let mut y = Vec::new();
    let mut x = Vec::new();
    let mut w = Vec::new();
    for (c, &(n0, n1)) in cells.iter().enumerate() {
        for t in 0..(n0 + n1) {
            let treated = t >= n0;
            let noise: f64 = rng.sample(StandardNormal);
            y.push(c as f64 * 0.7 + if treated { 1.0 + 0.4 * c as f64 } else { 0.0 } + noise);
            x.push(if treated { 1.0 } else { 0.0 });
            w.push(c as f64);
        }
    }
    Dataset::from_columns(&y, &[x], &[w]).unwrap()
}

/// Saturating polynomial basis for a control with `levels` values, with or
/// without the constant.
pub fn saturated_basis(levels: usize, constant: bool) -> String {
    let mut terms: Vec<String> = if constant { vec!["1".into()] } else { vec![] };
    for p in 1..levels {
        terms.push(if p == 1 { "w".into() } else { format!("w^{p}") });
    }
    terms.join(",")
}
