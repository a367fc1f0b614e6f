//! Polynomial control bases `k(W)`.
//!
//! A basis is an ordered list of monomials in the raw control columns. The
//! textual grammar is a comma-separated list of terms, each term a `*`-joined
//! product of factors `name` or `name^p`, or the literal `1` for the constant:
//! `1, w, w^2, w1*w2`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A monomial: product of `column^power` factors. Empty means constant.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Term {
    factors: Vec<(usize, u32)>,
}

impl Term {
    pub fn constant() -> Self {
        Self { factors: vec![] }
    }

    pub fn column(col: usize) -> Self {
        Self::monomial(&[(col, 1)])
    }

    pub fn power(col: usize, p: u32) -> Self {
        Self::monomial(&[(col, p)])
    }

    pub fn product(a: usize, b: usize) -> Self {
        Self::monomial(&[(a, 1), (b, 1)])
    }

    /// Canonical form: factors merged per column, sorted, zero powers dropped.
    pub fn monomial(factors: &[(usize, u32)]) -> Self {
        let mut merged: Vec<(usize, u32)> = Vec::new();
        for &(c, p) in factors {
            if p == 0 {
                continue;
            }
            match merged.iter_mut().find(|(mc, _)| *mc == c) {
                Some(slot) => slot.1 += p,
                None => merged.push((c, p)),
            }
        }
        merged.sort_unstable();
        Self { factors: merged }
    }

    pub fn is_constant(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn max_column(&self) -> Option<usize> {
        self.factors.iter().map(|&(c, _)| c).max()
    }

    pub fn eval(&self, w: &[f64]) -> f64 {
        self.factors
            .iter()
            .fold(1.0, |acc, &(c, p)| acc * w[c].powi(p as i32))
    }

    pub fn describe(&self, names: &[String]) -> String {
        if self.factors.is_empty() {
            return "1".into();
        }
        self.factors
            .iter()
            .map(|&(c, p)| {
                let n = names.get(c).cloned().unwrap_or_else(|| format!("c{c}"));
                if p == 1 {
                    n
                } else {
                    format!("{n}^{p}")
                }
            })
            .collect::<Vec<_>>()
            .join("*")
    }
}

/// Ordered, duplicate-free list of control transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    terms: Vec<Term>,
    names: Vec<String>,
}

impl BasisSpec {
    /// `names` are the control column names the terms index into.
    pub fn new(terms: Vec<Term>, names: Vec<String>) -> Result<Self> {
        for (i, t) in terms.iter().enumerate() {
            if terms[..i].contains(t) {
                return Err(Error::InvalidInput(format!(
                    "duplicate basis term '{}'",
                    t.describe(&names)
                )));
            }
            if let Some(c) = t.max_column() {
                if c >= names.len() {
                    return Err(Error::InvalidInput(format!(
                        "basis term references control column {c} but only {} exist",
                        names.len()
                    )));
                }
            }
        }
        Ok(Self { terms, names })
    }

    /// The constant followed by each raw control.
    pub fn linear_with_constant(names: &[String]) -> Self {
        let mut terms = vec![Term::constant()];
        terms.extend((0..names.len()).map(Term::column));
        Self {
            terms,
            names: names.to_vec(),
        }
    }

    /// Each raw control, no constant.
    pub fn linear(names: &[String]) -> Self {
        Self {
            terms: (0..names.len()).map(Term::column).collect(),
            names: names.to_vec(),
        }
    }

    pub fn constant_only(names: &[String]) -> Self {
        Self {
            terms: vec![Term::constant()],
            names: names.to_vec(),
        }
    }

    /// Parses the term grammar against the given control names.
    pub fn parse(expr: &str, names: &[String]) -> Result<Self> {
        let mut terms = Vec::new();
        for raw in expr.split(',') {
            let raw = raw.trim();
            if raw.is_empty() {
                continue;
            }
            if raw == "1" {
                terms.push(Term::constant());
                continue;
            }
            let mut factors = Vec::new();
            for f in raw.split('*') {
                let f = f.trim();
                let (name, power) = match f.split_once('^') {
                    Some((n, p)) => {
                        let p: u32 = p.trim().parse().map_err(|_| {
                            Error::Config(format!("bad exponent in basis term '{raw}'"))
                        })?;
                        (n.trim(), p)
                    }
                    None => (f, 1),
                };
                let col = names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
                factors.push((col, power));
            }
            terms.push(Term::monomial(&factors));
        }
        Self::new(terms, names.to_vec())
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn has_constant(&self) -> bool {
        self.terms.iter().any(Term::is_constant)
    }

    pub fn eval_into(&self, w: &[f64], out: &mut [f64]) {
        for (o, t) in out.iter_mut().zip(&self.terms) {
            *o = t.eval(w);
        }
    }

    pub fn eval(&self, w: &[f64]) -> Vec<f64> {
        self.terms.iter().map(|t| t.eval(w)).collect()
    }

    pub fn describe(&self) -> String {
        self.terms
            .iter()
            .map(|t| t.describe(&self.names))
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl fmt::Display for BasisSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> Vec<String> {
        vec!["w1".into(), "w2".into()]
    }

    #[test]
    fn parse_and_eval() {
        let b = BasisSpec::parse("1, w1, w1^2, w1*w2", &names()).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b.eval(&[2.0, 3.0]), vec![1.0, 2.0, 4.0, 6.0]);
        assert_eq!(b.describe(), "1,w1,w1^2,w1*w2");
    }

    #[test]
    fn duplicates_rejected_after_normalisation() {
        assert!(BasisSpec::parse("w1*w1, w1^2", &names()).is_err());
        assert!(BasisSpec::parse("w1*w2, w2*w1", &names()).is_err());
        assert!(BasisSpec::parse("w1, w1", &names()).is_err());
    }

    #[test]
    fn unknown_column() {
        assert!(matches!(
            BasisSpec::parse("z", &names()),
            Err(Error::MissingColumn(c)) if c == "z"
        ));
    }
}
