use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Estimation input: outcome, `N x K` treatments and `N x p` raw controls.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub outcome_name: String,
    pub treatment_names: Vec<String>,
    pub control_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        y: DVector<f64>,
        x: DMatrix<f64>,
        w: DMatrix<f64>,
        outcome_name: impl Into<String>,
        treatment_names: Vec<String>,
        control_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::EmptyData);
        }
        if x.nrows() != n || w.nrows() != n {
            return Err(Error::InvalidInput(format!(
                "row mismatch: y has {n}, treatments {}, controls {}",
                x.nrows(),
                w.nrows()
            )));
        }
        if treatment_names.len() != x.ncols() || control_names.len() != w.ncols() {
            return Err(Error::InvalidInput(
                "column names do not match matrix widths".into(),
            ));
        }
        Ok(Self {
            y,
            x,
            w,
            outcome_name: outcome_name.into(),
            treatment_names,
            control_names,
        })
    }

    /// Builds a dataset from slices with generated column names
    /// (`y`, `x1..xK`, `w1..wp`; a single column is named `x` / `w`).
    pub fn from_columns(y: &[f64], x: &[Vec<f64>], w: &[Vec<f64>]) -> Result<Self> {
        let n = y.len();
        let name = |prefix: &str, i: usize, total: usize| {
            if total == 1 {
                prefix.to_string()
            } else {
                format!("{prefix}{}", i + 1)
            }
        };
        let xm = columns_to_matrix(n, x)?;
        let wm = columns_to_matrix(n, w)?;
        Self::new(
            DVector::from_column_slice(y),
            xm,
            wm,
            "y",
            (0..x.len()).map(|i| name("x", i, x.len())).collect(),
            (0..w.len()).map(|i| name("w", i, w.len())).collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    pub fn x_row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    pub fn w_row(&self, i: usize) -> Vec<f64> {
        self.w.row(i).iter().copied().collect()
    }

    /// Rows reordered by `perm` (`perm[new] = old`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n();
        assert_eq!(perm.len(), n, "permutation length must equal N");
        let y = DVector::from_fn(n, |i, _| self.y[perm[i]]);
        let x = DMatrix::from_fn(n, self.k(), |i, j| self.x[(perm[i], j)]);
        let w = DMatrix::from_fn(n, self.w.ncols(), |i, j| self.w[(perm[i], j)]);
        Self {
            y,
            x,
            w,
            ..self.clone()
        }
    }

    /// Expands a category-label column (values `0..=K`) into `K` indicator
    /// columns, category 0 being the omitted base.
    pub fn labels_to_indicators(labels: &[f64], name: &str) -> Result<(DMatrix<f64>, Vec<String>)> {
        let mut max_label = 0usize;
        for (row, &v) in labels.iter().enumerate() {
            if !(v >= 0.0 && v.fract() == 0.0 && v.is_finite()) {
                return Err(Error::SupportViolation {
                    row,
                    value: v,
                    family: "multinomial",
                });
            }
            max_label = max_label.max(v as usize);
        }
        if max_label == 0 {
            return Err(Error::InvalidInput(format!(
                "treatment '{name}' has a single category"
            )));
        }
        let x = DMatrix::from_fn(labels.len(), max_label, |i, k| {
            if labels[i] as usize == k + 1 {
                1.0
            } else {
                0.0
            }
        });
        let names = (1..=max_label).map(|k| format!("{name}_{k}")).collect();
        Ok((x, names))
    }
}

fn columns_to_matrix(n: usize, cols: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    for c in cols {
        if c.len() != n {
            return Err(Error::InvalidInput(format!(
                "column of length {} does not match outcome length {n}",
                c.len()
            )));
        }
    }
    Ok(DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_expansion() {
        let (x, names) = Dataset::labels_to_indicators(&[0.0, 2.0, 1.0], "d").unwrap();
        assert_eq!(names, vec!["d_1", "d_2"]);
        assert_eq!(x.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
        assert_eq!(x.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0]);
        assert_eq!(x.row(2).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0]);
        assert!(Dataset::labels_to_indicators(&[0.0, 1.5], "d").is_err());
    }

    #[test]
    fn empty_rejected() {
        assert!(matches!(
            Dataset::from_columns(&[], &[vec![]], &[]),
            Err(Error::EmptyData)
        ));
    }
}
