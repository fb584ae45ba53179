//! Basis (feature map) construction for the propensity index, the tilting
//! directions, and the moment instruments.
//!
//! A basis is an intercept followed by powers of selected `z` columns. The
//! three bases used by the estimator (`k`, `t`, `e`) are all instances of
//! this type with possibly different column selections.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::MergedSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    /// Column names drawn from the sample's `z1`/`z2` names. Empty means
    /// every `z1` column followed by every `z2` column.
    #[serde(default)]
    pub columns: Vec<String>,
    /// Highest power applied to each selected column (1 = linear).
    #[serde(default = "default_degree")]
    pub degree: u32,
}

fn default_degree() -> u32 {
    1
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec {
            columns: Vec::new(),
            degree: 1,
        }
    }
}

impl BasisSpec {
    pub fn new(columns: Vec<String>, degree: u32) -> Self {
        BasisSpec { columns, degree }
    }

    fn resolved_columns(&self, sample: &MergedSample) -> Result<Vec<String>> {
        if self.degree == 0 {
            return Err(Error::validation("basis degree must be at least 1"));
        }
        if self.columns.is_empty() {
            let mut all = sample.z1_names.clone();
            all.extend(sample.z2_names.iter().cloned());
            return Ok(all);
        }
        for name in &self.columns {
            if !sample.z1_names.contains(name) && !sample.z2_names.contains(name) {
                return Err(Error::validation(format!(
                    "basis column {name:?} not found; available: {:?} and {:?}",
                    sample.z1_names, sample.z2_names
                )));
            }
        }
        Ok(self.columns.clone())
    }

    /// Number of basis functions (intercept included).
    pub fn dim(&self, sample: &MergedSample) -> Result<usize> {
        Ok(1 + self.resolved_columns(sample)?.len() * self.degree as usize)
    }

    /// Human-readable labels, intercept first.
    pub fn labels(&self, sample: &MergedSample) -> Result<Vec<String>> {
        let mut labels = vec!["1".to_string()];
        for name in self.resolved_columns(sample)? {
            for p in 1..=self.degree {
                if p == 1 {
                    labels.push(name.clone());
                } else {
                    labels.push(format!("{name}^{p}"));
                }
            }
        }
        Ok(labels)
    }

    /// Evaluate the basis on every row of the merged sample.
    pub fn eval(&self, sample: &MergedSample) -> Result<DMatrix<f64>> {
        let cols = self.resolved_columns(sample)?;
        let n = sample.n();
        let d = 1 + cols.len() * self.degree as usize;
        let mut out = DMatrix::zeros(n, d);
        for i in 0..n {
            out[(i, 0)] = 1.0;
        }
        let mut j = 1;
        for name in &cols {
            let (m, idx) = if let Some(p) = sample.z1_names.iter().position(|c| c == name) {
                (&sample.z1, p)
            } else {
                let p = sample.z2_names.iter().position(|c| c == name).unwrap();
                (&sample.z2, p)
            };
            for p in 1..=self.degree {
                for i in 0..n {
                    out[(i, j)] = m[(i, idx)].powi(p as i32);
                }
                j += 1;
            }
        }
        Ok(out)
    }
}
