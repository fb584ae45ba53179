//! Sample containers and the merge of the two data sources.
//!
//! The study sample carries the outcome but not the covariate of interest;
//! the auxiliary sample carries that covariate but not the outcome. Both
//! carry the shared conditioning variables, split into the included block
//! `z1` (enters the outcome model) and the excluded block `z2` (enters only
//! the propensity and the moment basis). The merged sample stacks study rows
//! first; all later per-row bookkeeping relies on that ordering.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct StudySample {
    pub y: Vec<f64>,
    pub z1: DMatrix<f64>,
    pub z2: DMatrix<f64>,
    pub z1_names: Vec<String>,
    pub z2_names: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct AuxSample {
    pub x: Vec<f64>,
    pub z1: DMatrix<f64>,
    pub z2: DMatrix<f64>,
    pub z1_names: Vec<String>,
    pub z2_names: Vec<String>,
}

fn default_names(prefix: &str, d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("{prefix}_{j}")).collect()
}

impl StudySample {
    pub fn new(y: Vec<f64>, z1: DMatrix<f64>, z2: DMatrix<f64>) -> Self {
        let (d1, d2) = (z1.ncols(), z2.ncols());
        StudySample {
            y,
            z1,
            z2,
            z1_names: default_names("z1", d1),
            z2_names: default_names("z2", d2),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

impl AuxSample {
    pub fn new(x: Vec<f64>, z1: DMatrix<f64>, z2: DMatrix<f64>) -> Self {
        let (d1, d2) = (z1.ncols(), z2.ncols());
        AuxSample {
            x,
            z1,
            z2,
            z1_names: default_names("z1", d1),
            z2_names: default_names("z2", d2),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Pooled two-sample data set, study rows first.
#[derive(Debug, Clone)]
pub struct MergedSample {
    n_s: usize,
    n_a: usize,
    /// Outcomes for rows `0..n_s`.
    pub y: Vec<f64>,
    /// Covariate of interest for rows `n_s..n`.
    pub x: Vec<f64>,
    pub z1: DMatrix<f64>,
    pub z2: DMatrix<f64>,
    pub z1_names: Vec<String>,
    pub z2_names: Vec<String>,
}

impl MergedSample {
    pub fn n(&self) -> usize {
        self.n_s + self.n_a
    }

    pub fn n_study(&self) -> usize {
        self.n_s
    }

    pub fn n_aux(&self) -> usize {
        self.n_a
    }

    pub fn d1(&self) -> usize {
        self.z1.ncols()
    }

    pub fn d2(&self) -> usize {
        self.z2.ncols()
    }

    /// Study-membership indicator for row `i`.
    pub fn r(&self, i: usize) -> bool {
        i < self.n_s
    }

    /// Outcome, defined exactly on study rows.
    pub fn y_at(&self, i: usize) -> Option<f64> {
        if i < self.n_s {
            Some(self.y[i])
        } else {
            None
        }
    }

    /// Covariate of interest, defined exactly on auxiliary rows.
    pub fn x_at(&self, i: usize) -> Option<f64> {
        if i >= self.n_s {
            Some(self.x[i - self.n_s])
        } else {
            None
        }
    }

    /// Empirical study share `n_s / n`.
    pub fn q0_hat(&self) -> f64 {
        self.n_s as f64 / self.n() as f64
    }

    /// Row indices of the auxiliary block.
    pub fn aux_rows(&self) -> std::ops::Range<usize> {
        self.n_s..self.n()
    }
}

fn check_finite(tag: &str, values: impl Iterator<Item = (usize, f64)>) -> Result<()> {
    let bad: Vec<usize> = values
        .filter(|(_, v)| !v.is_finite())
        .map(|(i, _)| i)
        .take(10)
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::validation(format!(
            "{tag} contains non-finite values at row indices {bad:?}"
        )))
    }
}

/// Stack the two samples into one data set, study rows first.
///
/// Fails if either sample is empty, the `z` dimensions or names disagree, the
/// row counts within a sample disagree, or any value is non-finite.
pub fn merge_samples(study: &StudySample, aux: &AuxSample) -> Result<MergedSample> {
    if study.is_empty() {
        return Err(Error::validation("study sample is empty"));
    }
    if aux.is_empty() {
        return Err(Error::validation("auxiliary sample is empty"));
    }
    if study.z1.nrows() != study.len() || study.z2.nrows() != study.len() {
        return Err(Error::validation(format!(
            "study sample row mismatch: y has {}, z1 has {}, z2 has {}",
            study.len(),
            study.z1.nrows(),
            study.z2.nrows()
        )));
    }
    if aux.z1.nrows() != aux.len() || aux.z2.nrows() != aux.len() {
        return Err(Error::validation(format!(
            "auxiliary sample row mismatch: x has {}, z1 has {}, z2 has {}",
            aux.len(),
            aux.z1.nrows(),
            aux.z2.nrows()
        )));
    }
    if study.z1.ncols() != aux.z1.ncols() || study.z2.ncols() != aux.z2.ncols() {
        return Err(Error::validation(format!(
            "z dimension mismatch: study has (z1={}, z2={}), auxiliary has (z1={}, z2={})",
            study.z1.ncols(),
            study.z2.ncols(),
            aux.z1.ncols(),
            aux.z2.ncols()
        )));
    }
    if study.z1_names != aux.z1_names || study.z2_names != aux.z2_names {
        return Err(Error::validation(format!(
            "z column names differ between samples: study (z1={:?}, z2={:?}) vs auxiliary (z1={:?}, z2={:?})",
            study.z1_names, study.z2_names, aux.z1_names, aux.z2_names
        )));
    }

    check_finite("study y", study.y.iter().copied().enumerate())?;
    check_finite("auxiliary x", aux.x.iter().copied().enumerate())?;
    for (tag, m) in [
        ("study z1", &study.z1),
        ("study z2", &study.z2),
        ("auxiliary z1", &aux.z1),
        ("auxiliary z2", &aux.z2),
    ] {
        check_finite(
            tag,
            (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| (i, (i, j)))).map(|(i, ij)| (i, m[ij])),
        )?;
    }

    let n_s = study.len();
    let n_a = aux.len();
    let stack = |a: &DMatrix<f64>, b: &DMatrix<f64>| -> DMatrix<f64> {
        let mut out = DMatrix::zeros(n_s + n_a, a.ncols());
        out.rows_mut(0, n_s).copy_from(a);
        out.rows_mut(n_s, n_a).copy_from(b);
        out
    };

    Ok(MergedSample {
        n_s,
        n_a,
        y: study.y.clone(),
        x: aux.x.clone(),
        z1: stack(&study.z1, &aux.z1),
        z2: stack(&study.z2, &aux.z2),
        z1_names: study.z1_names.clone(),
        z2_names: study.z2_names.clone(),
    })
}

/// Range comparison for one shared column.
#[derive(Debug, Clone, Serialize)]
pub struct OverlapColumn {
    pub name: String,
    pub study_min: f64,
    pub study_max: f64,
    pub aux_min: f64,
    pub aux_max: f64,
    /// How far the study range extends beyond the auxiliary range.
    pub excess: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct OverlapReport {
    pub tolerance: f64,
    pub columns: Vec<OverlapColumn>,
    pub any_flagged: bool,
}

fn col_range(m: &DMatrix<f64>, j: usize) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..m.nrows() {
        lo = lo.min(m[(i, j)]);
        hi = hi.max(m[(i, j)]);
    }
    (lo, hi)
}

/// Compare per-column `z` ranges between the samples.
///
/// A column is flagged when the study range extends beyond the auxiliary
/// range by more than `tolerance` on either side; downstream weighting then
/// extrapolates the propensity model outside the observed auxiliary support.
pub fn validate_overlap(study: &StudySample, aux: &AuxSample, tolerance: f64) -> OverlapReport {
    let mut columns = Vec::new();
    let blocks: [(&DMatrix<f64>, &DMatrix<f64>, &[String]); 2] = [
        (&study.z1, &aux.z1, &study.z1_names),
        (&study.z2, &aux.z2, &study.z2_names),
    ];
    for (sm, am, names) in blocks {
        for j in 0..sm.ncols() {
            let (s_lo, s_hi) = col_range(sm, j);
            let (a_lo, a_hi) = col_range(am, j);
            let excess = (a_lo - s_lo).max(s_hi - a_hi).max(0.0);
            columns.push(OverlapColumn {
                name: names[j].clone(),
                study_min: s_lo,
                study_max: s_hi,
                aux_min: a_lo,
                aux_max: a_hi,
                excess,
                flagged: excess > tolerance,
            });
        }
    }
    let any_flagged = columns.iter().any(|c| c.flagged);
    OverlapReport {
        tolerance,
        columns,
        any_flagged,
    }
}
