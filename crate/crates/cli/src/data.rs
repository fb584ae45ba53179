//! CSV ingestion and sidecar emission.
//!
//! Study files carry columns `y, z1_*, z2_*`; auxiliary files carry
//! `x, z1_*, z2_*`. Column order within the z-groups follows the file, and
//! both files must agree on the z names. Parse failures report the file,
//! the 1-based data row, and the column.

use nalgebra::DMatrix;
use std::path::Path;
use uqe_core::sample::{AuxSample, StudySample};

use crate::error::{CliError, Context};

struct Columns {
    /// Index of the target column (y or x) in the header.
    target: usize,
    z1: Vec<(usize, String)>,
    z2: Vec<(usize, String)>,
}

fn classify_headers(path: &Path, headers: &csv::StringRecord, target: &str) -> Result<Columns, CliError> {
    let mut t = None;
    let mut z1 = Vec::new();
    let mut z2 = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        let h = h.trim();
        if h == target {
            if t.replace(i).is_some() {
                return Err(CliError::validation(format!(
                    "{}: duplicate column `{target}`",
                    path.display()
                )));
            }
        } else if h.starts_with("z1_") {
            z1.push((i, h.to_string()));
        } else if h.starts_with("z2_") {
            z2.push((i, h.to_string()));
        } else {
            return Err(CliError::validation(format!(
                "{}: unexpected column `{h}` (expected {target}, z1_*, z2_*)",
                path.display()
            )));
        }
    }
    let target_idx = t.ok_or_else(|| {
        CliError::validation(format!("{}: missing column `{target}`", path.display()))
    })?;
    if z1.is_empty() {
        return Err(CliError::validation(format!(
            "{}: at least one z1_* column is required",
            path.display()
        )));
    }
    if z2.is_empty() {
        return Err(CliError::validation(format!(
            "{}: at least one z2_* column is required",
            path.display()
        )));
    }
    Ok(Columns { target: target_idx, z1, z2 })
}

fn cell(path: &Path, record: &csv::StringRecord, row: usize, idx: usize, name: &str) -> Result<f64, CliError> {
    let raw = record.get(idx).unwrap_or("").trim();
    if raw.is_empty() {
        return Err(CliError::validation(format!(
            "{}: data row {row}, column {name}: missing value",
            path.display()
        )));
    }
    let v: f64 = raw.parse().map_err(|_| {
        CliError::validation(format!(
            "{}: data row {row}, column {name}: invalid number `{raw}`",
            path.display()
        ))
    })?;
    if !v.is_finite() {
        return Err(CliError::validation(format!(
            "{}: data row {row}, column {name}: non-finite value `{raw}`",
            path.display()
        )));
    }
    Ok(v)
}

fn read_columns(path: &Path, target: &str) -> Result<(Vec<f64>, DMatrix<f64>, DMatrix<f64>, Vec<String>, Vec<String>), CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .context(&path.display().to_string())?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?
        .clone();
    let cols = classify_headers(path, &headers, target)?;
    let mut tvals = Vec::new();
    let mut z1_flat = Vec::new();
    let mut z2_flat = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        let row = r + 1;
        if record.len() != headers.len() {
            return Err(CliError::validation(format!(
                "{}: data row {row}: expected {} fields, found {}",
                path.display(),
                headers.len(),
                record.len()
            )));
        }
        tvals.push(cell(path, &record, row, cols.target, target)?);
        for (idx, name) in &cols.z1 {
            z1_flat.push(cell(path, &record, row, *idx, name)?);
        }
        for (idx, name) in &cols.z2 {
            z2_flat.push(cell(path, &record, row, *idx, name)?);
        }
    }
    if tvals.is_empty() {
        return Err(CliError::validation(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    let n = tvals.len();
    let z1 = DMatrix::from_row_slice(n, cols.z1.len(), &z1_flat);
    let z2 = DMatrix::from_row_slice(n, cols.z2.len(), &z2_flat);
    let z1_names: Vec<String> = cols.z1.into_iter().map(|(_, s)| s).collect();
    let z2_names: Vec<String> = cols.z2.into_iter().map(|(_, s)| s).collect();
    Ok((tvals, z1, z2, z1_names, z2_names))
}

pub fn read_study(path: &Path) -> Result<StudySample, CliError> {
    let (y, z1, z2, z1_names, z2_names) = read_columns(path, "y")?;
    let mut s = StudySample::new(y, z1, z2);
    s.z1_names = z1_names;
    s.z2_names = z2_names;
    Ok(s)
}

pub fn read_aux(path: &Path) -> Result<AuxSample, CliError> {
    let (x, z1, z2, z1_names, z2_names) = read_columns(path, "x")?;
    let mut a = AuxSample::new(x, z1, z2);
    a.z1_names = z1_names;
    a.z2_names = z2_names;
    Ok(a)
}

/// Donor draws for a counterfactual given as a file: one `x` column.
pub fn read_donor(path: &Path) -> Result<Vec<f64>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .context(&path.display().to_string())?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?
        .clone();
    if headers.len() != 1 || headers.get(0).map(str::trim) != Some("x") {
        return Err(CliError::validation(format!(
            "{}: a donor file has exactly one column named x",
            path.display()
        )));
    }
    let mut xs = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        xs.push(cell(path, &record, r + 1, 0, "x")?);
    }
    Ok(xs)
}

/// Quantile table for a counterfactual: columns `u` and `x`.
pub fn read_table(path: &Path) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .context(&path.display().to_string())?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?
        .clone();
    let find = |name: &str| -> Result<usize, CliError> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| {
                CliError::validation(format!("{}: missing column `{name}`", path.display()))
            })
    };
    let ui = find("u")?;
    let xi = find("x")?;
    let mut us = Vec::new();
    let mut xs = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        us.push(cell(path, &record, r + 1, ui, "u")?);
        xs.push(cell(path, &record, r + 1, xi, "x")?);
    }
    Ok((us, xs))
}
