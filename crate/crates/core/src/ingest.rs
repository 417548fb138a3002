//! Real-data intake: long-format CSV parsing, effective sample size, and
//! thinning.
//!
//! Signals file: header `subject,t,y1,…,yp`, one row per subject and time
//! index (`t` runs from 1 without gaps). Covariates file: header
//! `subject,x1,…,xq`, one row per subject.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{CapError, Result};
use crate::model::{remove_column_means, Subject, TimeSeriesDataset};
use crate::spd::{Matrix, Vector};
use crate::stats::autocovariance;

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> CapError {
    CapError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

struct Table {
    header: Vec<String>,
    /// (line number, cells)
    rows: Vec<(usize, Vec<String>)>,
}

fn read_table(path: &Path) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != header.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        rows.push((line, record.iter().map(str::to_string).collect()));
    }
    Ok(Table { header, rows })
}

fn parse_number(path: &Path, line: usize, column: &str, cell: &str) -> Result<f64> {
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(parse_err(
            path,
            line,
            format!("column `{column}`: non-numeric value `{cell}`"),
        )),
    }
}

/// Loads a dataset from the signals/covariates CSV pair. With
/// `add_intercept`, a leading column of ones is prepended to each `x_i`.
pub fn load(
    signals_path: &Path,
    covariates_path: &Path,
    add_intercept: bool,
) -> Result<TimeSeriesDataset> {
    let signals = read_table(signals_path)?;
    if signals.header.len() < 3 || signals.header[0] != "subject" || signals.header[1] != "t" {
        return Err(parse_err(
            signals_path,
            1,
            "header must be `subject,t,y1,…,yp` with at least one signal column",
        ));
    }
    let p = signals.header.len() - 2;

    let mut order: Vec<String> = Vec::new();
    let mut rows_by_subject: HashMap<String, Vec<(usize, usize, Vec<f64>)>> = HashMap::new();
    for (line, cells) in &signals.rows {
        let id = cells[0].clone();
        let t: usize = cells[1].parse().map_err(|_| {
            parse_err(
                signals_path,
                *line,
                format!("time index `{}` is not a positive integer", cells[1]),
            )
        })?;
        let values = cells[2..]
            .iter()
            .zip(&signals.header[2..])
            .map(|(cell, col)| parse_number(signals_path, *line, col, cell))
            .collect::<Result<Vec<f64>>>()?;
        if !rows_by_subject.contains_key(&id) {
            order.push(id.clone());
        }
        rows_by_subject
            .entry(id)
            .or_default()
            .push((*line, t, values));
    }

    let covs = read_table(covariates_path)?;
    if covs.header.len() < 2 || covs.header[0] != "subject" {
        return Err(parse_err(
            covariates_path,
            1,
            "header must be `subject,x1,…,xq` with at least one covariate column",
        ));
    }
    let mut covariates: HashMap<String, Vec<f64>> = HashMap::new();
    for (line, cells) in &covs.rows {
        let values = cells[1..]
            .iter()
            .zip(&covs.header[1..])
            .map(|(cell, col)| parse_number(covariates_path, *line, col, cell))
            .collect::<Result<Vec<f64>>>()?;
        if covariates.insert(cells[0].clone(), values).is_some() {
            return Err(parse_err(
                covariates_path,
                *line,
                format!("duplicate subject `{}`", cells[0]),
            ));
        }
    }
    let q_file = covs.header.len() - 1;
    let q = q_file + add_intercept as usize;

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = rows_by_subject.remove(&id).expect("subject recorded");
        rows.sort_by_key(|r| r.1);
        for (expected, (line, t, _)) in rows.iter().enumerate() {
            if *t != expected + 1 {
                return Err(parse_err(
                    signals_path,
                    *line,
                    format!(
                        "subject `{id}`: time index {t} breaks the sequence 1..T (expected {})",
                        expected + 1
                    ),
                ));
            }
        }
        let t_len = rows.len();
        let mut y = Matrix::zeros(t_len, p);
        for (r, (_, _, values)) in rows.iter().enumerate() {
            for (c, v) in values.iter().enumerate() {
                y[(r, c)] = *v;
            }
        }
        let x_file = covariates.get(&id).ok_or_else(|| {
            parse_err(
                covariates_path,
                0,
                format!("subject `{id}` from the signals file has no covariate row"),
            )
        })?;
        let mut x = Vec::with_capacity(q);
        if add_intercept {
            x.push(1.0);
        }
        x.extend_from_slice(x_file);
        subjects.push(Subject {
            id,
            signals: y,
            covariates: Vector::from_vec(x),
        });
    }
    TimeSeriesDataset::new(p, q, subjects)
}

/// Writes the CSV pair read by [`load`]. With `drop_intercept`, the leading
/// covariate (which must be identically one) is omitted so that
/// `load(.., add_intercept = true)` restores the dataset.
pub fn write(
    data: &TimeSeriesDataset,
    signals_path: &Path,
    covariates_path: &Path,
    drop_intercept: bool,
) -> Result<()> {
    if drop_intercept && data.subjects().iter().any(|s| s.covariates[0] != 1.0) {
        return Err(CapError::Argument(
            "cannot drop the intercept: first covariate is not identically 1".into(),
        ));
    }
    let skip = drop_intercept as usize;
    if data.q() <= skip {
        return Err(CapError::Argument(
            "no covariate columns left to write".into(),
        ));
    }

    let mut out = BufWriter::new(File::create(signals_path)?);
    let header: Vec<String> = ["subject".to_string(), "t".to_string()]
        .into_iter()
        .chain((1..=data.p()).map(|j| format!("y{j}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for s in data.subjects() {
        for l in 0..s.len() {
            let mut row = vec![s.id.clone(), (l + 1).to_string()];
            row.extend(s.signals.row(l).iter().map(|v| format_float(*v)));
            writeln!(out, "{}", row.join(","))?;
        }
    }
    out.flush()?;

    let mut out = BufWriter::new(File::create(covariates_path)?);
    let header: Vec<String> = std::iter::once("subject".to_string())
        .chain((1..=data.q() - skip).map(|j| format!("x{j}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for s in data.subjects() {
        let mut row = vec![s.id.clone()];
        row.extend(s.covariates.iter().skip(skip).map(|v| format_float(*v)));
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Integrated autocorrelation time `1 + 2 Σ_t ρ_t` with the sum stopped
/// before the first nonpositive sample autocorrelation.
pub fn autocorrelation_time(series: &[f64]) -> Option<f64> {
    let n = series.len();
    let m = series.iter().sum::<f64>() / n as f64;
    let c0 = autocovariance(series, m, 0);
    if !(c0 > 0.0) {
        return None;
    }
    let mut sum = 0.0;
    for lag in 1..n {
        let rho = autocovariance(series, m, lag) / c0;
        if rho <= 0.0 {
            break;
        }
        sum += rho;
    }
    Some(1.0 + 2.0 * sum)
}

/// `floor(min_{i,j} T_i / τ_ij)`, at least 1, where `τ_ij` is the
/// autocorrelation time of signal `j` of subject `i`.
pub fn effective_sample_size(data: &TimeSeriesDataset) -> Result<usize> {
    if data.n() == 0 {
        return Err(CapError::Argument("ESS of an empty dataset".into()));
    }
    let mut best = f64::INFINITY;
    for s in data.subjects() {
        if s.len() < 4 {
            return Err(CapError::Argument(format!(
                "subject `{}`: ESS needs at least 4 time points, got {}",
                s.id,
                s.len()
            )));
        }
        for j in 0..data.p() {
            let series: Vec<f64> = s.signals.column(j).iter().copied().collect();
            let tau = autocorrelation_time(&series).ok_or_else(|| {
                CapError::Degenerate(format!(
                    "subject `{}`, signal {}: constant series has no autocorrelation",
                    s.id,
                    j + 1
                ))
            })?;
            best = best.min(s.len() as f64 / tau);
        }
    }
    Ok((best.floor() as usize).max(1))
}

/// Keeps `target_t` evenly strided rows per subject (stride
/// `floor(T_i / target_t)`, starting with the first row), then removes each
/// subject's mean.
pub fn thin(data: &TimeSeriesDataset, target_t: usize) -> Result<TimeSeriesDataset> {
    let min_t = data.subjects().iter().map(Subject::len).min().unwrap_or(0);
    if target_t < 2 || target_t > min_t {
        return Err(CapError::Argument(format!(
            "thinning target must satisfy 2 <= T <= min_i T_i = {min_t}, got {target_t}"
        )));
    }
    let subjects = data
        .subjects()
        .iter()
        .map(|s| {
            let stride = s.len() / target_t;
            let mut y = Matrix::zeros(target_t, data.p());
            for r in 0..target_t {
                y.set_row(r, &s.signals.row(r * stride));
            }
            Subject {
                id: s.id.clone(),
                signals: remove_column_means(&y),
                covariates: s.covariates.clone(),
            }
        })
        .collect();
    TimeSeriesDataset::new(data.p(), data.q(), subjects)
}
