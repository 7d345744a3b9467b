//! CSV ingestion and export, support files and ground-truth sidecars.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::synthgen::SynthDraw;
use crate::{PooledDataset, SupportSet};

/// Reads a headered CSV file. The named treatment column may hold integers or
/// strings; its distinct values are mapped to `0..q` in sorted order (numeric
/// order when every value is an integer). Every other column is a numeric
/// covariate.
pub fn ingest_csv(path: impl AsRef<Path>, treatment_col: &str, outcome_col: &str) -> Result<PooledDataset<f64>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    read_csv(file, treatment_col, outcome_col)
}

pub fn read_csv<R: Read>(reader: R, treatment_col: &str, outcome_col: &str) -> Result<PooledDataset<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("column '{name}' not found in header")))
    };
    let t_idx = find(treatment_col)?;
    let y_idx = find(outcome_col)?;
    if t_idx == y_idx {
        return Err(Error::Data("treatment and outcome columns must differ".into()));
    }
    let cov_idx: Vec<usize> = (0..header.len()).filter(|i| *i != t_idx && *i != y_idx).collect();
    if cov_idx.is_empty() {
        return Err(Error::Data("no covariate columns".into()));
    }

    let mut raw_t = Vec::new();
    let mut y = Vec::new();
    let mut x = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| Error::Data(format!("row {row}: {e}")))?;
        if rec.len() != header.len() {
            return Err(Error::Data(format!("row {row}: expected {} fields, found {}", header.len(), rec.len())));
        }
        let cell = |i: usize| -> Result<f64> {
            let s = &rec[i];
            if s.is_empty() {
                return Err(Error::Data(format!("row {row}, column '{}': missing value", header[i])));
            }
            let v: f64 = s
                .parse()
                .map_err(|_| Error::Data(format!("row {row}, column '{}': '{s}' is not numeric", header[i])))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("row {row}, column '{}': non-finite value '{s}'", header[i])));
            }
            Ok(v)
        };
        let t = rec[t_idx].to_string();
        if t.is_empty() {
            return Err(Error::Data(format!("row {row}, column '{treatment_col}': missing value")));
        }
        raw_t.push(t);
        y.push(cell(y_idx)?);
        for &i in &cov_idx {
            x.push(cell(i)?);
        }
    }
    let n = raw_t.len();
    if n == 0 {
        return Err(Error::Data("file has no data rows".into()));
    }
    let labels = sorted_labels(&raw_t);
    if labels.len() < 2 {
        return Err(Error::Data("treatment column has a single level".into()));
    }
    let treatment: Vec<usize> = raw_t
        .iter()
        .map(|t| labels.iter().position(|l| l == t).expect("label collected"))
        .collect();
    let covariates = Array2::from_shape_vec((n, cov_idx.len()), x).expect("row-major fill");
    let names = cov_idx.iter().map(|&i| header[i].clone()).collect();
    PooledDataset::new(covariates, treatment, Array1::from(y), labels.len())?
        .with_names(names)?
        .with_treatment_labels(labels)
}

/// Distinct labels, numerically sorted when all parse as integers.
fn sorted_labels(raw: &[String]) -> Vec<String> {
    let distinct: BTreeSet<&String> = raw.iter().collect();
    let mut labels: Vec<String> = distinct.into_iter().cloned().collect();
    if labels.iter().all(|l| l.parse::<i64>().is_ok()) {
        labels.sort_by_key(|l| l.parse::<i64>().unwrap());
    }
    labels
}

/// Writes treatment (as its original label), outcome, then covariates.
/// Values use the shortest representation that parses back exactly.
pub fn export_csv(data: &PooledDataset<f64>, path: impl AsRef<Path>, treatment_col: &str, outcome_col: &str) -> Result<()> {
    let file = File::create(path.as_ref())?;
    write_csv(data, file, treatment_col, outcome_col)
}

pub fn write_csv<W: Write>(data: &PooledDataset<f64>, writer: W, treatment_col: &str, outcome_col: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let data_err = |e: csv::Error| Error::Data(e.to_string());
    let mut header = vec![treatment_col.to_string(), outcome_col.to_string()];
    header.extend(data.covariate_names().iter().cloned());
    w.write_record(&header).map_err(data_err)?;
    let x = data.covariates();
    for i in 0..data.n() {
        let mut rec = vec![
            data.treatment_labels()[data.treatment()[i]].clone(),
            data.outcome()[i].to_string(),
        ];
        rec.extend(x.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(data_err)?;
    }
    w.flush()?;
    Ok(())
}

/// One selected covariate name per line.
pub fn write_support(path: impl AsRef<Path>, support: &SupportSet, names: &[String]) -> Result<()> {
    let mut f = File::create(path.as_ref())?;
    for &i in support.indices() {
        match names.get(i) {
            Some(name) => writeln!(f, "{name}")?,
            None => writeln!(f, "{i}")?,
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Truth<'a> {
    support: &'a [usize],
    /// Row `i` of the true coefficient matrix.
    theta: Vec<Vec<f64>>,
    population_ate: Vec<Vec<f64>>,
    sample_ate: Vec<Vec<f64>>,
}

fn rows(a: ndarray::ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Ground truth of a synthetic draw as TOML.
pub fn truth_toml(draw: &SynthDraw) -> Result<String> {
    let truth = Truth {
        support: draw.true_support.indices(),
        theta: rows(draw.true_theta.values()),
        population_ate: rows(draw.population_ate.view()),
        sample_ate: rows(draw.sample_ate.view()),
    };
    toml::to_string(&truth).map_err(|e| Error::Data(format!("truth serialization: {e}")))
}
