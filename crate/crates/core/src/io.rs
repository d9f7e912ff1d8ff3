//! CSV ingestion and export.
//!
//! Files are comma-separated with a mandatory header row. Every column must
//! be numeric; missing cells are rejected rather than imputed.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::glm::Dataset;

/// A loaded dataset together with non-fatal diagnostics.
#[derive(Debug, Clone)]
pub struct LoadedCsv {
    pub data: Dataset,
    pub warnings: Vec<String>,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "na" | "NaN" | "nan" | "?" | ".")
}

/// Read a dataset from `reader`. `response` names the response column; all
/// other columns become covariates in file order behind an intercept.
/// Columns named in `standardize` are centered and scaled to unit sample
/// standard deviation.
pub fn read_csv<R: Read>(reader: R, response: &str, standardize: &[String]) -> Result<LoadedCsv> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Io(format!("reading header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let resp = header
        .iter()
        .position(|h| h == response)
        .ok_or_else(|| Error::invalid(format!("response column '{response}' not in header")))?;
    for s in standardize {
        if !header.contains(s) || s == response {
            return Err(Error::invalid(format!("cannot standardize '{s}': not a covariate column")));
        }
    }
    let mut values: Vec<f64> = Vec::new();
    let mut n = 0;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        for (cell, name) in rec.iter().zip(&header) {
            if is_missing(cell) {
                return Err(Error::Parse {
                    row,
                    column: name.clone(),
                    message: "missing value".into(),
                });
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: name.clone(),
                message: format!("'{cell}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: name.clone(),
                    message: format!("'{cell}' is not finite"),
                });
            }
            values.push(v);
        }
        n += 1;
    }
    let all = Array2::from_shape_vec((n, header.len()), values).expect("rectangular");
    let y = all.column(resp).to_owned();
    let cov_idx: Vec<usize> = (0..header.len()).filter(|&c| c != resp).collect();
    let names: Vec<String> = cov_idx.iter().map(|&c| header[c].clone()).collect();
    let mut cov = all.select(ndarray::Axis(1), &cov_idx);
    let mut warnings = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let col = cov.column(k);
        let first = col.first().copied().unwrap_or(0.0);
        if col.iter().all(|&v| v == first) {
            warnings.push(format!("column '{name}' is constant"));
            continue;
        }
        if standardize.contains(name) {
            let mean = col.mean().unwrap_or(0.0);
            let sd = col.std(1.0);
            cov.column_mut(k).mapv_inplace(|v| (v - mean) / sd);
        }
    }
    Ok(LoadedCsv {
        data: Dataset::from_covariates(y, &cov, Some(names))?,
        warnings,
    })
}

pub fn load_csv(path: impl AsRef<Path>, response: &str, standardize: &[String]) -> Result<LoadedCsv> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_csv(file, response, standardize)
}

/// Write `data` with the response first under `response`, then the
/// covariates (intercept omitted). Values use the shortest representation
/// that parses back to the same `f64`.
pub fn write_csv<W: Write>(writer: W, data: &Dataset, response: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(e.to_string());
    let mut header = vec![response.to_string()];
    header.extend(data.column_names()[1..].iter().cloned());
    w.write_record(&header).map_err(io)?;
    let mut buf = Vec::with_capacity(header.len());
    for i in 0..data.n() {
        buf.clear();
        buf.push(data.y()[i].to_string());
        buf.extend(data.x().row(i).iter().skip(1).map(f64::to_string));
        w.write_record(&buf).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(path: impl AsRef<Path>, data: &Dataset, response: &str) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    write_csv(file, data, response)
}

/// Response and covariates as owned arrays, intercept dropped.
pub fn split_response(data: &Dataset) -> (Array1<f64>, Array2<f64>) {
    (
        data.y().clone(),
        data.x().slice(ndarray::s![.., 1..]).to_owned(),
    )
}
