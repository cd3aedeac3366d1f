//! CSV persistence of ensembles and predictions: header row, one row per
//! member, shortest round-trip decimals, LF line endings.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::stats::{Ensemble, PredictionSet};

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Writes the columns of `values` (`n_fields × n_rows`) as CSV rows.
pub fn write_columns_csv(path: &Path, header: &[String], values: &DMatrix<f64>) -> Result<()> {
    if header.len() != values.nrows() {
        return Err(Error::Dimension {
            context: "csv header",
            expected: values.nrows(),
            found: header.len(),
        });
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    let mut row = Vec::with_capacity(values.nrows());
    for col in values.column_iter() {
        row.clear();
        row.extend(col.iter().map(|v| format!("{v:?}")));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a CSV written by [`write_columns_csv`] back into header and
/// `n_fields × n_rows` values.
pub fn read_columns_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for record in r.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        for field in record.iter() {
            data.push(field.parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                message: format!("row {}: {e}", rows + 1),
            })?);
        }
        rows += 1;
    }
    Ok((header.clone(), DMatrix::from_vec(header.len(), rows, data)))
}

pub fn write_ensemble(path: &Path, e: &Ensemble) -> Result<()> {
    write_columns_csv(path, e.names(), e.params())
}

pub fn read_ensemble(path: &Path) -> Result<Ensemble> {
    let (names, values) = read_columns_csv(path)?;
    Ensemble::new(values, names)
}

pub fn prediction_header(n: usize) -> Vec<String> {
    (1..=n).map(|k| format!("y{k}")).collect()
}

pub fn write_predictions(path: &Path, p: &PredictionSet) -> Result<()> {
    write_columns_csv(path, &prediction_header(p.n_outputs()), p.outputs())
}
