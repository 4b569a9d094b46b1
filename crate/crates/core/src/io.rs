//! CSV ingestion: a header row followed by numeric records.

use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::scalar::Scalar;

/// Numeric CSV contents, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_reader(file)
    }

    /// Rows in errors are file lines, counting the header as line 1.
    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut rdr =
            csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Ingestion { row: 1, msg: e.to_string() })?
            .iter()
            .map(str::to_string)
            .collect();
        if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
            return Err(Error::Ingestion { row: 1, msg: "missing header row".into() });
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Ingestion {
                row: e.position().map_or(line, |p| p.line() as usize),
                msg: e.to_string(),
            })?;
            let row = rec.position().map_or(line, |p| p.line() as usize);
            if rec.len() != headers.len() {
                return Err(Error::Ingestion {
                    row,
                    msg: format!("expected {} fields, found {}", headers.len(), rec.len()),
                });
            }
            let values = rec
                .iter()
                .zip(&headers)
                .map(|(field, name)| {
                    field.parse::<f64>().map_err(|_| Error::Ingestion {
                        row,
                        msg: format!("column `{name}`: `{field}` is not a number"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(values);
        }
        if rows.is_empty() {
            return Err(Error::Ingestion { row: 2, msg: "no data rows".into() });
        }
        Ok(Self { headers, rows })
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("column `{name}` not in header ({})", self.headers.join(", "))))
    }

    pub fn column<T: Scalar>(&self, name: &str) -> Result<Array1<T>> {
        let j = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| T::lit(r[j])).collect())
    }

    pub fn columns<T: Scalar>(&self, names: &[String]) -> Result<Array2<T>> {
        let idx = names.iter().map(|n| self.column_index(n)).collect::<Result<Vec<_>>>()?;
        Ok(Array2::from_shape_fn((self.rows.len(), idx.len()), |(i, j)| T::lit(self.rows[i][idx[j]])))
    }
}

/// Which named columns feed the response, the mean covariates `x1..xm` and
/// the dispersion covariates (the intercept is added automatically).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ColumnMap {
    pub y: String,
    pub x: Vec<String>,
    pub w: Vec<String>,
}

impl ColumnMap {
    /// Builds a dataset; `x` columns become `x1, x2, …` in formula order.
    pub fn dataset<T: Scalar>(&self, table: &CsvTable) -> Result<Dataset<T>> {
        let y = table.column(&self.y)?;
        let x = table.columns(&self.x)?;
        let w = table.columns(&self.w)?;
        Dataset::new(y, x, w)
    }
}

/// Reads a CSV file and maps its columns into a dataset.
pub fn load_dataset<T: Scalar>(path: impl AsRef<Path>, map: &ColumnMap) -> Result<Dataset<T>> {
    map.dataset(&CsvTable::from_path(path)?)
}
