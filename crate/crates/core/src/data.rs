//! Input/output datasets: CSV ingestion and normalization.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::NormalizationRecord;

/// Paired input and output signals.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(u: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if u.len() != y.len() {
            return Err(Error::Dimension(format!("{} inputs against {} outputs", u.len(), y.len())));
        }
        if u.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::Domain("dataset contains non-finite values".into()));
        }
        Ok(Dataset { u, y })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// Columns of a `u,y` CSV. `y` is `None` when the file carries inputs only.
pub struct Columns {
    pub u: Vec<f64>,
    pub y: Option<Vec<f64>>,
}

/// Parse a CSV with a `u` column and, unless `require_y` is false, a `y` column.
pub fn read_columns<R: Read>(reader: R, require_y: bool) -> Result<Columns> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let u_col = find("u").ok_or_else(|| Error::Parse {
        line: 1,
        msg: "missing `u` column".into(),
    })?;
    let y_col = find("y");
    if require_y && y_col.is_none() {
        return Err(Error::Parse {
            line: 1,
            msg: "missing `y` column".into(),
        });
    }

    let mut u = Vec::new();
    let mut y = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |col: usize, name: &str| -> Result<f64> {
            let raw = rec.get(col).ok_or_else(|| Error::Parse {
                line,
                msg: format!("missing `{name}` value"),
            })?;
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("`{raw}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("non-finite `{name}` value `{raw}`"),
                });
            }
            Ok(v)
        };
        u.push(field(u_col, "u")?);
        if let Some(c) = y_col {
            y.push(field(c, "y")?);
        }
    }
    if u.is_empty() {
        return Err(Error::Domain("dataset has no rows".into()));
    }
    Ok(Columns {
        u,
        y: y_col.map(|_| y),
    })
}

pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
    let cols = read_columns(reader, true)?;
    Dataset::new(cols.u, cols.y.expect("y column required"))
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    read_csv(std::fs::File::open(path)?)
}

pub fn load_columns(path: impl AsRef<Path>) -> Result<Columns> {
    read_columns(std::fs::File::open(path)?, false)
}

pub fn write_csv<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    writeln!(w, "u,y")?;
    for (u, y) in ds.u.iter().zip(&ds.y) {
        writeln!(w, "{u},{y}")?;
    }
    Ok(())
}

/// Normalize inputs to `[0, 1]` and standardize outputs, with statistics
/// taken from the first `estimation_len` samples only.
pub fn normalize(ds: &Dataset, estimation_len: usize) -> Result<(Dataset, NormalizationRecord)> {
    if estimation_len == 0 || estimation_len > ds.len() {
        return Err(Error::Domain(format!(
            "estimation split {estimation_len} invalid for {} samples",
            ds.len()
        )));
    }
    let rec = NormalizationRecord::fit(&ds.u[..estimation_len], &ds.y[..estimation_len])?;
    Ok((apply(ds, &rec), rec))
}

/// Apply a stored normalization to a dataset.
pub fn apply(ds: &Dataset, rec: &NormalizationRecord) -> Dataset {
    Dataset {
        u: ds.u.iter().map(|&v| rec.input(v)).collect(),
        y: ds.y.iter().map(|&v| rec.output(v)).collect(),
    }
}
