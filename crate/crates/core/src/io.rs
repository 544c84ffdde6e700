//! Shared CSV helpers for index-keyed numeric tables.

use std::io::Read;

use crate::error::{Error, Result};

/// Reads a header + rows table whose first column is an integer row key and
/// whose remaining columns are reals.
pub(crate) fn read_indexed_matrix<R: Read>(reader: R) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let mut fields = rec.iter();
        let key = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::Parse {
                line,
                message: "first column must be a segment index".into(),
            })?;
        let values = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("`{f}` is not a number"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((key, values));
    }
    Ok(out)
}
