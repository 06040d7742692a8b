//! Minimal reader for the comma-separated report files written by the
//! evaluators. Fields never contain commas or quotes, so no quoting is
//! needed; lines starting with `#` carry metadata and are skipped.

use std::io::BufRead;
use std::str::FromStr;

use super::EvalError;

/// Data rows of a file that must start with exactly `header`.
pub fn read_rows<R: BufRead>(reader: R, header: &str) -> Result<Vec<Vec<String>>, EvalError> {
    let width = header.split(',').count();
    let mut lines = reader.lines();
    let first = lines.next().transpose().map_err(io)?;
    if first.as_deref().map(|h| h.trim_end_matches('\r')) != Some(header) {
        return Err(EvalError::InvalidArgument(format!("expected header `{header}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io)?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(str::to_string).collect();
        if fields.len() != width {
            return Err(EvalError::InvalidArgument(format!(
                "row {}: expected {width} fields, got {}",
                i + 1,
                fields.len()
            )));
        }
        rows.push(fields);
    }
    Ok(rows)
}

/// Parses one field, naming it in the error.
pub fn field<T: FromStr>(row: &[String], i: usize, name: &str) -> Result<T, EvalError> {
    row[i].parse().map_err(|_| EvalError::InvalidArgument(format!("field {name}: cannot parse {:?}", row[i])))
}

fn io(e: std::io::Error) -> EvalError {
    EvalError::InvalidArgument(format!("I/O error: {e}"))
}
