//! Deterministic CSV metric emission: fixed column schemas, stable row
//! order, reals at 12 significant digits.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColumnKind {
    Int,
    Real,
    Text,
}

#[derive(Clone, Debug)]
pub struct Schema {
    pub columns: Vec<(String, ColumnKind)>,
}

impl Schema {
    pub fn new(columns: &[(&str, ColumnKind)]) -> Self {
        Schema {
            columns: columns
                .iter()
                .map(|(n, k)| (n.to_string(), *k))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Int(i64),
    Real(f64),
    Text(String),
}

/// 12 significant digits in exponent form; parses back within 1e-12
/// relative and is byte-stable across runs.
pub fn format_real(x: f64) -> String {
    format!("{x:.11e}")
}

pub fn write_metrics(path: &Path, schema: &Schema, rows: &[Vec<Value>]) -> Result<()> {
    for (r, row) in rows.iter().enumerate() {
        if row.len() != schema.columns.len() {
            return Err(Error::Schema {
                column: format!("<row {r}>"),
                what: format!(
                    "row has {} values, schema has {} columns",
                    row.len(),
                    schema.columns.len()
                ),
            });
        }
        for ((name, kind), value) in schema.columns.iter().zip(row) {
            let ok = matches!(
                (kind, value),
                (ColumnKind::Int, Value::Int(_))
                    | (ColumnKind::Real, Value::Real(_))
                    | (ColumnKind::Text, Value::Text(_))
            );
            if !ok {
                return Err(Error::Schema {
                    column: name.clone(),
                    what: format!("value {value:?} does not match {kind:?}"),
                });
            }
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<&str> = schema.columns.iter().map(|(n, _)| n.as_str()).collect();
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .map(|v| match v {
                Value::Int(i) => i.to_string(),
                Value::Real(x) => format_real(*x),
                Value::Text(s) => s.clone(),
            })
            .collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema::new(&[
            ("epoch", ColumnKind::Int),
            ("loss", ColumnKind::Real),
            ("method", ColumnKind::Text),
        ])
    }

    #[test]
    fn empty_rows_write_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics(&path, &schema(), &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "epoch,loss,method\n");
    }

    #[test]
    fn reread_matches_written_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let values = [1.234567890123456e-7, 3.0, -2.5e11, 0.1 + 0.2];
        let rows: Vec<Vec<Value>> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                vec![
                    Value::Int(i as i64),
                    Value::Real(v),
                    Value::Text("x".to_string()),
                ]
            })
            .collect();
        write_metrics(&path, &schema(), &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        for (line, &v) in text.lines().skip(1).zip(&values) {
            let cell = line.split(',').nth(1).unwrap();
            let parsed: f64 = cell.parse().unwrap();
            assert!(
                (parsed - v).abs() <= 1e-12 * v.abs().max(1.0),
                "{parsed} vs {v}"
            );
        }
    }

    #[test]
    fn kind_mismatch_names_the_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![vec![
            Value::Int(0),
            Value::Text("oops".to_string()),
            Value::Text("x".to_string()),
        ]];
        match write_metrics(&path, &schema(), &rows) {
            Err(Error::Schema { column, .. }) => assert_eq!(column, "loss"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn arity_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![vec![Value::Int(0)]];
        assert!(write_metrics(&path, &schema(), &rows).is_err());
    }
}
