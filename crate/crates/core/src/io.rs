//! Shared text formats.
//!
//! Every real number written by this crate uses 17 significant digits in
//! scientific notation (`{:.16e}`), which round-trips `f64` exactly.
//! [`GridField`](crate::grid::GridField) CSVs have header `x,y,value`, one
//! row per node with `x` varying fastest.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn parse_f64(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads a numeric CSV whose first line must equal `header`; returns rows of
/// exactly `header`'s column count.
pub fn read_numeric_csv(path: &Path, header: &str) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == header => {}
        _ => return Err(Error::parse(path, 1, format!("expected header `{header}`"))),
    }
    let cols = header.split(',').count();
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(parse_f64)
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::parse(path, k + 2, "non-numeric or non-finite field"))?;
        if row.len() != cols {
            return Err(Error::parse(
                path,
                k + 2,
                format!("expected {cols} fields, found {}", row.len()),
            ));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_numeric_csv<'a, I>(path: &Path, header: &str, rows: I) -> Result<()>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut out = String::with_capacity(1024);
    out.push_str(header);
    out.push('\n');
    for row in rows {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn seventeen_digits_round_trip(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let s = fmt_f64(v);
            prop_assert_eq!(parse_f64(&s).unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn csv_header_and_width_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "x,y\n1,2\n").unwrap();
        assert!(read_numeric_csv(&p, "x,y,value").is_err());
        fs::write(&p, "x,y,value\n1,2\n").unwrap();
        match read_numeric_csv(&p, "x,y,value") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        fs::write(&p, "x,y,value\n1,2,nan\n").unwrap();
        assert!(read_numeric_csv(&p, "x,y,value").is_err());
    }
}
