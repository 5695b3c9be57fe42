//! Text serialization of attention maps and score matrices.
//!
//! Every map is written as a `rows cols` header line followed by one line
//! per row of fixed-precision decimals — wide enough (12 places) that a
//! reader can re-verify row-stochasticity and compare against in-process
//! values at the printed precision.

use std::fs;
use std::path::Path;

use crate::diffusion::MapSnapshot;
use crate::error::Error;
use crate::Result;

/// Render a matrix as the dump text format.
pub fn format_map(rows: usize, cols: usize, values: &[f64]) -> Result<String> {
    if values.len() != rows * cols {
        return Err(Error::Shape {
            op: "format_map",
            detail: format!(
                "{rows}x{cols} header does not cover {} values",
                values.len()
            ),
        });
    }
    let mut out = format!("{rows} {cols}\n");
    for row in values.chunks(cols.max(1)) {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            out.push_str(&format!("{v:.12}"));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn format_snapshot(map: &MapSnapshot) -> Result<String> {
    format_map(map.rows, map.cols, &map.values)
}

/// Parse the dump format back; the counterpart to `format_map`, used by
/// tests and by readers of dumped artifacts.
pub fn parse_map(text: &str) -> Result<MapSnapshot> {
    let corrupt = |detail: String| Error::Shape {
        op: "parse_map",
        detail,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| corrupt("empty dump".into()))?;
    let mut parts = header.split_whitespace();
    let parse_dim = |p: Option<&str>| -> Result<usize> {
        p.and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt(format!("bad header {header:?}")))
    };
    let rows = parse_dim(parts.next())?;
    let cols = parse_dim(parts.next())?;
    let mut values = Vec::with_capacity(rows * cols);
    for (i, line) in lines.enumerate() {
        if i >= rows {
            if line.trim().is_empty() {
                continue;
            }
            return Err(corrupt(format!("more than {rows} rows")));
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|p| {
                p.parse()
                    .map_err(|_| corrupt(format!("bad value {p:?} in row {i}")))
            })
            .collect::<Result<_>>()?;
        if row.len() != cols {
            return Err(corrupt(format!(
                "row {i} has {} values, expected {cols}",
                row.len()
            )));
        }
        values.extend(row);
    }
    if values.len() != rows * cols {
        return Err(corrupt(format!("expected {rows} rows, fewer arrived")));
    }
    Ok(MapSnapshot { rows, cols, values })
}

/// Write one map to `dir/name.txt`.
pub fn write_map(dir: &Path, name: &str, map: &MapSnapshot) -> Result<()> {
    let path = dir.join(format!("{name}.txt"));
    fs::write(&path, format_snapshot(map)?).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}
