//! Plain numeric CSV and digest helpers.
//!
//! Floats are written with `{:?}`, which is the shortest representation that
//! parses back to the identical bit pattern.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("bad number {s:?}: {e}")))
}

/// Write a header and rows of already formatted cells.
pub fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_matrix(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for r in rows {
        for (i, v) in r.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v:?}");
        }
        out.push('\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a CSV whose cells are all strings; returns header and rows.
pub fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty file", path.display())))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect::<Vec<_>>();
    let rows = lines
        .map(|l| l.split(',').map(|s| s.trim().to_string()).collect::<Vec<_>>())
        .collect::<Vec<_>>();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != header.len() {
            return Err(Error::Parse(format!("{}: row {} has {} cells, expected {}", path.display(), i + 1, r.len(), header.len())));
        }
    }
    Ok((header, rows))
}

pub fn read_matrix(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let (header, rows) = read_rows(path)?;
    let rows = rows
        .iter()
        .map(|r| r.iter().map(|c| parse_f64(c)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok((header, rows))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![vec![0.1 + 0.2, 1e-300, -3.5e17], vec![f64::NAN, 2.0, 1.0 / 3.0]];
        write_matrix(&p, &["a", "b", "c"], &rows).unwrap();
        let (h, back) = read_matrix(&p).unwrap();
        assert_eq!(h, vec!["a", "b", "c"]);
        assert_eq!(back[0], rows[0]);
        assert!(back[1][0].is_nan());
        assert_eq!(back[1][1..], rows[1][1..]);
    }
}
