//! CSV/JSON plumbing shared by the run directory and the CLI.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{HfatError, Result};

/// 17 significant digits; parses back to the identical `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| format!("bad number {s:?}: {e}"))
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(|e| HfatError::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(f))
}

/// Writes a header row and records, each already rendered to strings.
pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv_writer(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| HfatError::io(path, e))?;
    Ok(())
}

/// Reads a headered CSV into string records, checking the header.
pub fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<Vec<String>>> {
    let f = fs::File::open(path).map_err(|e| HfatError::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(f);
    let got: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if got != header {
        return Err(HfatError::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected header {header:?}, got {got:?}"),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| HfatError::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            msg: e.to_string(),
        })?;
        if rec.len() != header.len() {
            return Err(HfatError::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                msg: format!("expected {} fields, got {}", header.len(), rec.len()),
            });
        }
        out.push(rec.iter().map(str::to_owned).collect());
    }
    Ok(out)
}

pub(crate) fn field<T: std::str::FromStr>(path: &Path, line: usize, s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.trim().parse::<T>().map_err(|e| HfatError::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("bad field {s:?}: {e}"),
    })
}

pub(crate) fn float_field(path: &Path, line: usize, s: &str) -> Result<f64> {
    parse_f64(s).map_err(|msg| HfatError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| HfatError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| HfatError::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}
