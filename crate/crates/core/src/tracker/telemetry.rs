use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

use super::GuardOutput;

/// One per-step monitoring record. Slot indices are one-based.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TelemetryRow {
    pub t: usize,
    /// `None` while the score is invalid.
    pub tide: Option<f64>,
    pub valid: bool,
    #[serde(serialize_with = "real_or_inf")]
    pub q_hat: f64,
    pub flagged: bool,
    pub s: Vec<f64>,
    pub peaked: Vec<bool>,
    pub recovered: bool,
    pub k_star: Option<usize>,
}

fn real_or_inf<S: serde::Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_f64(*x)
    } else {
        s.serialize_str(&x.to_string())
    }
}

impl TelemetryRow {
    pub fn from_output(out: &GuardOutput, q_hat: f64) -> Self {
        Self {
            t: out.t,
            tide: out.tide.valid.then_some(out.tide.value),
            valid: out.tide.valid,
            q_hat,
            flagged: out.flagged,
            s: out.similarities.clone(),
            peaked: out.peaked.clone(),
            recovered: out.recovered,
            k_star: out.k_star.map(|k| k + 1),
        }
    }
}

fn header(k: usize) -> Vec<String> {
    let mut cols: Vec<String> = ["t", "tide", "valid", "q_hat", "flagged"].map(String::from).to_vec();
    cols.extend((1..=k).map(|i| format!("s_{i}")));
    cols.extend((1..=k).map(|i| format!("peaked_{i}")));
    cols.push("recovered".into());
    cols.push("k_star".into());
    cols
}

fn flag(b: bool) -> String {
    u8::from(b).to_string()
}

/// Writes rows as CSV; `num_slots` fixes the width of the slot columns.
pub fn write_telemetry_csv(path: &Path, num_slots: usize, rows: &[TelemetryRow]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header(num_slots)).map_err(|e| csv_error(path, e))?;
    for row in rows {
        if row.s.len() != num_slots || row.peaked.len() != num_slots {
            return Err(Error::Dimension(format!("telemetry row t = {} has the wrong slot count", row.t)));
        }
        let mut rec = vec![
            row.t.to_string(),
            row.tide.map(|v| v.to_string()).unwrap_or_default(),
            flag(row.valid),
            row.q_hat.to_string(),
            flag(row.flagged),
        ];
        rec.extend(row.s.iter().map(f64::to_string));
        rec.extend(row.peaked.iter().map(|&p| flag(p)));
        rec.push(flag(row.recovered));
        rec.push(row.k_star.map(|k| k.to_string()).unwrap_or_default());
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes rows as JSON lines.
pub fn write_telemetry_jsonl(path: &Path, rows: &[TelemetryRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| Error::parse("telemetry row", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{}: {other:?}", path.display())),
    }
}
