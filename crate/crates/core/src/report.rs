//! Output plumbing shared by every command: run headers, config hashing,
//! line-delimited record files and tidy plot tables.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};

pub const SCHEMA_VERSION: &str = "ordergate/1";

/// First line of every record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub schema: String,
    pub kind: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
}

impl RunHeader {
    pub fn new(kind: &str, config_hash: &str, seeds: Vec<u64>) -> Self {
        RunHeader {
            schema: SCHEMA_VERSION.to_string(),
            kind: kind.to_string(),
            config_hash: config_hash.to_string(),
            seeds,
            backend: None,
        }
    }
}

/// SHA-256 over the canonical JSON encoding, hex, truncated to 16 chars.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let value = serde_json::to_value(config)?;
    let canonical = serde_json::to_string(&value)?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(hex::encode(digest)[..16].to_string())
}

/// Write a header line followed by one JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, header: &RunHeader, records: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &serde_json::json!({ "header": header }))?;
    out.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read a file written by [`write_jsonl`]. A missing header is tolerated so
/// hand-written inputs work.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Option<RunHeader>, Vec<T>)> {
    #[derive(Deserialize)]
    struct HeaderLine {
        header: RunHeader,
    }
    let reader = BufReader::new(File::open(path)?);
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            if let Ok(h) = serde_json::from_str::<HeaderLine>(&line) {
                header = Some(h.header);
                continue;
            }
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        records.push(rec);
    }
    Ok((header, records))
}

/// Tidy table: a `#` metadata line, a column header, then one row per point.
pub fn write_table(path: &Path, header: &RunHeader, columns: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(
        out,
        "# schema={} kind={} config_hash={} seeds={:?}",
        header.schema, header.kind, header.config_hash, header.seeds
    )?;
    writeln!(out, "{}", columns.join(","))?;
    for row in rows {
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Serialize `f64::INFINITY` as JSON `null` and read it back.
pub mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Serialize `NaN` as JSON `null` and read `null` back as `NaN`.
pub mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}
