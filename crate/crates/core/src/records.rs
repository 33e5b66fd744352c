//! Line-delimited JSON record files with a versioned header line.
//!
//! Every file starts with `{"format": ..., "version": ..., "provenance": ...}`
//! followed by one serialized record per line.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const RECORD_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Json { path: String, line: usize, source: serde_json::Error },
    #[error("{path}: expected format '{expected}' version {RECORD_VERSION}, found '{found}' version {version}")]
    Format { path: String, expected: String, found: String, version: u32 },
    #[error("{path}: empty file")]
    Empty { path: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub provenance: Value,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RecordError + '_ {
    move |source| RecordError::Io { path: path.display().to_string(), source }
}

pub fn write_records<T: Serialize>(
    path: &Path,
    format: &str,
    provenance: &Value,
    records: impl IntoIterator<Item = T>,
) -> Result<(), RecordError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let header = Header { format: format.to_string(), version: RECORD_VERSION, provenance: provenance.clone() };
    let mut out = String::new();
    out.push_str(&to_line(path, &header, 1)?);
    out.push('\n');
    for (i, r) in records.into_iter().enumerate() {
        out.push_str(&to_line(path, &r, i + 2)?);
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(out.as_bytes()).map_err(io_err(path))
}

pub fn read_records<T: DeserializeOwned>(path: &Path, format: &str) -> Result<(Header, Vec<T>), RecordError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(f).lines();
    let p = || path.display().to_string();
    let first = lines.next().ok_or_else(|| RecordError::Empty { path: p() })?.map_err(io_err(path))?;
    let header: Header =
        serde_json::from_str(&first).map_err(|source| RecordError::Json { path: p(), line: 1, source })?;
    if header.format != format || header.version != RECORD_VERSION {
        return Err(RecordError::Format {
            path: p(),
            expected: format.to_string(),
            found: header.format,
            version: header.version,
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|source| RecordError::Json { path: p(), line: i + 2, source })?);
    }
    Ok((header, records))
}

/// Writes a single JSON document wrapped with the same header fields.
pub fn write_document<T: Serialize>(path: &Path, format: &str, provenance: &Value, body: &T) -> Result<(), RecordError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let doc = serde_json::json!({
        "format": format,
        "version": RECORD_VERSION,
        "provenance": provenance,
        "body": body,
    });
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|source| RecordError::Json { path: path.display().to_string(), line: 0, source })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_document<T: DeserializeOwned>(path: &Path, format: &str) -> Result<(Header, T), RecordError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let p = || path.display().to_string();
    #[derive(Deserialize)]
    struct Doc<T> {
        format: String,
        version: u32,
        provenance: Value,
        body: T,
    }
    let doc: Doc<T> = serde_json::from_str(&text).map_err(|source| RecordError::Json { path: p(), line: 0, source })?;
    if doc.format != format || doc.version != RECORD_VERSION {
        return Err(RecordError::Format { path: p(), expected: format.to_string(), found: doc.format, version: doc.version });
    }
    Ok((Header { format: doc.format, version: doc.version, provenance: doc.provenance }, doc.body))
}

fn to_line<T: Serialize>(path: &Path, value: &T, line: usize) -> Result<String, RecordError> {
    serde_json::to_string(value).map_err(|source| RecordError::Json { path: path.display().to_string(), line, source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        a: u32,
        b: Vec<f64>,
    }

    #[test]
    fn header_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        let rows = vec![Row { a: 1, b: vec![0.5] }, Row { a: 2, b: vec![] }];
        write_records(&path, "rows", &serde_json::json!({"seed": 3}), &rows).unwrap();
        let (h, back): (Header, Vec<Row>) = read_records(&path, "rows").unwrap();
        assert_eq!(h.provenance["seed"], 3);
        assert_eq!(back, rows);
        assert!(matches!(read_records::<Row>(&path, "other"), Err(RecordError::Format { .. })));
    }
}
