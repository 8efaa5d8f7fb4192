//! Line-delimited JSON helpers.
//!
//! Writers go through a temp file and a rename so a half-written stage file
//! never looks complete to the resume logic.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("serializing record for {path}: {source}")]
    Encode {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> JsonlError + '_ {
    move |source| JsonlError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads every non-blank line of `path` as one `T`.
pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| JsonlError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(value);
    }
    Ok(out)
}

/// Serializes records one per line, `\n`-terminated.
pub fn to_string<T: Serialize>(records: &[T]) -> Result<String, serde_json::Error> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// Atomically replaces `path` with the serialized records.
pub fn write<T: Serialize>(path: &Path, records: &[T]) -> Result<(), JsonlError> {
    let body = to_string(records).map_err(|source| JsonlError::Encode {
        path: path.to_path_buf(),
        source,
    })?;
    write_atomic(path, body.as_bytes()).map_err(io_err(path))
}

/// Atomically replaces `path` with `bytes`.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), JsonlError> {
    write_atomic(path, bytes).map_err(io_err(path))
}

/// Atomically writes one pretty-printed JSON document.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), JsonlError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|source| JsonlError::Encode {
        path: path.to_path_buf(),
        source,
    })?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = tmp_path(path);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(bytes)?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ScoredResponse;
    use crate::types::Verdict;

    #[test]
    fn write_then_read_skips_blank_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/scores.jsonl");
        let recs = vec![ScoredResponse {
            question_id: "q".into(),
            sample_index: 2,
            score: -1,
            verdicts: vec![Verdict {
                fact_id: "q:2:0".into(),
                delta: -1,
            }],
        }];
        write(&path, &recs).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("\n   \n");
        fs::write(&path, text).unwrap();
        let back: Vec<ScoredResponse> = read(&path).unwrap();
        assert_eq!(back, recs);
        assert!(!tmp_path(&path).exists());
    }

    #[test]
    fn parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"a\":1}\nnot json\n").unwrap();
        let err = read::<serde_json::Value>(&path).unwrap_err();
        assert!(matches!(err, JsonlError::Parse { line: 2, .. }), "{err}");
    }
}
