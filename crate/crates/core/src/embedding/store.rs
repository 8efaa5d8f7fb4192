//! `embeddings.bin` plus its fact-id sidecar.
//!
//! Layout (little-endian): `u32 dim`, `u64 count`, then `count * dim` f32
//! values row by row. The sidecar holds one JSON string (the fact id) per
//! line, in row order.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::FactEmbedding;
use crate::jsonl::{self, JsonlError};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Sidecar(#[from] JsonlError),
    #[error("{0}: corrupt embeddings file ({1})")]
    Corrupt(PathBuf, String),
    #[error("embeddings have mixed dimensions ({0} vs {1})")]
    MixedDims(usize, usize),
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_stem()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    name.push(".ids.jsonl");
    path.with_file_name(name)
}

pub fn write_embeddings(path: &Path, embeddings: &[FactEmbedding]) -> Result<(), StoreError> {
    let dim = embeddings.first().map_or(0, FactEmbedding::dim);
    let mut bytes = Vec::with_capacity(12 + embeddings.len() * dim * 4);
    bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    bytes.extend_from_slice(&(embeddings.len() as u64).to_le_bytes());
    for e in embeddings {
        if e.dim() != dim {
            return Err(StoreError::MixedDims(dim, e.dim()));
        }
        for x in &e.vector {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let ids: Vec<&str> = embeddings.iter().map(|e| e.fact_id.as_str()).collect();
    jsonl::write(&sidecar_path(path), &ids)?;
    jsonl::write_atomic(path, &bytes).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_embeddings(path: &Path) -> Result<Vec<FactEmbedding>, StoreError> {
    let bytes = fs::read(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let corrupt = |msg: &str| StoreError::Corrupt(path.to_path_buf(), msg.to_string());
    if bytes.len() < 12 {
        return Err(corrupt("short header"));
    }
    let dim = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + count * dim * 4 {
        return Err(corrupt("payload length does not match header"));
    }
    let ids: Vec<String> = jsonl::read(&sidecar_path(path))?;
    if ids.len() != count {
        return Err(corrupt("sidecar id count does not match header"));
    }
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(row, fact_id)| {
            let start = 12 + row * dim * 4;
            let vector = bytes[start..start + dim * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            FactEmbedding { fact_id, vector }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip(rows in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 3), 0..20)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("embeddings.bin");
            let embs: Vec<FactEmbedding> = rows
                .into_iter()
                .enumerate()
                .map(|(i, vector)| FactEmbedding { fact_id: format!("q:{i}:0"), vector })
                .collect();
            write_embeddings(&path, &embs).unwrap();
            prop_assert_eq!(read_embeddings(&path).unwrap(), embs);
        }
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeddings.bin");
        let e = vec![FactEmbedding {
            fact_id: "a".into(),
            vector: vec![1.0, 0.0],
        }];
        write_embeddings(&path, &e).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_embeddings(&path), Err(StoreError::Corrupt(..))));
        assert_eq!(sidecar_path(&path), dir.path().join("embeddings.ids.jsonl"));
    }
}
