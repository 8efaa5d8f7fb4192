use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{EmbedError, Embedder};

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    vector: Vec<f64>,
}

/// Append-only on-disk cache keyed by `(backend id, normalized text)`.
///
/// Readers share the in-memory map; appends are serialized through one file
/// handle.
pub struct EmbeddingCache {
    path: PathBuf,
    entries: RwLock<HashMap<String, Vec<f64>>>,
    writer: Mutex<File>,
}

fn cache_key(backend: &str, text: &str) -> String {
    format!("{backend}\u{1f}{text}")
}

impl EmbeddingCache {
    /// Opens or creates the cache; a truncated trailing line is ignored.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let existing = match std::fs::read(path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e),
        };
        let mut entries = HashMap::new();
        for line in existing.split(|&b| b == b'\n') {
            if let Ok(rec) = serde_json::from_slice::<CacheLine>(line) {
                entries.insert(rec.key, rec.vector);
            }
        }
        let mut writer = OpenOptions::new().create(true).append(true).open(path)?;
        if existing.last().is_some_and(|&b| b != b'\n') {
            writer.write_all(b"\n")?;
        }
        Ok(EmbeddingCache {
            path: path.to_path_buf(),
            entries: RwLock::new(entries),
            writer: Mutex::new(writer),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, backend: &str, text: &str) -> Option<Vec<f64>> {
        self.entries
            .read()
            .expect("cache lock poisoned")
            .get(&cache_key(backend, text))
            .cloned()
    }

    pub fn insert(&self, backend: &str, text: &str, vector: Vec<f64>) -> std::io::Result<()> {
        let key = cache_key(backend, text);
        let mut line = serde_json::to_string(&CacheLine {
            key: key.clone(),
            vector: vector.clone(),
        })
        .map_err(std::io::Error::other)?;
        line.push('\n');
        {
            let mut w = self.writer.lock().expect("cache writer poisoned");
            w.write_all(line.as_bytes())?;
            w.flush()?;
        }
        self.entries
            .write()
            .expect("cache lock poisoned")
            .insert(key, vector);
        Ok(())
    }
}

/// Wraps a backend so only cache misses reach it.
pub struct CachedEmbedder<E> {
    inner: E,
    cache: EmbeddingCache,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn new(inner: E, cache: EmbeddingCache) -> Self {
        CachedEmbedder { inner, cache }
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let backend = self.inner.backend_id();
        let mut out: Vec<Option<Vec<f64>>> =
            texts.iter().map(|t| self.cache.get(&backend, t)).collect();
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let query: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let fresh = self.inner.embed_texts(&query)?;
            if fresh.len() != query.len() {
                return Err(EmbedError::BadResponse(format!(
                    "expected {} vectors, got {}",
                    query.len(),
                    fresh.len()
                )));
            }
            for (&i, v) in missing.iter().zip(fresh) {
                self.cache.insert(&backend, &texts[i], v.clone())?;
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled above")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting {
        calls: AtomicUsize,
        texts: AtomicUsize,
    }

    impl Embedder for Counting {
        fn backend_id(&self) -> String {
            "counting".into()
        }
        fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.texts.fetch_add(texts.len(), Ordering::SeqCst);
            Ok(texts.iter().map(|t| vec![t.len() as f64, 1.0]).collect())
        }
    }

    #[test]
    fn second_pass_hits_cache_and_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let texts: Vec<String> = vec!["a b c".into(), "dd ee".into()];
        let first = {
            let e = CachedEmbedder::new(
                Counting { calls: 0.into(), texts: 0.into() },
                EmbeddingCache::open(&path).unwrap(),
            );
            let v = e.embed_texts(&texts).unwrap();
            e.embed_texts(&texts).unwrap();
            assert_eq!(e.inner.calls.load(Ordering::SeqCst), 1);
            v
        };
        let e = CachedEmbedder::new(
            Counting { calls: 0.into(), texts: 0.into() },
            EmbeddingCache::open(&path).unwrap(),
        );
        let mut more = texts.clone();
        more.push("new one".into());
        let v = e.embed_texts(&more).unwrap();
        assert_eq!(&v[..2], &first[..]);
        assert_eq!(e.inner.texts.load(Ordering::SeqCst), 1);
        assert_eq!(e.cache().len(), 3);
    }

    #[test]
    fn truncated_tail_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        std::fs::write(&path, "{\"key\":\"x\\u001ft\",\"vector\":[1.0]}\n{\"key\":\"x").unwrap();
        let c = EmbeddingCache::open(&path).unwrap();
        assert_eq!(c.get("x", "t"), Some(vec![1.0]));
        assert_eq!(c.len(), 1);
        c.insert("x", "u", vec![2.0]).unwrap();
        drop(c);
        let c = EmbeddingCache::open(&path).unwrap();
        assert_eq!(c.get("x", "u"), Some(vec![2.0]));
    }
}
