use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{EmbedError, Embedder};
use crate::util::parallel_indexed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteEmbedderConfig {
    /// Base URL; requests go to `{url}/embeddings`.
    pub url: String,
    pub model: String,
    pub batch_size: usize,
    pub max_parallel: usize,
    pub timeout_secs: f64,
}

impl Default for RemoteEmbedderConfig {
    fn default() -> Self {
        RemoteEmbedderConfig {
            url: "http://localhost:8000/v1".into(),
            model: "princeton-nlp/sup-simcse-bert-base-uncased".into(),
            batch_size: 64,
            max_parallel: 4,
            timeout_secs: 60.0,
        }
    }
}

/// OpenAI-compatible `/embeddings` client.
pub struct RemoteEmbedder {
    cfg: RemoteEmbedderConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

impl RemoteEmbedder {
    pub fn new(cfg: RemoteEmbedderConfig, api_key: Option<String>) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| EmbedError::EndpointUnreachable(e.to_string()))?;
        Ok(RemoteEmbedder {
            cfg,
            api_key,
            client,
        })
    }

    fn endpoint(&self) -> String {
        format!("{}/embeddings", self.cfg.url.trim_end_matches('/'))
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let mut req = self
            .client
            .post(self.endpoint())
            .json(&json!({ "model": self.cfg.model, "input": texts }));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| EmbedError::EndpointUnreachable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(EmbedError::Http {
                status: status.as_u16(),
                body: resp.text().unwrap_or_default(),
            });
        }
        let body: EmbeddingResponse = resp
            .json()
            .map_err(|e| EmbedError::BadResponse(e.to_string()))?;
        if body.data.len() != texts.len() {
            return Err(EmbedError::BadResponse(format!(
                "sent {} texts, received {} embeddings",
                texts.len(),
                body.data.len()
            )));
        }
        let mut data = body.data;
        if data.iter().all(|d| d.index.is_some()) {
            data.sort_by_key(|d| d.index);
        }
        Ok(data.into_iter().map(|d| d.embedding).collect())
    }
}

impl Embedder for RemoteEmbedder {
    fn backend_id(&self) -> String {
        format!("remote/{}/{}", self.cfg.url.trim_end_matches('/'), self.cfg.model)
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let chunks: Vec<&[String]> = texts.chunks(self.cfg.batch_size.max(1)).collect();
        let results = parallel_indexed(chunks.len(), self.cfg.max_parallel, |i| {
            self.embed_batch(chunks[i])
        });
        let mut out = Vec::with_capacity(texts.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}
