//! The per-question scoring stack: atomize, embed, cluster, label, score.
//!
//! Curation, inference-time selection and the simulator all go through
//! these functions, so a score means the same thing everywhere.

use std::collections::HashMap;

use thiserror::Error;

use crate::atomizer::{self, AtomizeError};
use crate::clustering::{self, ClusterError, ClusteringConfig, Merge};
use crate::embedding::{self, EmbedError, Embedder, FactEmbedding};
use crate::scoring::{self, ScoreError, ScoringConfig};
use crate::types::{AtomicFact, FactCluster, ResponseSample, ScoredResponse};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("question {question_id}: fact {fact_id} has no embedding")]
    MissingEmbedding {
        question_id: String,
        fact_id: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionAnalysis {
    pub facts: Vec<AtomicFact>,
    pub clusters: Vec<FactCluster>,
    pub merges: Vec<Merge>,
    pub scored: Vec<ScoredResponse>,
}

/// Splits every response. Responses with no sentences contribute no facts
/// and are reported separately; they score 0.
pub fn atomize_responses(responses: &[ResponseSample]) -> (Vec<AtomicFact>, Vec<AtomizeError>) {
    let mut facts = Vec::new();
    let mut degenerate = Vec::new();
    for r in responses {
        match atomizer::split_into_facts(r) {
            Ok(fs) => facts.extend(fs),
            Err(e) => degenerate.push(e),
        }
    }
    (facts, degenerate)
}

/// Clusters the non-excluded facts of one question and labels the clusters.
///
/// `embeddings` must cover every non-excluded fact; facts are clustered in
/// the order they appear in `facts`.
pub fn cluster_question(
    question_id: &str,
    facts: &[AtomicFact],
    embeddings: &[FactEmbedding],
    clustering: &ClusteringConfig,
    scoring: &ScoringConfig,
) -> Result<(Vec<FactCluster>, Vec<Merge>), AnalysisError> {
    let by_id: HashMap<&str, &FactEmbedding> =
        embeddings.iter().map(|e| (e.fact_id.as_str(), e)).collect();
    let mut ordered: Vec<FactEmbedding> = Vec::new();
    for f in facts.iter().filter(|f| !f.excluded) {
        let e = by_id
            .get(f.fact_id.as_str())
            .ok_or_else(|| AnalysisError::MissingEmbedding {
                question_id: question_id.to_string(),
                fact_id: f.fact_id.clone(),
            })?;
        ordered.push((*e).clone());
    }
    if ordered.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let (partition, merges) = clustering::agglomerate_with_trace(&ordered, clustering)?;
    Ok((
        scoring::classify_clusters(question_id, partition, scoring),
        merges,
    ))
}

/// Scores every response of one question, in response order.
pub fn score_question(
    question_id: &str,
    responses: &[ResponseSample],
    facts: &[AtomicFact],
    clusters: &[FactCluster],
    scoring: &ScoringConfig,
) -> Result<Vec<ScoredResponse>, AnalysisError> {
    let labels = scoring::label_index(clusters);
    let mut by_sample: HashMap<usize, Vec<&AtomicFact>> = HashMap::new();
    for f in facts.iter().filter(|f| f.question_id == question_id) {
        by_sample.entry(f.sample_index).or_default().push(f);
    }
    responses
        .iter()
        .map(|r| {
            let fs = by_sample.get(&r.sample_index).map_or(&[][..], Vec::as_slice);
            Ok(scoring::score_response(
                question_id,
                r.sample_index,
                fs,
                &labels,
                scoring,
            )?)
        })
        .collect()
}

/// Cluster and score a question whose facts are already embedded.
pub fn analyze_embedded(
    responses: &[ResponseSample],
    facts: Vec<AtomicFact>,
    embeddings: &[FactEmbedding],
    clustering: &ClusteringConfig,
    scoring: &ScoringConfig,
) -> Result<QuestionAnalysis, AnalysisError> {
    let question_id = responses
        .first()
        .map(|r| r.question_id.clone())
        .unwrap_or_default();
    let (clusters, merges) = cluster_question(&question_id, &facts, embeddings, clustering, scoring)?;
    let scored = score_question(&question_id, responses, &facts, &clusters, scoring)?;
    Ok(QuestionAnalysis {
        facts,
        clusters,
        merges,
        scored,
    })
}

/// Full stack for the responses of one question.
pub fn analyze_question<E: Embedder + ?Sized>(
    responses: &[ResponseSample],
    embedder: &E,
    clustering: &ClusteringConfig,
    scoring: &ScoringConfig,
) -> Result<QuestionAnalysis, AnalysisError> {
    let (facts, _) = atomize_responses(responses);
    let kept: Vec<AtomicFact> = facts.iter().filter(|f| !f.excluded).cloned().collect();
    let embeddings = embedding::embed_facts(&kept, embedder)?;
    analyze_embedded(responses, facts, &embeddings, clustering, scoring)
}
