//! Inference-time selection: sample, score with the curation stack, keep
//! the best response.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, AnalysisError, QuestionAnalysis};
use crate::clustering::ClusteringConfig;
use crate::embedding::Embedder;
use crate::sampling::{self, ChatBackend, SampleError, SamplingConfig};
use crate::scoring::ScoringConfig;
use crate::types::{Question, ResponseSample, ScoredResponse};

#[derive(Debug, Error)]
pub enum AscError {
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("no responses to select from")]
    NoResponses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AscSelection {
    pub question_id: String,
    pub selected: ResponseSample,
    pub selected_score: i64,
    /// Mean score over all samples.
    pub mean_score: f64,
    #[serde(skip)]
    pub all_scored: Vec<ScoredResponse>,
}

/// Index of the highest score; ties go to the lowest sample index.
pub fn best_index(scored: &[ScoredResponse]) -> Option<usize> {
    scored
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| {
            a.score
                .cmp(&b.score)
                .then(b.sample_index.cmp(&a.sample_index))
        })
        .map(|(i, _)| i)
}

/// Picks the best of already-analyzed responses.
pub fn select_from_analysis(
    responses: &[ResponseSample],
    analysis: &QuestionAnalysis,
) -> Result<AscSelection, AscError> {
    let i = best_index(&analysis.scored).ok_or(AscError::NoResponses)?;
    let best = &analysis.scored[i];
    let selected = responses
        .iter()
        .find(|r| r.sample_index == best.sample_index)
        .cloned()
        .ok_or(AscError::NoResponses)?;
    let total: i64 = analysis.scored.iter().map(|s| s.score).sum();
    Ok(AscSelection {
        question_id: selected.question_id.clone(),
        selected,
        selected_score: best.score,
        mean_score: total as f64 / analysis.scored.len() as f64,
        all_scored: analysis.scored.clone(),
    })
}

/// Scores the given samples and picks the best.
pub fn select_from_samples<E: Embedder + ?Sized>(
    responses: &[ResponseSample],
    embedder: &E,
    clustering: &ClusteringConfig,
    scoring: &ScoringConfig,
) -> Result<(AscSelection, QuestionAnalysis), AscError> {
    if responses.is_empty() {
        return Err(AscError::NoResponses);
    }
    let analysis = analysis::analyze_question(responses, embedder, clustering, scoring)?;
    let selection = select_from_analysis(responses, &analysis)?;
    Ok((selection, analysis))
}

/// Samples `cfg.m` responses (one is allowed here) and returns the
/// highest-scoring one.
#[allow(clippy::too_many_arguments)]
pub fn asc_select<B: ChatBackend + ?Sized, E: Embedder + ?Sized>(
    question: &Question,
    sampling_cfg: &SamplingConfig,
    backend: &B,
    run_seed: u64,
    embedder: &E,
    clustering: &ClusteringConfig,
    scoring: &ScoringConfig,
) -> Result<(AscSelection, QuestionAnalysis), AscError> {
    let responses = sampling::sample_for_selection(question, sampling_cfg, backend, run_seed)?;
    select_from_samples(&responses, embedder, clustering, scoring)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::OfflineHashEmbedder;

    fn scored(scores: &[i64]) -> Vec<ScoredResponse> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &score)| ScoredResponse {
                question_id: "q".into(),
                sample_index: i,
                score,
                verdicts: vec![],
            })
            .collect()
    }

    #[test]
    fn argmax_with_low_index_ties() {
        assert_eq!(best_index(&scored(&[-2, 4, 0])), Some(1));
        assert_eq!(best_index(&scored(&[3, 1, 3])), Some(0));
        assert_eq!(best_index(&[]), None);
    }

    #[test]
    fn single_response_is_selected() {
        let r = vec![ResponseSample::new("q", 0, "Only one answer was given here.", 0.0, 0)];
        let (sel, _) = select_from_samples(
            &r,
            &OfflineHashEmbedder::new(16, 0),
            &ClusteringConfig::default(),
            &ScoringConfig::default(),
        )
        .unwrap();
        assert_eq!(sel.selected, r[0]);
        assert_eq!(sel.selected_score, -1);
        assert_eq!(sel.mean_score, -1.0);
    }
}
