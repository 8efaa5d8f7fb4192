//! Cluster labelling and per-response consistency scores.
//!
//! A cluster is consistent when its size clears the threshold Θ. A response
//! scores +1 for each fact in a consistent cluster, −1 for each fact in a
//! non-consistent one (0 when the penalty is disabled) and 0 for excluded
//! facts.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{AtomicFact, ClusterLabel, FactCluster, ScoredResponse, Verdict};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScoreError {
    #[error("fact {0} is not excluded but has no cluster label")]
    UnclusteredFact(String),
    #[error("fact {fact_id} belongs to response {found}, not {expected}")]
    ForeignFact {
        fact_id: String,
        expected: String,
        found: String,
    },
}

/// How cluster size is compared against Θ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaComparison {
    /// Consistent iff `size > Θ`; with Θ = 1 only singletons are
    /// non-consistent.
    #[default]
    Greater,
    /// Consistent iff `size >= Θ`.
    AtLeast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub theta: usize,
    pub penalty_enabled: bool,
    pub comparison: ThetaComparison,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            theta: 1,
            penalty_enabled: true,
            comparison: ThetaComparison::Greater,
        }
    }
}

impl ScoringConfig {
    pub fn label_for_size(&self, size: usize) -> ClusterLabel {
        let consistent = match self.comparison {
            ThetaComparison::Greater => size > self.theta,
            ThetaComparison::AtLeast => size >= self.theta,
        };
        if consistent {
            ClusterLabel::Consistent
        } else {
            ClusterLabel::NonConsistent
        }
    }

    pub fn delta(&self, label: ClusterLabel) -> i8 {
        match label {
            ClusterLabel::Consistent => 1,
            ClusterLabel::NonConsistent if self.penalty_enabled => -1,
            ClusterLabel::NonConsistent => 0,
        }
    }
}

pub fn classify_sizes(sizes: &[usize], cfg: &ScoringConfig) -> Vec<ClusterLabel> {
    sizes.iter().map(|&s| cfg.label_for_size(s)).collect()
}

/// Labels a question's partition; cluster ids follow partition order.
pub fn classify_clusters(
    question_id: &str,
    partition: Vec<Vec<String>>,
    cfg: &ScoringConfig,
) -> Vec<FactCluster> {
    partition
        .into_iter()
        .enumerate()
        .map(|(cluster_id, members)| FactCluster {
            question_id: question_id.to_string(),
            cluster_id,
            label: cfg.label_for_size(members.len()),
            member_fact_ids: members,
        })
        .collect()
}

/// Fact id → label of its cluster.
pub fn label_index(clusters: &[FactCluster]) -> HashMap<String, ClusterLabel> {
    clusters
        .iter()
        .flat_map(|c| c.member_fact_ids.iter().map(move |id| (id.clone(), c.label)))
        .collect()
}

/// Scores one response from its facts (any order; verdicts come out in
/// position order).
pub fn score_response(
    question_id: &str,
    sample_index: usize,
    facts: &[&AtomicFact],
    labels: &HashMap<String, ClusterLabel>,
    cfg: &ScoringConfig,
) -> Result<ScoredResponse, ScoreError> {
    let mut ordered: Vec<&AtomicFact> = facts.to_vec();
    ordered.sort_by_key(|f| f.position);
    let mut verdicts = Vec::with_capacity(ordered.len());
    for f in ordered {
        if f.question_id != question_id || f.sample_index != sample_index {
            return Err(ScoreError::ForeignFact {
                fact_id: f.fact_id.clone(),
                expected: format!("{question_id}#{sample_index}"),
                found: format!("{}#{}", f.question_id, f.sample_index),
            });
        }
        let delta = if f.excluded {
            0
        } else {
            let label = labels
                .get(&f.fact_id)
                .ok_or_else(|| ScoreError::UnclusteredFact(f.fact_id.clone()))?;
            cfg.delta(*label)
        };
        verdicts.push(Verdict {
            fact_id: f.fact_id.clone(),
            delta,
        });
    }
    Ok(ScoredResponse {
        question_id: question_id.to_string(),
        sample_index,
        score: verdicts.iter().map(|v| v.delta as i64).sum(),
        verdicts,
    })
}
