//! Domain model shared by every pipeline stage.
//!
//! Every record carries `question_id` and, where it applies, `sample_index`,
//! so any artifact can be traced back to the stochastic sample it came from.
//! All types serialize to one JSON object per line (see [`crate::jsonl`]).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// System prompt sent with every curation-time generation request.
pub const DEFAULT_SYSTEM_PROMPT: &str =
    "You are an intelligent assistant who answers questions accurately.";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ValidationError {
    #[error("question id is empty")]
    EmptyQuestionId,
    #[error("question {0}: prompt is empty")]
    EmptyPrompt(String),
    #[error("cluster {0} has no members")]
    EmptyCluster(usize),
    #[error("pair for question {0} prefers a response over itself")]
    SelfPair(String),
    #[error("fact {0} has empty text")]
    EmptyFact(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    #[serde(rename = "prompt")]
    pub prompt_text: String,
    #[serde(default = "default_system_prompt")]
    pub system_prompt: String,
}

fn default_system_prompt() -> String {
    DEFAULT_SYSTEM_PROMPT.to_string()
}

impl Question {
    pub fn new(id: impl Into<String>, prompt: impl Into<String>) -> Result<Self, ValidationError> {
        let q = Question {
            id: id.into(),
            prompt_text: prompt.into(),
            system_prompt: default_system_prompt(),
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.id.is_empty() {
            return Err(ValidationError::EmptyQuestionId);
        }
        if self.prompt_text.trim().is_empty() {
            return Err(ValidationError::EmptyPrompt(self.id.clone()));
        }
        Ok(())
    }
}

/// One stochastic answer to a question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSample {
    pub question_id: String,
    pub sample_index: usize,
    pub text: String,
    pub temperature: f64,
    pub seed: u64,
    /// Cached character count of `text`; rebuilt on deserialization.
    #[serde(skip)]
    pub char_length: usize,
}

impl ResponseSample {
    pub fn new(
        question_id: impl Into<String>,
        sample_index: usize,
        text: impl Into<String>,
        temperature: f64,
        seed: u64,
    ) -> Self {
        let text = text.into();
        ResponseSample {
            question_id: question_id.into(),
            sample_index,
            char_length: text.chars().count(),
            text,
            temperature,
            seed,
        }
    }

    /// Restores `char_length` after deserialization.
    pub fn refresh_length(&mut self) {
        self.char_length = self.text.chars().count();
    }
}

/// Stable fact identifier: `question_id:sample_index:position`.
pub fn fact_id(question_id: &str, sample_index: usize, position: usize) -> String {
    format!("{question_id}:{sample_index}:{position}")
}

/// One sentence-level fact extracted from a response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicFact {
    pub fact_id: String,
    pub question_id: String,
    pub sample_index: usize,
    pub position: usize,
    pub text: String,
    /// Too short to carry a fact; kept for coverage but never clustered.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub excluded: bool,
}

impl AtomicFact {
    pub fn new(
        question_id: &str,
        sample_index: usize,
        position: usize,
        text: impl Into<String>,
        excluded: bool,
    ) -> Self {
        AtomicFact {
            fact_id: fact_id(question_id, sample_index, position),
            question_id: question_id.to_string(),
            sample_index,
            position,
            text: text.into(),
            excluded,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClusterLabel {
    Consistent,
    NonConsistent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactCluster {
    pub question_id: String,
    pub cluster_id: usize,
    pub label: ClusterLabel,
    pub member_fact_ids: Vec<String>,
}

impl FactCluster {
    pub fn size(&self) -> usize {
        self.member_fact_ids.len()
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.member_fact_ids.is_empty() {
            return Err(ValidationError::EmptyCluster(self.cluster_id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub fact_id: String,
    pub delta: i8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredResponse {
    pub question_id: String,
    pub sample_index: usize,
    pub score: i64,
    pub verdicts: Vec<Verdict>,
}

/// A DPO-ready `(prompt, chosen, rejected)` record.
///
/// Key names follow the usual DPO trainer loaders; the remaining fields are
/// provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub pair_id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub question_id: String,
    pub chosen_score: i64,
    pub rejected_score: i64,
    pub chosen_index: usize,
    pub rejected_index: usize,
    pub strategy: String,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.chosen_index == self.rejected_index {
            return Err(ValidationError::SelfPair(self.question_id.clone()));
        }
        Ok(())
    }

    pub fn margin(&self) -> i64 {
        self.chosen_score - self.rejected_score
    }
}

/// `pair_id` used to join pairs with per-token log-prob records.
pub fn pair_id(question_id: &str, chosen_index: usize, rejected_index: usize) -> String {
    format!("{question_id}:{chosen_index}>{rejected_index}")
}
