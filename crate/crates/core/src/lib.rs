//! Self-supervised preference data curation by atomic consistency.
//!
//! Sample several stochastic answers per question, split them into
//! sentence-level facts, cluster semantically equivalent facts across
//! answers, score each answer by how many of its facts recur, and turn the
//! ranking into DPO preference pairs. The same scoring stack selects answers
//! at inference time, and a synthetic fact world checks that the score
//! tracks factual precision.

pub mod analysis;
pub mod asc;
pub mod atomizer;
pub mod clustering;
pub mod curation;
pub mod dpo;
pub mod embedding;
pub mod jsonl;
pub mod sampling;
pub mod pipeline;
pub mod report;
pub mod scoring;
pub mod sim;
pub mod types;
pub mod util;

pub use types::*;
