//! Preference pair selection from scored responses.
//!
//! Score-based strategies rank responses by score (descending), breaking
//! ties by the lower sample index. The rejected side is always drawn from
//! responses outside the chosen set, so chosen and rejected sets are
//! disjoint and every pair has a non-negative score margin. Questions whose
//! scores are all equal carry no preference signal and yield no pairs.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{pair_id, PreferencePair, ResponseSample, ScoredResponse};
use crate::util::stable_hash64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CurateError {
    #[error("question {question_id}: strategy {strategy} needs {needed} responses, got {got}")]
    InsufficientResponses {
        question_id: String,
        strategy: String,
        needed: usize,
        got: usize,
    },
    #[error("question {question_id}: response {sample_index} has no score")]
    MissingScore {
        question_id: String,
        sample_index: usize,
    },
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthDirection {
    Longest,
    Shortest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyKind {
    Top1Bottom1,
    TopkBottomk {
        k: usize,
    },
    /// Top-k chosen; rejected = bottom-(k − replaced) by score plus the
    /// `replaced` length-extremal responses among the rest.
    LengthBalanced {
        k: usize,
        replaced: usize,
        direction: LengthDirection,
    },
    LongestPreferred,
    ShortestPreferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairStrategy {
    #[serde(flatten)]
    pub kind: StrategyKind,
    /// Seeds the random negative of the length-preferred baselines.
    #[serde(default)]
    pub rng_seed: u64,
}

impl Default for PairStrategy {
    fn default() -> Self {
        PairStrategy::new(StrategyKind::Top1Bottom1)
    }
}

impl fmt::Display for PairStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            StrategyKind::Top1Bottom1 => write!(f, "top1-bottom1"),
            StrategyKind::TopkBottomk { k } => write!(f, "top{k}-bottom{k}"),
            StrategyKind::LengthBalanced {
                k,
                replaced,
                direction,
            } => {
                let dir = match direction {
                    LengthDirection::Longest => "longest",
                    LengthDirection::Shortest => "shortest",
                };
                write!(f, "length-balanced({k},{}+{replaced},{dir})", k - replaced.min(k))
            }
            StrategyKind::LongestPreferred => write!(f, "longest-preferred"),
            StrategyKind::ShortestPreferred => write!(f, "shortest-preferred"),
        }
    }
}

/// Parses `top1-bottom1`, `topk:K` (or `topK-bottomK`),
/// `length-balanced:K:R:longest|shortest`, `longest-preferred` and
/// `shortest-preferred`.
impl FromStr for PairStrategy {
    type Err = CurateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CurateError::InvalidStrategy(format!("unrecognized strategy {s:?}"));
        let num = |t: &str| t.parse::<usize>().map_err(|_| bad());
        let parts: Vec<&str> = s.trim().split(':').collect();
        let kind = match parts.as_slice() {
            ["top1-bottom1"] => StrategyKind::Top1Bottom1,
            ["longest-preferred"] => StrategyKind::LongestPreferred,
            ["shortest-preferred"] => StrategyKind::ShortestPreferred,
            ["topk", k] => StrategyKind::TopkBottomk { k: num(k)? },
            ["length-balanced", k, r, dir] => StrategyKind::LengthBalanced {
                k: num(k)?,
                replaced: num(r)?,
                direction: match *dir {
                    "longest" => LengthDirection::Longest,
                    "shortest" => LengthDirection::Shortest,
                    _ => return Err(bad()),
                },
            },
            [one] => {
                let k = one
                    .strip_prefix("top")
                    .and_then(|rest| rest.split_once("-bottom"))
                    .filter(|(a, b)| a == b)
                    .ok_or_else(bad)?
                    .0;
                StrategyKind::TopkBottomk { k: num(k)? }
            }
            _ => return Err(bad()),
        };
        let strategy = PairStrategy::new(kind);
        strategy.validate()?;
        Ok(strategy)
    }
}

impl PairStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        PairStrategy { kind, rng_seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn is_score_based(&self) -> bool {
        !matches!(
            self.kind,
            StrategyKind::LongestPreferred | StrategyKind::ShortestPreferred
        )
    }

    /// Responses needed per question.
    pub fn min_responses(&self) -> usize {
        match self.kind {
            StrategyKind::TopkBottomk { k } | StrategyKind::LengthBalanced { k, .. } => 2 * k,
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<(), CurateError> {
        match self.kind {
            StrategyKind::TopkBottomk { k: 0 } => {
                Err(CurateError::InvalidStrategy("k must be positive".into()))
            }
            StrategyKind::LengthBalanced { k, replaced, .. } => {
                if !(1..=2).contains(&replaced) {
                    Err(CurateError::InvalidStrategy(format!(
                        "replaced must be 1 or 2, got {replaced}"
                    )))
                } else if replaced >= k {
                    Err(CurateError::InvalidStrategy(format!(
                        "replaced ({replaced}) must be below k ({k})"
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

struct Candidate<'a> {
    response: &'a ResponseSample,
    score: i64,
}

fn by_score_desc(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.score
        .cmp(&a.score)
        .then(a.response.sample_index.cmp(&b.response.sample_index))
}

fn by_score_asc(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    a.score
        .cmp(&b.score)
        .then(a.response.sample_index.cmp(&b.response.sample_index))
}

fn by_length(direction: LengthDirection) -> impl Fn(&Candidate, &Candidate) -> std::cmp::Ordering {
    move |a, b| {
        let len = match direction {
            LengthDirection::Longest => b.response.char_length.cmp(&a.response.char_length),
            LengthDirection::Shortest => a.response.char_length.cmp(&b.response.char_length),
        };
        len.then(a.response.sample_index.cmp(&b.response.sample_index))
    }
}

/// Builds the preference pairs of one question.
///
/// `responses` must all belong to one question and every one needs an entry
/// in `scored`.
pub fn curate_pairs(
    prompt: &str,
    scored: &[ScoredResponse],
    responses: &[ResponseSample],
    strategy: &PairStrategy,
) -> Result<Vec<PreferencePair>, CurateError> {
    strategy.validate()?;
    let Some(first) = responses.first() else {
        return Ok(Vec::new());
    };
    let question_id = first.question_id.as_str();
    let scores: HashMap<usize, i64> = scored
        .iter()
        .filter(|s| s.question_id == question_id)
        .map(|s| (s.sample_index, s.score))
        .collect();
    let mut candidates = Vec::with_capacity(responses.len());
    for r in responses {
        let score = *scores
            .get(&r.sample_index)
            .ok_or_else(|| CurateError::MissingScore {
                question_id: question_id.to_string(),
                sample_index: r.sample_index,
            })?;
        candidates.push(Candidate { response: r, score });
    }
    let needed = strategy.min_responses();
    if candidates.len() < needed {
        return Err(CurateError::InsufficientResponses {
            question_id: question_id.to_string(),
            strategy: strategy.to_string(),
            needed,
            got: candidates.len(),
        });
    }

    if strategy.is_score_based() {
        let max = candidates.iter().map(|c| c.score).max();
        let min = candidates.iter().map(|c| c.score).min();
        if max == min {
            return Ok(Vec::new());
        }
    }

    let name = strategy.to_string();
    let pair = |c: &Candidate, r: &Candidate| PreferencePair {
        pair_id: pair_id(question_id, c.response.sample_index, r.response.sample_index),
        prompt: prompt.to_string(),
        chosen: c.response.text.clone(),
        rejected: r.response.text.clone(),
        question_id: question_id.to_string(),
        chosen_score: c.score,
        rejected_score: r.score,
        chosen_index: c.response.sample_index,
        rejected_index: r.response.sample_index,
        strategy: name.clone(),
    };

    let (chosen, rejected): (Vec<&Candidate>, Vec<&Candidate>) = match strategy.kind {
        StrategyKind::Top1Bottom1 => split_top_bottom(&candidates, 1, 1, None),
        StrategyKind::TopkBottomk { k } => split_top_bottom(&candidates, k, k, None),
        StrategyKind::LengthBalanced {
            k,
            replaced,
            direction,
        } => split_top_bottom(&candidates, k, k - replaced, Some((replaced, direction))),
        StrategyKind::LongestPreferred | StrategyKind::ShortestPreferred => {
            let direction = if strategy.kind == StrategyKind::LongestPreferred {
                LengthDirection::Longest
            } else {
                LengthDirection::Shortest
            };
            let mut ranked: Vec<&Candidate> = candidates.iter().collect();
            ranked.sort_by(|a, b| by_length(direction)(a, b));
            let preferred = ranked[0];
            let mut others: Vec<&Candidate> = ranked[1..].to_vec();
            others.sort_by_key(|c| c.response.sample_index);
            let mut rng = ChaCha8Rng::seed_from_u64(stable_hash64([
                strategy.rng_seed.to_le_bytes().as_slice(),
                question_id.as_bytes(),
            ]));
            let negative = others[rng.random_range(0..others.len())];
            (vec![preferred], vec![negative])
        }
    };

    Ok(chosen
        .iter()
        .flat_map(|c| rejected.iter().map(|r| pair(c, r)))
        .collect())
}

/// Top-`k` by score, then `bottom` lowest-scoring among the rest, then
/// optionally `replaced` length-extremal responses among what remains.
fn split_top_bottom<'a, 'b>(
    candidates: &'b [Candidate<'a>],
    k: usize,
    bottom: usize,
    length_fill: Option<(usize, LengthDirection)>,
) -> (Vec<&'b Candidate<'a>>, Vec<&'b Candidate<'a>>) {
    let mut ranked: Vec<&Candidate> = candidates.iter().collect();
    ranked.sort_by(|a, b| by_score_desc(a, b));
    let top: Vec<&Candidate> = ranked[..k].to_vec();
    let mut rest: Vec<&Candidate> = ranked[k..].to_vec();
    rest.sort_by(|a, b| by_score_asc(a, b));
    let mut rejected: Vec<&Candidate> = rest.drain(..bottom).collect();
    if let Some((replaced, direction)) = length_fill {
        rest.sort_by(|a, b| by_length(direction)(a, b));
        rejected.extend(rest.into_iter().take(replaced));
    }
    (top, rejected)
}
