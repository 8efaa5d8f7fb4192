//! DPO objective evaluation with analytic gradients.
//!
//! For sequence log-likelihoods `L(s)` (sum of per-token log-probs, or their
//! mean), the implicit reward margin is
//!
//! ```text
//! margin = β [(L(π_w) − L(ref_w)) − (L(π_l) − L(ref_l))]
//! loss   = −log σ(margin)
//! ```
//!
//! Nothing here updates parameters: log-probs come from an external scorer
//! and this module reports loss, margin and `∂loss/∂(policy token log-prob)`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};
use crate::types::PreferencePair;

pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, Error)]
pub enum DpoError {
    #[error("{what}: policy has {policy} tokens, reference has {reference}")]
    LengthMismatch {
        what: &'static str,
        policy: usize,
        reference: usize,
    },
    #[error("{0} sequence is empty")]
    EmptySequence(&'static str),
    #[error("beta must be positive, got {0}")]
    NonpositiveBeta(f64),
    #[error("log-prob {value} in {what} is positive or not finite")]
    InvalidLogProb { what: &'static str, value: f64 },
    #[error("no log-probs for pair {0}")]
    MissingLogprobs(String),
    #[error(transparent)]
    Io(#[from] JsonlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogProbMode {
    /// Sum of token log-probs.
    #[default]
    Total,
    /// Mean token log-prob.
    Average,
}

impl std::str::FromStr for LogProbMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "total" => Ok(LogProbMode::Total),
            "average" => Ok(LogProbMode::Average),
            other => Err(format!("unknown log-prob mode {other:?} (total|average)")),
        }
    }
}

/// Per-token log-probs of one pair under the policy and reference models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLogProbs {
    pub chosen_policy: Vec<f64>,
    pub chosen_ref: Vec<f64>,
    pub rejected_policy: Vec<f64>,
    pub rejected_ref: Vec<f64>,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

impl PairLogProbs {
    pub fn validate(&self) -> Result<(), DpoError> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(DpoError::NonpositiveBeta(self.beta));
        }
        let check_len = |what, p: &[f64], r: &[f64]| {
            if p.len() != r.len() {
                Err(DpoError::LengthMismatch {
                    what,
                    policy: p.len(),
                    reference: r.len(),
                })
            } else if p.is_empty() {
                Err(DpoError::EmptySequence(what))
            } else {
                Ok(())
            }
        };
        check_len("chosen", &self.chosen_policy, &self.chosen_ref)?;
        check_len("rejected", &self.rejected_policy, &self.rejected_ref)?;
        for (what, seq) in [
            ("chosen_policy", &self.chosen_policy),
            ("chosen_ref", &self.chosen_ref),
            ("rejected_policy", &self.rejected_policy),
            ("rejected_ref", &self.rejected_ref),
        ] {
            if let Some(&value) = seq.iter().find(|&&x| !(x.is_finite() && x <= 0.0)) {
                return Err(DpoError::InvalidLogProb { what, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoEval {
    pub loss: f64,
    pub margin: f64,
    /// `∂loss/∂chosen_policy[t]`.
    pub grad_chosen: Vec<f64>,
    /// `∂loss/∂rejected_policy[t]`.
    pub grad_rejected: Vec<f64>,
}

/// `−log σ(x)` without overflow for large `|x|`.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// `σ(x)` without overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sequence_logprob(seq: &[f64], mode: LogProbMode) -> f64 {
    let total: f64 = seq.iter().sum();
    match mode {
        LogProbMode::Total => total,
        LogProbMode::Average => total / seq.len() as f64,
    }
}

/// `β (Δw − Δl)` without validation.
pub fn margin(p: &PairLogProbs, mode: LogProbMode) -> f64 {
    let dw = sequence_logprob(&p.chosen_policy, mode) - sequence_logprob(&p.chosen_ref, mode);
    let dl = sequence_logprob(&p.rejected_policy, mode) - sequence_logprob(&p.rejected_ref, mode);
    p.beta * (dw - dl)
}

pub fn dpo_loss(p: &PairLogProbs, mode: LogProbMode) -> Result<DpoEval, DpoError> {
    p.validate()?;
    let m = margin(p, mode);
    // dloss/dmargin = −σ(−m)
    let scale = p.beta * sigmoid(-m);
    let token_weight = |len: usize| match mode {
        LogProbMode::Total => 1.0,
        LogProbMode::Average => 1.0 / len as f64,
    };
    let wc = token_weight(p.chosen_policy.len());
    let wr = token_weight(p.rejected_policy.len());
    Ok(DpoEval {
        loss: neg_log_sigmoid(m),
        margin: m,
        grad_chosen: vec![-scale * wc; p.chosen_policy.len()],
        grad_rejected: vec![scale * wr; p.rejected_policy.len()],
    })
}

/// One line of `logprobs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogProbRecord {
    pub pair_id: String,
    #[serde(flatten)]
    pub logprobs: PairLogProbs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoReport {
    pub mode: LogProbMode,
    pub pairs: usize,
    pub mean_loss: f64,
    pub mean_margin: f64,
    pub fraction_margin_positive: f64,
}

/// Aggregates per-pair losses over every pair, in pair order.
pub fn batch_dpo_report(
    pairs: &[PreferencePair],
    logprobs: &[LogProbRecord],
    mode: LogProbMode,
    beta_override: Option<f64>,
) -> Result<DpoReport, DpoError> {
    let by_id: HashMap<&str, &PairLogProbs> = logprobs
        .iter()
        .map(|r| (r.pair_id.as_str(), &r.logprobs))
        .collect();
    let mut loss_sum = 0.0;
    let mut margin_sum = 0.0;
    let mut positive = 0usize;
    for pair in pairs {
        let lp = by_id
            .get(pair.pair_id.as_str())
            .ok_or_else(|| DpoError::MissingLogprobs(pair.pair_id.clone()))?;
        let eval = match beta_override {
            Some(beta) => dpo_loss(
                &PairLogProbs {
                    beta,
                    ..(*lp).clone()
                },
                mode,
            )?,
            None => dpo_loss(lp, mode)?,
        };
        loss_sum += eval.loss;
        margin_sum += eval.margin;
        positive += usize::from(eval.margin > 0.0);
    }
    let n = pairs.len();
    let mean = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(DpoReport {
        mode,
        pairs: n,
        mean_loss: mean(loss_sum),
        mean_margin: mean(margin_sum),
        fraction_margin_positive: mean(positive as f64),
    })
}

pub fn batch_dpo_report_files(
    pairs_path: &Path,
    logprobs_path: &Path,
    mode: LogProbMode,
    beta_override: Option<f64>,
) -> Result<DpoReport, DpoError> {
    let pairs: Vec<PreferencePair> = jsonl::read(pairs_path)?;
    let logprobs: Vec<LogProbRecord> = jsonl::read(logprobs_path)?;
    batch_dpo_report(&pairs, &logprobs, mode, beta_override)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn same(seq: Vec<f64>) -> PairLogProbs {
        PairLogProbs {
            chosen_policy: seq.clone(),
            chosen_ref: seq.clone(),
            rejected_policy: seq.clone(),
            rejected_ref: seq,
            beta: DEFAULT_BETA,
        }
    }

    #[test]
    fn equal_policy_and_reference_give_ln2() {
        let e = dpo_loss(&same(vec![-1.0, -2.5]), LogProbMode::Total).unwrap();
        assert_eq!(e.margin, 0.0);
        assert!((e.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn margin_of_one() {
        // Δw − Δl = 10 at β = 0.1; −ln σ(1) = ln(1 + e^−1).
        let p = PairLogProbs {
            chosen_policy: vec![-5.0],
            chosen_ref: vec![-15.0],
            rejected_policy: vec![-3.0],
            rejected_ref: vec![-3.0],
            beta: 0.1,
        };
        let e = dpo_loss(&p, LogProbMode::Total).unwrap();
        assert!((e.margin - 1.0).abs() < 1e-15);
        assert!((e.loss - 0.313_261_687_518_222_8).abs() < 1e-12);
    }

    #[test]
    fn validation_errors() {
        let mut p = same(vec![-1.0]);
        p.beta = 0.0;
        assert!(matches!(dpo_loss(&p, LogProbMode::Total), Err(DpoError::NonpositiveBeta(_))));
        let mut p = same(vec![-1.0]);
        p.chosen_ref.push(-1.0);
        assert!(matches!(
            dpo_loss(&p, LogProbMode::Total),
            Err(DpoError::LengthMismatch { what: "chosen", .. })
        ));
        let mut p = same(vec![-1.0]);
        p.rejected_policy[0] = 0.5;
        assert!(matches!(
            dpo_loss(&p, LogProbMode::Total),
            Err(DpoError::InvalidLogProb { .. })
        ));
    }

    #[test]
    fn stable_at_extreme_margins() {
        for m in [-1e4, -700.0, -40.0, 0.0, 40.0, 700.0, 1e4] {
            let l = neg_log_sigmoid(m);
            assert!(l.is_finite() && l >= 0.0, "m={m} l={l}");
            assert!(sigmoid(m).is_finite());
        }
        assert!((neg_log_sigmoid(-1e4) - 1e4).abs() < 1e-9);
        assert!(neg_log_sigmoid(1e4) >= 0.0);
    }

    #[test]
    fn average_mode_divides_by_length() {
        let p = PairLogProbs {
            chosen_policy: vec![-1.0, -1.0, -1.0, -1.0],
            chosen_ref: vec![-2.0, -2.0, -2.0, -2.0],
            rejected_policy: vec![-1.0],
            rejected_ref: vec![-1.0],
            beta: 0.5,
        };
        let t = dpo_loss(&p, LogProbMode::Total).unwrap();
        let a = dpo_loss(&p, LogProbMode::Average).unwrap();
        assert!((t.margin - 2.0).abs() < 1e-15);
        assert!((a.margin - 0.5).abs() < 1e-15);
        assert!((a.grad_chosen[0] * 4.0 + 0.5 * sigmoid(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn report_symmetry_and_missing_ids() {
        let pair = |id: &str| PreferencePair {
            pair_id: id.into(),
            prompt: "p".into(),
            chosen: "a".into(),
            rejected: "b".into(),
            question_id: "q".into(),
            chosen_score: 1,
            rejected_score: 0,
            chosen_index: 0,
            rejected_index: 1,
            strategy: "top1-bottom1".into(),
        };
        let rec = |id: &str, x: f64| LogProbRecord {
            pair_id: id.into(),
            logprobs: PairLogProbs {
                chosen_policy: vec![-1.0 + x],
                chosen_ref: vec![-1.0],
                rejected_policy: vec![-1.0],
                rejected_ref: vec![-1.0],
                beta: 1.0,
            },
        };
        let r = batch_dpo_report(
            &[pair("a"), pair("b")],
            &[rec("a", 0.5), rec("b", -0.5)],
            LogProbMode::Total,
            None,
        )
        .unwrap();
        assert_eq!(r.fraction_margin_positive, 0.5);
        assert!(r.mean_margin.abs() < 1e-15);
        assert!(matches!(
            batch_dpo_report(&[pair("c")], &[], LogProbMode::Total, None),
            Err(DpoError::MissingLogprobs(_))
        ));
        let single = batch_dpo_report(&[pair("a")], &[rec("a", 0.0)], LogProbMode::Total, None).unwrap();
        assert!((single.mean_loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn logprob_record_reads_flat_json() {
        let line = r#"{"pair_id":"q:0>1","chosen_policy":[-1.0],"chosen_ref":[-1.5],"rejected_policy":[-2.0],"rejected_ref":[-1.0]}"#;
        let r: LogProbRecord = serde_json::from_str(line).unwrap();
        assert_eq!(r.logprobs.beta, DEFAULT_BETA);
        assert_eq!(r.pair_id, "q:0>1");
    }

    fn logprob_seq(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-20.0f64..-0.01, len)
    }

    proptest! {
        #[test]
        fn loss_positive_and_below_ln2_iff_margin_positive(
            cp in logprob_seq(1..8), rp in logprob_seq(1..8), shift in -3.0f64..3.0,
        ) {
            let p = PairLogProbs {
                chosen_ref: cp.iter().map(|x| (x + shift).min(-1e-3)).collect(),
                chosen_policy: cp,
                rejected_ref: rp.clone(),
                rejected_policy: rp,
                beta: 0.1,
            };
            let e = dpo_loss(&p, LogProbMode::Total).unwrap();
            prop_assert!(e.loss > 0.0);
            prop_assert_eq!(e.loss < std::f64::consts::LN_2, e.margin > 0.0);
        }

        #[test]
        fn loss_decreases_with_chosen_likelihood(
            cp in logprob_seq(2..8), rp in logprob_seq(1..8), bump in 0.01f64..1.0,
        ) {
            let base = PairLogProbs {
                chosen_ref: cp.clone(),
                chosen_policy: cp.iter().map(|x| x - 1.0).collect(),
                rejected_ref: rp.clone(),
                rejected_policy: rp,
                beta: 0.1,
            };
            let mut up = base.clone();
            up.chosen_policy[0] += bump;
            prop_assert!(dpo_loss(&up, LogProbMode::Total).unwrap().loss
                < dpo_loss(&base, LogProbMode::Total).unwrap().loss);
        }

        #[test]
        fn constant_shift_preserves_total_margin(
            seqs in (1usize..8).prop_flat_map(|n| proptest::collection::vec(logprob_seq(n..n + 1), 4)),
            c in 0.0f64..2.0,
        ) {
            let p = PairLogProbs {
                chosen_policy: seqs[0].clone(),
                chosen_ref: seqs[1].clone(),
                rejected_policy: seqs[2].clone(),
                rejected_ref: seqs[3].clone(),
                beta: 0.1,
            };
            let shift = |v: &[f64]| v.iter().map(|x| x - c).collect::<Vec<_>>();
            let q = PairLogProbs {
                chosen_policy: shift(&p.chosen_policy),
                chosen_ref: shift(&p.chosen_ref),
                rejected_policy: shift(&p.rejected_policy),
                rejected_ref: shift(&p.rejected_ref),
                beta: 0.1,
            };
            let (a, b) = (margin(&p, LogProbMode::Total), margin(&q, LogProbMode::Total));
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }
}
