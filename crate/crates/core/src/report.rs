//! Dataset statistics for a run directory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};
use crate::types::{AtomicFact, ClusterLabel, FactCluster, PreferencePair, Question, ResponseSample, ScoredResponse};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("inconsistent run: {0}")]
    InconsistentRun(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

/// Everything the statistics are computed from.
#[derive(Debug, Clone, Default)]
pub struct RunData {
    pub questions: Vec<Question>,
    pub responses: Vec<ResponseSample>,
    pub facts: Vec<AtomicFact>,
    pub clusters: Vec<FactCluster>,
    pub scores: Vec<ScoredResponse>,
    pub pairs: Vec<PreferencePair>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportOptions {
    /// Count only consistent clusters towards per-response coverage.
    pub consistent_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyLengths {
    pub strategy: String,
    pub pairs: usize,
    pub mean_chosen_length: f64,
    pub mean_rejected_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub questions: usize,
    pub responses: usize,
    pub responses_per_question: f64,
    pub facts: usize,
    pub excluded_facts: usize,
    pub clusters: usize,
    pub consistent_clusters: usize,
    /// Mean number of clusters per question (shown as ACS).
    pub avg_clusters_per_question: f64,
    /// Mean number of distinct clusters each response has a fact in (ARC).
    pub avg_clusters_per_response: f64,
    pub consistent_only: bool,
    pub mean_score: f64,
    pub score_histogram: BTreeMap<i64, usize>,
    pub pairs: usize,
    pub length_stats: Vec<StrategyLengths>,
}

fn mean(total: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

fn check_references(data: &RunData) -> Result<(), ReportError> {
    let bad = |m: String| Err(ReportError::InconsistentRun(m));
    let question_ids: HashSet<&str> = data.questions.iter().map(|q| q.id.as_str()).collect();
    let mut response_keys = HashSet::new();
    for r in &data.responses {
        if !data.questions.is_empty() && !question_ids.contains(r.question_id.as_str()) {
            return bad(format!("response {}:{} has unknown question", r.question_id, r.sample_index));
        }
        if !response_keys.insert((r.question_id.as_str(), r.sample_index)) {
            return bad(format!("duplicate response {}:{}", r.question_id, r.sample_index));
        }
    }
    let mut facts: HashMap<&str, &AtomicFact> = HashMap::new();
    for f in &data.facts {
        if !response_keys.contains(&(f.question_id.as_str(), f.sample_index)) {
            return bad(format!("fact {} has no response", f.fact_id));
        }
        if facts.insert(&f.fact_id, f).is_some() {
            return bad(format!("duplicate fact {}", f.fact_id));
        }
    }
    let mut clustered: HashSet<&str> = HashSet::new();
    for c in &data.clusters {
        for m in &c.member_fact_ids {
            match facts.get(m.as_str()) {
                None => return bad(format!("cluster {}:{} references missing fact {m}", c.question_id, c.cluster_id)),
                Some(f) if f.question_id != c.question_id => {
                    return bad(format!("cluster {}:{} holds fact {m} of another question", c.question_id, c.cluster_id))
                }
                Some(_) => {}
            }
            if !clustered.insert(m) {
                return bad(format!("fact {m} is in more than one cluster"));
            }
        }
    }
    if let Some(f) = data
        .facts
        .iter()
        .find(|f| !f.excluded && !clustered.contains(f.fact_id.as_str()))
    {
        return bad(format!("fact {} is not in any cluster", f.fact_id));
    }
    for s in &data.scores {
        if !response_keys.contains(&(s.question_id.as_str(), s.sample_index)) {
            return bad(format!("score for missing response {}:{}", s.question_id, s.sample_index));
        }
        if let Some(v) = s.verdicts.iter().find(|v| !facts.contains_key(v.fact_id.as_str())) {
            return bad(format!("verdict for missing fact {}", v.fact_id));
        }
    }
    for p in &data.pairs {
        for idx in [p.chosen_index, p.rejected_index] {
            if !response_keys.contains(&(p.question_id.as_str(), idx)) {
                return bad(format!("pair {} references missing response {idx}", p.pair_id));
            }
        }
    }
    Ok(())
}

/// Computes the run statistics after checking that every reference
/// between the stage files resolves.
pub fn dataset_stats(data: &RunData, opts: ReportOptions) -> Result<DatasetStats, ReportError> {
    check_references(data)?;

    let mut per_question: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &data.responses {
        per_question.entry(&r.question_id).or_default();
    }
    let mut fact_cluster: HashMap<&str, (&str, usize)> = HashMap::new();
    let mut consistent = 0;
    for c in &data.clusters {
        *per_question.entry(&c.question_id).or_default() += 1;
        if c.label == ClusterLabel::Consistent {
            consistent += 1;
        }
        if opts.consistent_only && c.label != ClusterLabel::Consistent {
            continue;
        }
        for m in &c.member_fact_ids {
            fact_cluster.insert(m, (&c.question_id, c.cluster_id));
        }
    }

    let mut touched: HashMap<(&str, usize), HashSet<(&str, usize)>> = HashMap::new();
    for f in &data.facts {
        if let Some(&c) = fact_cluster.get(f.fact_id.as_str()) {
            touched
                .entry((&f.question_id, f.sample_index))
                .or_default()
                .insert(c);
        }
    }
    let coverage: usize = data
        .responses
        .iter()
        .map(|r| touched.get(&(r.question_id.as_str(), r.sample_index)).map_or(0, HashSet::len))
        .sum();

    let mut score_histogram = BTreeMap::new();
    for s in &data.scores {
        *score_histogram.entry(s.score).or_insert(0) += 1;
    }
    let score_total: i64 = data.scores.iter().map(|s| s.score).sum();

    let mut by_strategy: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for p in &data.pairs {
        let e = by_strategy.entry(&p.strategy).or_default();
        e.0 += 1;
        e.1 += p.chosen.chars().count();
        e.2 += p.rejected.chars().count();
    }

    Ok(DatasetStats {
        questions: per_question.len(),
        responses: data.responses.len(),
        responses_per_question: mean(data.responses.len() as f64, per_question.len()),
        facts: data.facts.len(),
        excluded_facts: data.facts.iter().filter(|f| f.excluded).count(),
        clusters: data.clusters.len(),
        consistent_clusters: consistent,
        avg_clusters_per_question: mean(data.clusters.len() as f64, per_question.len()),
        avg_clusters_per_response: mean(coverage as f64, data.responses.len()),
        consistent_only: opts.consistent_only,
        mean_score: mean(score_total as f64, data.scores.len()),
        score_histogram,
        pairs: data.pairs.len(),
        length_stats: by_strategy
            .into_iter()
            .map(|(s, (n, c, r))| StrategyLengths {
                strategy: s.to_string(),
                pairs: n,
                mean_chosen_length: mean(c as f64, n),
                mean_rejected_length: mean(r as f64, n),
            })
            .collect(),
    })
}

/// Plain-text table for humans.
pub fn render_text(s: &DatasetStats) -> String {
    let mut out = String::new();
    let mut row = |k: &str, v: String| {
        let _ = writeln!(out, "{k:<28} {v}");
    };
    row("questions", s.questions.to_string());
    row("responses", s.responses.to_string());
    row("responses per question", format!("{:.2}", s.responses_per_question));
    row("facts", format!("{} ({} excluded)", s.facts, s.excluded_facts));
    row("clusters", format!("{} ({} consistent)", s.clusters, s.consistent_clusters));
    row("ACS (clusters/question)", format!("{:.3}", s.avg_clusters_per_question));
    let arc = if s.consistent_only { "ARC (consistent only)" } else { "ARC (clusters/response)" };
    row(arc, format!("{:.3}", s.avg_clusters_per_response));
    row("mean score", format!("{:.3}", s.mean_score));
    row("pairs", s.pairs.to_string());
    out.push_str("\nscore histogram\n");
    for (score, n) in &s.score_histogram {
        let _ = writeln!(out, "  {score:>6} {n}");
    }
    if !s.length_stats.is_empty() {
        let _ = writeln!(out, "\n{:<36} {:>6} {:>10} {:>10}", "strategy", "pairs", "P len", "NP len");
        for l in &s.length_stats {
            let _ = writeln!(
                out,
                "{:<36} {:>6} {:>10.1} {:>10.1}",
                l.strategy, l.pairs, l.mean_chosen_length, l.mean_rejected_length
            );
        }
    }
    out
}

/// `score,count` rows for external plotting.
pub fn histogram_csv(s: &DatasetStats) -> String {
    let mut out = String::from("score,count\n");
    for (score, n) in &s.score_histogram {
        let _ = writeln!(out, "{score},{n}");
    }
    out
}

/// Writes `report.json`, `report.txt` and optionally `report.csv` into `dir`.
pub fn write_report(dir: &Path, stats: &DatasetStats, csv: bool) -> Result<(), ReportError> {
    jsonl::write_json(&dir.join("report.json"), stats)?;
    jsonl::write_bytes(&dir.join("report.txt"), render_text(stats).as_bytes())?;
    if csv {
        jsonl::write_bytes(&dir.join("report.csv"), histogram_csv(stats).as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::pair_id;

    fn response(s: usize, text: &str) -> ResponseSample {
        ResponseSample::new("q", s, text, 1.0, 0)
    }

    fn fact(s: usize, p: usize) -> AtomicFact {
        AtomicFact::new("q", s, p, "some fact text here", false)
    }

    fn cluster(id: usize, members: &[&str], label: ClusterLabel) -> FactCluster {
        FactCluster {
            question_id: "q".into(),
            cluster_id: id,
            label,
            member_fact_ids: members.iter().map(|m| m.to_string()).collect(),
        }
    }

    fn hand_counted() -> RunData {
        RunData {
            questions: vec![Question::new("q", "Tell me.").unwrap()],
            responses: vec![response(0, "a. b."), response(1, "c.")],
            facts: vec![fact(0, 0), fact(0, 1), fact(1, 0)],
            clusters: vec![
                cluster(0, &["q:0:0", "q:0:1"], ClusterLabel::Consistent),
                cluster(2, &["q:1:0"], ClusterLabel::NonConsistent),
            ],
            scores: vec![],
            pairs: vec![],
        }
    }

    #[test]
    fn hand_counted_fixture() {
        let s = dataset_stats(&hand_counted(), ReportOptions::default()).unwrap();
        assert_eq!(s.avg_clusters_per_question, 2.0);
        assert_eq!(s.avg_clusters_per_response, 1.0);
        let s = dataset_stats(&hand_counted(), ReportOptions { consistent_only: true }).unwrap();
        assert_eq!(s.avg_clusters_per_response, 0.5);
    }

    #[test]
    fn full_coverage_makes_arc_equal_acs() {
        let mut d = hand_counted();
        d.facts = vec![fact(0, 0), fact(0, 1), fact(1, 0), fact(1, 1)];
        d.clusters = vec![
            cluster(0, &["q:0:0", "q:1:0"], ClusterLabel::Consistent),
            cluster(1, &["q:0:1", "q:1:1"], ClusterLabel::Consistent),
        ];
        let s = dataset_stats(&d, ReportOptions::default()).unwrap();
        assert_eq!(s.avg_clusters_per_question, s.avg_clusters_per_response);
    }

    #[test]
    fn dangling_references_are_rejected() {
        let mut d = hand_counted();
        d.clusters[1].member_fact_ids.push("q:7:0".into());
        let e = dataset_stats(&d, ReportOptions::default()).unwrap_err();
        assert!(e.to_string().contains("q:7:0"), "{e}");

        let mut d = hand_counted();
        d.clusters.pop();
        assert!(dataset_stats(&d, ReportOptions::default()).is_err());

        let mut d = hand_counted();
        d.pairs.push(PreferencePair {
            pair_id: pair_id("q", 0, 5),
            prompt: "Tell me.".into(),
            chosen: "a. b.".into(),
            rejected: "x".into(),
            question_id: "q".into(),
            chosen_score: 1,
            rejected_score: 0,
            chosen_index: 0,
            rejected_index: 5,
            strategy: "top1-bottom1".into(),
        });
        assert!(matches!(
            dataset_stats(&d, ReportOptions::default()),
            Err(ReportError::InconsistentRun(_))
        ));
    }

    #[test]
    fn lengths_and_histogram() {
        let mut d = hand_counted();
        d.scores = vec![
            ScoredResponse { question_id: "q".into(), sample_index: 0, score: 2, verdicts: vec![] },
            ScoredResponse { question_id: "q".into(), sample_index: 1, score: -1, verdicts: vec![] },
        ];
        d.pairs.push(PreferencePair {
            pair_id: pair_id("q", 0, 1),
            prompt: "Tell me.".into(),
            chosen: "a. b.".into(),
            rejected: "c.".into(),
            question_id: "q".into(),
            chosen_score: 2,
            rejected_score: -1,
            chosen_index: 0,
            rejected_index: 1,
            strategy: "top1-bottom1".into(),
        });
        let s = dataset_stats(&d, ReportOptions::default()).unwrap();
        assert_eq!(s.score_histogram, BTreeMap::from([(-1, 1), (2, 1)]));
        assert_eq!(s.mean_score, 0.5);
        assert_eq!(s.length_stats[0].mean_chosen_length, 5.0);
        assert_eq!(s.length_stats[0].mean_rejected_length, 2.0);
        let text = render_text(&s);
        assert!(text.contains("ACS (clusters/question)"));
        assert_eq!(histogram_csv(&s), "score,count\n-1,1\n2,1\n");
    }
}
