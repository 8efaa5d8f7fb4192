//! Synthetic factuality simulator.
//!
//! A [`FactWorld`] has a fixed set of true facts. Each simulated response
//! states every true fact independently with that fact's emission
//! probability; a stated fact is replaced by a hallucination with
//! probability `hallucination_rate`. Hallucinations are unique strings unless
//! `sticky_hallucination_rate` makes some of them repeat.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, AnalysisError, QuestionAnalysis};
use crate::asc::{self, AscSelection};
use crate::clustering::ClusteringConfig;
use crate::curation::{self, CurateError, PairStrategy};
use crate::embedding::{self, EmbedError, FactEmbedding, OfflineHashEmbedder};
use crate::scoring::ScoringConfig;
use crate::types::{fact_id, AtomicFact, PreferencePair, Question, ResponseSample, ScoredResponse};
use crate::util::{parallel_indexed, stable_hash64};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("fact {0} has no ground-truth label")]
    UnknownFact(String),
    #[error("response {sample_index} of {question_id} did not split back into its generated facts")]
    SplitMismatch {
        question_id: String,
        sample_index: usize,
    },
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Curate(#[from] CurateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FactTruth {
    True,
    Hallucinated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldFact {
    pub text: String,
    pub emission_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactWorld {
    pub true_facts: Vec<WorldFact>,
    pub hallucination_rate: f64,
    /// Responses longer than `max` are cut down at random; shorter than
    /// `min` are padded with hallucinations.
    pub facts_per_response: FactRange,
    /// Standard deviation of the Gaussian jitter added to each embedding,
    /// scaled so the expected jitter norm equals this value.
    pub paraphrase_noise: f64,
    /// Probability that a hallucination reuses the fact's shared wrong
    /// version instead of a fresh one.
    pub sticky_hallucination_rate: f64,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for FactWorld {
    fn default() -> Self {
        FactWorld::uniform(10, 0.8, 0.3)
    }
}

impl FactWorld {
    /// `n` true facts sharing one emission probability.
    pub fn uniform(n: usize, emission_prob: f64, hallucination_rate: f64) -> Self {
        FactWorld {
            true_facts: (0..n)
                .map(|i| WorldFact {
                    text: format!("Landmark {i} stands in the old quarter."),
                    emission_prob,
                })
                .collect(),
            hallucination_rate,
            facts_per_response: FactRange { min: 1, max: n.max(1) },
            paraphrase_noise: 0.0,
            sticky_hallucination_rate: 0.0,
            embedding_dim: 64,
            seed: 0,
        }
    }

    /// Reads a world from TOML; missing keys take the default world's values.
    pub fn load(path: &std::path::Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::InvalidWorld(format!("{}: {e}", path.display())))?;
        let world: FactWorld =
            toml::from_str(&text).map_err(|e| SimError::InvalidWorld(format!("{}: {e}", path.display())))?;
        world.validate()?;
        Ok(world)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidWorld(m));
        if self.true_facts.is_empty() {
            return bad("no true facts".into());
        }
        for f in &self.true_facts {
            if !(f.emission_prob > 0.0 && f.emission_prob <= 1.0) {
                return bad(format!("emission probability {} not in (0, 1]", f.emission_prob));
            }
            if f.text.split_whitespace().count() < crate::atomizer::MIN_FACT_WORDS {
                return bad(format!("fact text too short: {:?}", f.text));
            }
        }
        if !(0.0..1.0).contains(&self.hallucination_rate) {
            return bad(format!("hallucination_rate {} not in [0, 1)", self.hallucination_rate));
        }
        if !(0.0..=1.0).contains(&self.sticky_hallucination_rate) {
            return bad("sticky_hallucination_rate not in [0, 1]".into());
        }
        if self.paraphrase_noise.is_nan() || self.paraphrase_noise < 0.0 {
            return bad("paraphrase_noise must be non-negative".into());
        }
        let r = self.facts_per_response;
        if r.min == 0 || r.min > r.max {
            return bad(format!("facts_per_response {}..{} is empty or zero", r.min, r.max));
        }
        if self.embedding_dim < 2 {
            return bad("embedding_dim must be at least 2".into());
        }
        Ok(())
    }

    fn trial_seed(&self, trial: u64) -> u64 {
        stable_hash64([
            &self.seed.to_le_bytes()[..],
            &trial.to_le_bytes()[..],
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub fact_id: String,
    pub truth: FactTruth,
}

/// One simulated question with its responses and per-fact ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedQuestion {
    pub question: Question,
    pub responses: Vec<ResponseSample>,
    /// Generated sentences per response, in order.
    pub sentences: Vec<Vec<(String, FactTruth)>>,
    pub ground_truth: BTreeMap<String, FactTruth>,
}

impl SimulatedQuestion {
    pub fn ground_truth_records(&self) -> Vec<GroundTruthRecord> {
        self.ground_truth
            .iter()
            .map(|(k, v)| GroundTruthRecord {
                fact_id: k.clone(),
                truth: *v,
            })
            .collect()
    }
}

/// Generates `m` responses for trial number `trial` of `world`.
pub fn simulate_responses(world: &FactWorld, m: usize, trial: u64) -> Result<SimulatedQuestion, SimError> {
    world.validate()?;
    let seed = world.trial_seed(trial);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let question_id = format!("sim-{}-{trial}", world.seed);
    let question = Question::new(
        question_id.clone(),
        format!("Describe the landmarks of simulated world {}.", world.seed),
    )
    .expect("non-empty id and prompt");
    let mut fresh = 0usize;
    let mut hallucination = |i: usize, rng: &mut ChaCha8Rng| {
        if world.sticky_hallucination_rate > 0.0 && rng.random_bool(world.sticky_hallucination_rate) {
            format!("Landmark {i} was moved to the harbor district.")
        } else {
            fresh += 1;
            format!("Landmark {i} was rebuilt in era {fresh} of the chronicle.")
        }
    };

    let mut responses = Vec::with_capacity(m);
    let mut sentences = Vec::with_capacity(m);
    let mut ground_truth = BTreeMap::new();
    for s in 0..m {
        let mut stated: Vec<(String, FactTruth)> = Vec::new();
        for (i, f) in world.true_facts.iter().enumerate() {
            if !rng.random_bool(f.emission_prob) {
                continue;
            }
            if world.hallucination_rate > 0.0 && rng.random_bool(world.hallucination_rate) {
                stated.push((hallucination(i, &mut rng), FactTruth::Hallucinated));
            } else {
                stated.push((f.text.clone(), FactTruth::True));
            }
        }
        stated.shuffle(&mut rng);
        stated.truncate(world.facts_per_response.max);
        while stated.len() < world.facts_per_response.min {
            let i = rng.random_range(0..world.true_facts.len());
            stated.push((hallucination(i, &mut rng), FactTruth::Hallucinated));
        }
        for (p, (_, truth)) in stated.iter().enumerate() {
            ground_truth.insert(fact_id(&question_id, s, p), *truth);
        }
        let text = stated
            .iter()
            .map(|(t, _)| t.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        let sample_seed = stable_hash64([&seed.to_le_bytes()[..], &(s as u64).to_le_bytes()[..]]);
        responses.push(ResponseSample::new(&question_id, s, text, 1.0, sample_seed >> 1));
        sentences.push(stated);
    }
    Ok(SimulatedQuestion {
        question,
        responses,
        sentences,
        ground_truth,
    })
}

/// Adds seeded Gaussian noise to each embedding and re-normalizes.
pub fn jitter_embeddings(embeddings: &mut [FactEmbedding], noise: f64, seed: u64) {
    if noise <= 0.0 {
        return;
    }
    for e in embeddings.iter_mut() {
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash64([
            &seed.to_le_bytes()[..],
            e.fact_id.as_bytes(),
        ]));
        let scale = noise / (e.vector.len() as f64).sqrt();
        let mut v: Vec<f64> = e
            .vector
            .iter()
            .map(|&x| x as f64 + scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if embedding::l2_normalize(&mut v) {
            e.vector = v.into_iter().map(|x| x as f32).collect();
        }
    }
}

/// A correlation coefficient, or `NOT_APPLICABLE` when either side has
/// zero variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Correlation {
    Value(f64),
    #[serde(with = "not_applicable")]
    NotApplicable,
}

mod not_applicable {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("NOT_APPLICABLE")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "NOT_APPLICABLE" {
            Ok(())
        } else {
            Err(serde::de::Error::custom(format!("unexpected {s:?}")))
        }
    }
}

impl Correlation {
    pub fn value(self) -> Option<f64> {
        match self {
            Correlation::Value(v) => Some(v),
            Correlation::NotApplicable => None,
        }
    }
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Correlation {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return Correlation::NotApplicable;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Correlation::NotApplicable;
    }
    Correlation::Value((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1; ties share their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Correlation {
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponsePrecision {
    pub question_id: String,
    pub sample_index: usize,
    pub score: i64,
    pub facts: usize,
    pub true_facts: usize,
    /// `None` for a response without facts.
    pub precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub responses: Vec<ResponsePrecision>,
    pub pearson: Correlation,
    pub spearman: Correlation,
}

/// Per-response precision and its correlation with the score.
pub fn precision_report(
    scored: &[ScoredResponse],
    facts: &[AtomicFact],
    ground_truth: &BTreeMap<String, FactTruth>,
) -> Result<PrecisionReport, SimError> {
    let mut counts: HashMap<(&str, usize), (usize, usize)> = HashMap::new();
    for f in facts {
        let truth = ground_truth
            .get(&f.fact_id)
            .ok_or_else(|| SimError::UnknownFact(f.fact_id.clone()))?;
        let c = counts.entry((&f.question_id, f.sample_index)).or_default();
        c.0 += 1;
        if *truth == FactTruth::True {
            c.1 += 1;
        }
    }
    let responses: Vec<ResponsePrecision> = scored
        .iter()
        .map(|s| {
            let (n, t) = counts
                .get(&(s.question_id.as_str(), s.sample_index))
                .copied()
                .unwrap_or_default();
            ResponsePrecision {
                question_id: s.question_id.clone(),
                sample_index: s.sample_index,
                score: s.score,
                facts: n,
                true_facts: t,
                precision: (n > 0).then(|| t as f64 / n as f64),
            }
        })
        .collect();
    let (xs, ys) = score_precision_points(&responses);
    Ok(PrecisionReport {
        pearson: pearson(&xs, &ys),
        spearman: spearman(&xs, &ys),
        responses,
    })
}

fn score_precision_points(rs: &[ResponsePrecision]) -> (Vec<f64>, Vec<f64>) {
    rs.iter()
        .filter_map(|r| r.precision.map(|p| (r.score as f64, p)))
        .unzip()
}

/// Score predicted from ground truth alone when hallucinations never
/// repeat and paraphrases embed identically: +1 for a true fact stated by
/// more than one response, -1 for everything else.
pub fn closed_form_scores(sim: &SimulatedQuestion) -> Vec<i64> {
    let mut multiplicity: HashMap<&str, usize> = HashMap::new();
    for resp in &sim.sentences {
        for (text, _) in resp {
            *multiplicity.entry(text.as_str()).or_default() += 1;
        }
    }
    sim.sentences
        .iter()
        .map(|resp| {
            resp.iter()
                .map(|(text, truth)| {
                    if *truth == FactTruth::True && multiplicity[text.as_str()] > 1 {
                        1
                    } else {
                        -1
                    }
                })
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub sim: SimulatedQuestion,
    pub analysis: QuestionAnalysis,
    pub precision: PrecisionReport,
    pub pairs: Vec<PreferencePair>,
    pub selection: AscSelection,
    /// Responses whose score differs from [`closed_form_scores`].
    pub closed_form_mismatches: usize,
}

impl TrialOutcome {
    fn precision_of(&self, sample_index: usize) -> Option<f64> {
        self.precision
            .responses
            .iter()
            .find(|r| r.sample_index == sample_index)
            .and_then(|r| r.precision)
    }
}

/// Simulates one trial and runs it through the scoring stack.
pub fn run_trial(
    world: &FactWorld,
    m: usize,
    trial: u64,
    clustering: &ClusteringConfig,
    scoring: &ScoringConfig,
    strategy: &PairStrategy,
) -> Result<TrialOutcome, SimError> {
    let sim = simulate_responses(world, m, trial)?;
    let (facts, _) = analysis::atomize_responses(&sim.responses);
    for (s, sentences) in sim.sentences.iter().enumerate() {
        let split: Vec<&str> = facts
            .iter()
            .filter(|f| f.sample_index == s)
            .map(|f| f.text.as_str())
            .collect();
        if split.len() != sentences.len() || split.iter().zip(sentences).any(|(a, (b, _))| a != b) {
            return Err(SimError::SplitMismatch {
                question_id: sim.question.id.clone(),
                sample_index: s,
            });
        }
    }
    let embedder = OfflineHashEmbedder::new(world.embedding_dim, world.seed);
    let mut embeddings = embedding::embed_facts(&facts, &embedder)?;
    jitter_embeddings(&mut embeddings, world.paraphrase_noise, world.trial_seed(trial));
    let analysis = analysis::analyze_embedded(&sim.responses, facts, &embeddings, clustering, scoring)?;
    let precision = precision_report(&analysis.scored, &analysis.facts, &sim.ground_truth)?;
    let pairs = curation::curate_pairs(&sim.question.prompt_text, &analysis.scored, &sim.responses, strategy)?;
    let selection = asc::select_from_analysis(&sim.responses, &analysis)
        .expect("simulated questions have responses");
    let closed_form_mismatches = closed_form_scores(&sim)
        .iter()
        .zip(&analysis.scored)
        .filter(|(c, s)| **c != s.score)
        .count();
    Ok(TrialOutcome {
        sim,
        analysis,
        precision,
        pairs,
        selection,
        closed_form_mismatches,
    })
}

/// Runs trials `0..trials` on up to `workers` threads, in trial order.
pub fn run_trials(
    world: &FactWorld,
    m: usize,
    trials: usize,
    clustering: &ClusteringConfig,
    scoring: &ScoringConfig,
    strategy: &PairStrategy,
    workers: usize,
) -> Result<Vec<TrialOutcome>, SimError> {
    parallel_indexed(trials, workers, |t| {
        run_trial(world, m, t as u64, clustering, scoring, strategy)
    })
    .into_iter()
    .collect()
}

/// Aggregate view over many trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub trials: usize,
    /// Trials that produced at least one pair.
    pub trials_with_pairs: usize,
    pub mean_chosen_precision: f64,
    pub mean_rejected_precision: f64,
    pub precision_gap: f64,
    pub mean_selected_precision: f64,
    pub mean_sample_precision: f64,
    /// Correlations over all responses of all trials pooled together.
    pub pearson: Correlation,
    pub spearman: Correlation,
    pub closed_form_mismatches: usize,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

impl SimSummary {
    pub fn from_outcomes(outcomes: &[TrialOutcome]) -> Self {
        let mut chosen = Vec::new();
        let mut rejected = Vec::new();
        let mut selected = Vec::new();
        let mut samples = Vec::new();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut with_pairs = 0;
        for o in outcomes {
            if !o.pairs.is_empty() {
                with_pairs += 1;
            }
            for p in &o.pairs {
                if let (Some(c), Some(r)) = (o.precision_of(p.chosen_index), o.precision_of(p.rejected_index)) {
                    chosen.push(c);
                    rejected.push(r);
                }
            }
            if let Some(p) = o.precision_of(o.selection.selected.sample_index) {
                selected.push(p);
            }
            let (x, y) = score_precision_points(&o.precision.responses);
            samples.extend_from_slice(&y);
            xs.extend(x);
            ys.extend(y);
        }
        let mean_chosen_precision = mean(&chosen);
        let mean_rejected_precision = mean(&rejected);
        SimSummary {
            trials: outcomes.len(),
            trials_with_pairs: with_pairs,
            mean_chosen_precision,
            mean_rejected_precision,
            precision_gap: mean_chosen_precision - mean_rejected_precision,
            mean_selected_precision: mean(&selected),
            mean_sample_precision: mean(&samples),
            pearson: pearson(&xs, &ys),
            spearman: spearman(&xs, &ys),
            closed_form_mismatches: outcomes.iter().map(|o| o.closed_form_mismatches).sum(),
        }
    }
}
