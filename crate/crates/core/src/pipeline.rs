//! End-to-end curation runs with resumable stage files.
//!
//! Stages run in order sample, atomize, embed, cluster, score, pairs,
//! report. A stage is skipped when all of its output files exist and no
//! earlier stage ran in the same invocation.

use std::collections::HashMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis;
use crate::atomizer;
use crate::clustering::{ClusteringConfig, Merge};
use crate::curation::{self, CurateError, PairStrategy};
use crate::embedding::{
    self, read_embeddings, write_embeddings, CachedEmbedder, EmbeddingCache, Embedder, FactEmbedding,
    OfflineHashEmbedder, RemoteEmbedder, RemoteEmbedderConfig,
};
use crate::jsonl;
use crate::report::{self, ReportOptions, RunData};
use crate::sampling::{self, ChatBackend, HttpChatBackend, ReplayBackend, SamplingConfig};
use crate::scoring::ScoringConfig;
use crate::types::{
    AtomicFact, FactCluster, PreferencePair, Question, ResponseSample, ScoredResponse, DEFAULT_SYSTEM_PROMPT,
};
use crate::util::{parallel_indexed, sha256_hex};

/// Environment variable holding the API key for remote endpoints.
pub const API_KEY_ENV: &str = "OPENAI_API_KEY";

/// File names inside a run directory.
pub mod layout {
    pub const META: &str = "meta.json";
    pub const LOCK: &str = ".lock";
    pub const RESPONSES: &str = "responses.jsonl";
    pub const FACTS: &str = "facts.jsonl";
    pub const EMBEDDINGS: &str = "embeddings.bin";
    pub const EMBEDDING_IDS: &str = "embeddings.ids.jsonl";
    pub const CLUSTERS: &str = "clusters.jsonl";
    pub const MERGES: &str = "merges.jsonl";
    pub const SCORES: &str = "scores.jsonl";
    pub const PAIRS: &str = "pairs.jsonl";
    pub const REPORT_JSON: &str = "report.json";
    pub const REPORT_TXT: &str = "report.txt";
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("config hash {found} does not match the run directory ({expected}); use a fresh run_dir")]
    ConfigHashMismatch { expected: String, found: String },
    #[error("stage {stage} failed: {cause}")]
    StageFailed { stage: Stage, cause: String },
    #[error("run directory {0} is locked by another process (remove the lock file if it is stale)")]
    Locked(PathBuf),
}

impl PipelineError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::ConfigInvalid(_) | PipelineError::ConfigHashMismatch { .. } => 1,
            PipelineError::StageFailed { .. } => 2,
            PipelineError::Locked(_) => 3,
        }
    }
}

fn stage_err(stage: Stage) -> impl Fn(String) -> PipelineError {
    move |cause| PipelineError::StageFailed { stage, cause }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sample,
    Atomize,
    Embed,
    Cluster,
    Score,
    Pairs,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Sample,
        Stage::Atomize,
        Stage::Embed,
        Stage::Cluster,
        Stage::Score,
        Stage::Pairs,
        Stage::Report,
    ];

    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Sample => &[layout::RESPONSES],
            Stage::Atomize => &[layout::FACTS],
            Stage::Embed => &[layout::EMBEDDINGS, layout::EMBEDDING_IDS],
            Stage::Cluster => &[layout::CLUSTERS],
            Stage::Score => &[layout::SCORES],
            Stage::Pairs => &[layout::PAIRS],
            Stage::Report => &[layout::REPORT_JSON, layout::REPORT_TXT],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Sample => "sample",
            Stage::Atomize => "atomize",
            Stage::Embed => "embed",
            Stage::Cluster => "cluster",
            Stage::Score => "score",
            Stage::Pairs => "pairs",
            Stage::Report => "report",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingBackendKind {
    #[default]
    Offline,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub backend: EmbeddingBackendKind,
    /// Dimension of the offline embedder.
    pub dim: usize,
    /// Seed of the offline embedder.
    pub seed: u64,
    pub remote: RemoteEmbedderConfig,
    /// Append-only cache file shared across runs.
    pub cache: Option<PathBuf>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            backend: EmbeddingBackendKind::Offline,
            dim: 64,
            seed: 0,
            remote: RemoteEmbedderConfig::default(),
            cache: None,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<(), String> {
        match self.backend {
            EmbeddingBackendKind::Offline if self.dim == 0 => Err("embedding dim must be positive".into()),
            EmbeddingBackendKind::Remote if self.remote.batch_size == 0 => {
                Err("embedding batch_size must be positive".into())
            }
            _ => Ok(()),
        }
    }

    /// Builds the configured backend, wrapped in the cache when one is set.
    pub fn build(&self) -> Result<Box<dyn Embedder>, String> {
        self.validate()?;
        let inner: Box<dyn Embedder> = match self.backend {
            EmbeddingBackendKind::Offline => Box::new(OfflineHashEmbedder::new(self.dim, self.seed)),
            EmbeddingBackendKind::Remote => Box::new(
                RemoteEmbedder::new(self.remote.clone(), std::env::var(API_KEY_ENV).ok())
                    .map_err(|e| e.to_string())?,
            ),
        };
        Ok(match &self.cache {
            Some(path) => {
                let cache = EmbeddingCache::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
                Box::new(CachedEmbedder::new(inner, cache))
            }
            None => inner,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub consistent_only: bool,
    pub csv: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub questions: PathBuf,
    pub run_dir: PathBuf,
    pub run_seed: u64,
    /// Serve responses from recorded fixtures instead of the endpoint.
    pub replay_dir: Option<PathBuf>,
    /// Record live responses as fixtures.
    pub record_dir: Option<PathBuf>,
    /// Threads for the clustering stage.
    pub workers: usize,
    /// Also write the merge history of every question.
    pub merge_trace: bool,
    pub sampling: SamplingConfig,
    pub embedding: EmbeddingConfig,
    pub clustering: ClusteringConfig,
    pub scoring: ScoringConfig,
    pub strategies: Vec<PairStrategy>,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            questions: PathBuf::from("questions.jsonl"),
            run_dir: PathBuf::from("run"),
            run_seed: 0,
            replay_dir: None,
            record_dir: None,
            workers: std::thread::available_parallelism().map_or(1, usize::from),
            merge_trace: false,
            sampling: SamplingConfig::default(),
            embedding: EmbeddingConfig::default(),
            clustering: ClusteringConfig::default(),
            scoring: ScoringConfig::default(),
            strategies: vec![PairStrategy::default()],
            report: ReportConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| PipelineError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.questions);
        resolve(&mut cfg.run_dir);
        for p in [&mut cfg.replay_dir, &mut cfg.record_dir, &mut cfg.embedding.cache]
            .into_iter()
            .flatten()
        {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let invalid = |m: String| PipelineError::ConfigInvalid(m);
        self.sampling.validate().map_err(|e| invalid(e.to_string()))?;
        self.embedding.validate().map_err(invalid)?;
        self.clustering.validate().map_err(|e| invalid(e.to_string()))?;
        for s in &self.strategies {
            s.validate().map_err(|e| invalid(e.to_string()))?;
        }
        if self.workers == 0 {
            return Err(invalid("workers must be at least 1".into()));
        }
        Ok(())
    }

    /// Hash of everything that shapes the stage outputs, plus the bytes of
    /// the questions file. Paths that only locate the run are left out.
    pub fn hash(&self, questions_bytes: &[u8]) -> String {
        let mut c = self.clone();
        c.run_dir = PathBuf::new();
        c.questions = PathBuf::new();
        c.workers = 0;
        c.embedding.cache = None;
        c.record_dir = None;
        c.replay_dir = None;
        let mut bytes = serde_json::to_vec(&c).expect("config serializes");
        bytes.extend_from_slice(sha256_hex(questions_bytes).as_bytes());
        sha256_hex(&bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub finished_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedQuestion {
    pub question_id: String,
    pub error: String,
}

/// Provenance written to `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub tool_version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub system_prompt: String,
    pub sampling_model: String,
    pub embedding_backend: String,
    pub created_at: String,
    pub updated_at: String,
    pub stages: Vec<StageRecord>,
    #[serde(default)]
    pub failed_questions: Vec<FailedQuestion>,
    /// Responses that produced no sentences.
    #[serde(default)]
    pub degenerate_responses: Vec<String>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Exclusive lock on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(run_dir)
            .map_err(|e| PipelineError::ConfigInvalid(format!("{}: {e}", run_dir.display())))?;
        let path = run_dir.join(layout::LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked(run_dir.to_path_buf()))
            }
            Err(e) => Err(PipelineError::ConfigInvalid(format!("{}: {e}", path.display()))),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Samples every question, skipping the ones that fail.
pub fn stage_sample<B: ChatBackend + ?Sized>(
    questions: &[Question],
    cfg: &SamplingConfig,
    backend: &B,
    run_seed: u64,
    record_dir: Option<&Path>,
) -> Result<(Vec<ResponseSample>, Vec<FailedQuestion>), String> {
    let mut responses = Vec::new();
    let mut failed = Vec::new();
    for (q, result) in questions.iter().zip(sampling::sample_batch(questions, cfg, backend, run_seed)) {
        match result {
            Ok(rs) => {
                if let Some(dir) = record_dir {
                    sampling::record_fixture(q, &rs, dir).map_err(|e| e.to_string())?;
                }
                responses.extend(rs);
            }
            Err(e) => {
                log::warn!("question {} skipped: {e}", q.id);
                failed.push(FailedQuestion {
                    question_id: q.id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    if responses.is_empty() && !questions.is_empty() {
        return Err(format!("all {} questions failed to sample", questions.len()));
    }
    Ok((responses, failed))
}

/// Splits every response; returns the facts and the ids of degenerate
/// responses.
pub fn stage_atomize(responses: &[ResponseSample]) -> (Vec<AtomicFact>, Vec<String>) {
    let (facts, degenerate) = analysis::atomize_responses(responses);
    let ids = degenerate
        .into_iter()
        .map(|e| match e {
            atomizer::AtomizeError::NoSentences {
                question_id,
                sample_index,
            } => format!("{question_id}:{sample_index}"),
        })
        .collect();
    (facts, ids)
}

/// Embeds the non-excluded facts.
pub fn stage_embed<E: Embedder + ?Sized>(facts: &[AtomicFact], embedder: &E) -> Result<Vec<FactEmbedding>, String> {
    let kept: Vec<AtomicFact> = facts.iter().filter(|f| !f.excluded).cloned().collect();
    embedding::embed_facts(&kept, embedder).map_err(|e| e.to_string())
}

/// One merge of the clustering history, for audits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub question_id: String,
    #[serde(flatten)]
    pub merge: Merge,
}

/// Groups items by question id, keeping first-appearance order.
fn group_by_question<T>(items: &[T], key: impl Fn(&T) -> &str) -> Vec<(String, Vec<&T>)> {
    let mut order: Vec<(String, Vec<&T>)> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for it in items {
        let k = key(it);
        let i = *slot.entry(k.to_string()).or_insert_with(|| {
            order.push((k.to_string(), Vec::new()));
            order.len() - 1
        });
        order[i].1.push(it);
    }
    order
}

/// Clusters each question's facts, `workers` questions at a time.
pub fn stage_cluster(
    facts: &[AtomicFact],
    embeddings: &[FactEmbedding],
    clustering: &ClusteringConfig,
    scoring: &ScoringConfig,
    workers: usize,
) -> Result<(Vec<FactCluster>, Vec<MergeRecord>), String> {
    let groups = group_by_question(facts, |f| &f.question_id);
    let results = parallel_indexed(groups.len(), workers, |i| {
        let (qid, fs) = &groups[i];
        let fs: Vec<AtomicFact> = fs.iter().map(|f| (*f).clone()).collect();
        analysis::cluster_question(qid, &fs, embeddings, clustering, scoring)
    });
    let mut clusters = Vec::new();
    let mut merges = Vec::new();
    for ((qid, _), r) in groups.iter().zip(results) {
        let (cs, ms) = r.map_err(|e| e.to_string())?;
        clusters.extend(cs);
        merges.extend(ms.into_iter().map(|merge| MergeRecord {
            question_id: qid.clone(),
            merge,
        }));
    }
    Ok((clusters, merges))
}

/// Scores every response against its question's clusters.
pub fn stage_score(
    responses: &[ResponseSample],
    facts: &[AtomicFact],
    clusters: &[FactCluster],
    scoring: &ScoringConfig,
) -> Result<Vec<ScoredResponse>, String> {
    let facts_by_q: HashMap<String, Vec<AtomicFact>> = group_by_question(facts, |f| &f.question_id)
        .into_iter()
        .map(|(q, fs)| (q, fs.into_iter().cloned().collect()))
        .collect();
    let clusters_by_q: HashMap<String, Vec<FactCluster>> = group_by_question(clusters, |c| &c.question_id)
        .into_iter()
        .map(|(q, cs)| (q, cs.into_iter().cloned().collect()))
        .collect();
    let mut out = Vec::with_capacity(responses.len());
    for (qid, rs) in group_by_question(responses, |r| &r.question_id) {
        let rs: Vec<ResponseSample> = rs.into_iter().cloned().collect();
        let fs = facts_by_q.get(&qid).map_or(&[][..], Vec::as_slice);
        let cs = clusters_by_q.get(&qid).map_or(&[][..], Vec::as_slice);
        out.extend(analysis::score_question(&qid, &rs, fs, cs, scoring).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

/// Builds pairs for every strategy, in question order. Questions with too
/// few responses are skipped with a warning.
pub fn stage_pairs(
    questions: &[Question],
    responses: &[ResponseSample],
    scores: &[ScoredResponse],
    strategies: &[PairStrategy],
) -> Result<Vec<PreferencePair>, String> {
    let by_q: HashMap<String, Vec<&ResponseSample>> = group_by_question(responses, |r| &r.question_id)
        .into_iter()
        .collect();
    let mut pairs = Vec::new();
    for q in questions {
        let Some(rs) = by_q.get(&q.id) else { continue };
        let rs: Vec<ResponseSample> = rs.iter().map(|r| (*r).clone()).collect();
        for s in strategies {
            match curation::curate_pairs(&q.prompt_text, scores, &rs, s) {
                Ok(ps) => pairs.extend(ps),
                Err(e @ CurateError::InsufficientResponses { .. }) => {
                    log::warn!("question {}: {e}", q.id);
                }
                Err(e) => return Err(e.to_string()),
            }
        }
    }
    Ok(pairs)
}

/// Reads every stage file of a run directory.
pub fn load_run_data(run_dir: &Path, questions: &[Question]) -> Result<RunData, String> {
    let read = |name: &str| run_dir.join(name);
    let optional = |name: &str| read(name).exists();
    Ok(RunData {
        questions: questions.to_vec(),
        responses: sampling::read_responses(&read(layout::RESPONSES)).map_err(|e| e.to_string())?,
        facts: jsonl::read(&read(layout::FACTS)).map_err(|e| e.to_string())?,
        clusters: jsonl::read(&read(layout::CLUSTERS)).map_err(|e| e.to_string())?,
        scores: jsonl::read(&read(layout::SCORES)).map_err(|e| e.to_string())?,
        pairs: if optional(layout::PAIRS) {
            jsonl::read(&read(layout::PAIRS)).map_err(|e| e.to_string())?
        } else {
            Vec::new()
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub stages: Vec<(Stage, StageStatus)>,
    pub failed_questions: Vec<FailedQuestion>,
}

impl RunSummary {
    pub fn ran(&self, stage: Stage) -> bool {
        self.stages.contains(&(stage, StageStatus::Ran))
    }
}

/// Runs the pipeline with the backends named in the config.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    let backend: Box<dyn ChatBackend> = match &cfg.replay_dir {
        Some(dir) => Box::new(ReplayBackend::new(dir.clone())),
        None => Box::new(
            HttpChatBackend::new(&cfg.sampling, std::env::var(API_KEY_ENV).ok())
                .map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?,
        ),
    };
    let embedder = cfg.embedding.build().map_err(PipelineError::ConfigInvalid)?;
    run_pipeline_with(cfg, backend.as_ref(), embedder.as_ref())
}

/// Runs the pipeline with explicit backends.
pub fn run_pipeline_with(
    cfg: &RunConfig,
    backend: &dyn ChatBackend,
    embedder: &dyn Embedder,
) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    let questions_bytes = std::fs::read(&cfg.questions)
        .map_err(|e| PipelineError::ConfigInvalid(format!("{}: {e}", cfg.questions.display())))?;
    let questions = sampling::read_questions(&cfg.questions)
        .map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
    if questions.is_empty() {
        return Err(PipelineError::ConfigInvalid("no questions".into()));
    }
    for q in &questions {
        q.validate().map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
    }
    let hash = cfg.hash(&questions_bytes);

    let dir = cfg.run_dir.as_path();
    let _lock = RunLock::acquire(dir)?;
    let meta_path = dir.join(layout::META);
    let previous: Option<RunMeta> = if meta_path.exists() {
        let text = std::fs::read_to_string(&meta_path)
            .map_err(|e| PipelineError::ConfigInvalid(format!("{}: {e}", meta_path.display())))?;
        Some(
            serde_json::from_str(&text)
                .map_err(|e| PipelineError::ConfigInvalid(format!("{}: {e}", meta_path.display())))?,
        )
    } else {
        None
    };
    if let Some(prev) = &previous {
        if prev.config_hash != hash {
            return Err(PipelineError::ConfigHashMismatch {
                expected: prev.config_hash.clone(),
                found: hash,
            });
        }
    }
    let started = now();
    let mut meta = RunMeta {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: hash,
        config: cfg.clone(),
        system_prompt: DEFAULT_SYSTEM_PROMPT.to_string(),
        sampling_model: if cfg.replay_dir.is_some() {
            format!("replay:{}", cfg.sampling.model_name)
        } else {
            cfg.sampling.model_name.clone()
        },
        embedding_backend: embedder.backend_id(),
        created_at: previous.as_ref().map_or(started.clone(), |p| p.created_at.clone()),
        updated_at: started,
        stages: Vec::new(),
        failed_questions: previous.as_ref().map(|p| p.failed_questions.clone()).unwrap_or_default(),
        degenerate_responses: previous.as_ref().map(|p| p.degenerate_responses.clone()).unwrap_or_default(),
    };

    let path = |name: &str| dir.join(name);
    let mut upstream_ran = false;
    let mut summary = RunSummary {
        run_dir: dir.to_path_buf(),
        stages: Vec::new(),
        failed_questions: Vec::new(),
    };
    for stage in Stage::ALL {
        let complete = stage.outputs().iter().all(|f| path(f).exists());
        let status = if complete && !upstream_ran {
            StageStatus::Skipped
        } else {
            run_stage(stage, cfg, &questions, backend, embedder, dir, &mut meta)?;
            upstream_ran = true;
            StageStatus::Ran
        };
        log::info!("stage {stage}: {status:?}");
        summary.stages.push((stage, status));
        meta.stages.push(StageRecord {
            stage,
            status,
            finished_at: now(),
        });
        meta.updated_at = now();
        jsonl::write_json(&meta_path, &meta).map_err(|e| stage_err(stage)(e.to_string()))?;
    }
    summary.failed_questions = meta.failed_questions.clone();
    Ok(summary)
}

fn run_stage(
    stage: Stage,
    cfg: &RunConfig,
    questions: &[Question],
    backend: &dyn ChatBackend,
    embedder: &dyn Embedder,
    dir: &Path,
    meta: &mut RunMeta,
) -> Result<(), PipelineError> {
    let fail = stage_err(stage);
    let path = |name: &str| dir.join(name);
    let io = |e: jsonl::JsonlError| fail(e.to_string());
    match stage {
        Stage::Sample => {
            let (responses, failed) = stage_sample(
                questions,
                &cfg.sampling,
                backend,
                cfg.run_seed,
                cfg.record_dir.as_deref(),
            )
            .map_err(&fail)?;
            meta.failed_questions = failed;
            jsonl::write(&path(layout::RESPONSES), &responses).map_err(io)?;
        }
        Stage::Atomize => {
            let responses = sampling::read_responses(&path(layout::RESPONSES)).map_err(io)?;
            let (facts, degenerate) = stage_atomize(&responses);
            for id in &degenerate {
                log::warn!("response {id} has no sentences and scores 0");
            }
            meta.degenerate_responses = degenerate;
            jsonl::write(&path(layout::FACTS), &facts).map_err(io)?;
        }
        Stage::Embed => {
            let facts: Vec<AtomicFact> = jsonl::read(&path(layout::FACTS)).map_err(io)?;
            let embeddings = stage_embed(&facts, embedder).map_err(&fail)?;
            write_embeddings(&path(layout::EMBEDDINGS), &embeddings).map_err(|e| fail(e.to_string()))?;
        }
        Stage::Cluster => {
            let facts: Vec<AtomicFact> = jsonl::read(&path(layout::FACTS)).map_err(io)?;
            let embeddings = read_embeddings(&path(layout::EMBEDDINGS)).map_err(|e| fail(e.to_string()))?;
            let (clusters, merges) =
                stage_cluster(&facts, &embeddings, &cfg.clustering, &cfg.scoring, cfg.workers).map_err(&fail)?;
            if cfg.merge_trace {
                jsonl::write(&path(layout::MERGES), &merges).map_err(io)?;
            }
            jsonl::write(&path(layout::CLUSTERS), &clusters).map_err(io)?;
        }
        Stage::Score => {
            let responses = sampling::read_responses(&path(layout::RESPONSES)).map_err(io)?;
            let facts: Vec<AtomicFact> = jsonl::read(&path(layout::FACTS)).map_err(io)?;
            let clusters: Vec<FactCluster> = jsonl::read(&path(layout::CLUSTERS)).map_err(io)?;
            let scores = stage_score(&responses, &facts, &clusters, &cfg.scoring).map_err(&fail)?;
            jsonl::write(&path(layout::SCORES), &scores).map_err(io)?;
        }
        Stage::Pairs => {
            let responses = sampling::read_responses(&path(layout::RESPONSES)).map_err(io)?;
            let scores: Vec<ScoredResponse> = jsonl::read(&path(layout::SCORES)).map_err(io)?;
            let pairs = stage_pairs(questions, &responses, &scores, &cfg.strategies).map_err(&fail)?;
            jsonl::write(&path(layout::PAIRS), &pairs).map_err(io)?;
        }
        Stage::Report => {
            let data = load_run_data(dir, questions).map_err(&fail)?;
            let stats = report::dataset_stats(
                &data,
                ReportOptions {
                    consistent_only: cfg.report.consistent_only,
                },
            )
            .map_err(|e| fail(e.to_string()))?;
            report::write_report(dir, &stats, cfg.report.csv).map_err(|e| fail(e.to_string()))?;
        }
    }
    Ok(())
}
