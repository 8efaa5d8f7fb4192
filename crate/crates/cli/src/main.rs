use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acpo_core::asc;
use acpo_core::clustering::ClusteringConfig;
use acpo_core::curation::PairStrategy;
use acpo_core::dpo::{self, LogProbMode};
use acpo_core::embedding::{read_embeddings, write_embeddings};
use acpo_core::jsonl;
use acpo_core::pipeline::{self, layout, RunConfig, API_KEY_ENV};
use acpo_core::report::{self, ReportOptions};
use acpo_core::sampling::{self, ChatBackend, HttpChatBackend, ReplayBackend};
use acpo_core::scoring::ScoringConfig;
use acpo_core::sim::{self, FactWorld, SimSummary};
use acpo_core::{AtomicFact, FactCluster, ScoredResponse};
use clap::{Args, Parser, Subcommand};

/// Curate preference pairs from the self-consistency of sampled answers.
#[derive(Parser)]
#[command(name = "acpo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample m responses per question.
    Sample {
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        m: Option<usize>,
        /// Save the sampled responses as replay fixtures.
        #[arg(long)]
        record_dir: Option<PathBuf>,
    },
    /// Split responses into sentence-level facts.
    Atomize {
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed the non-excluded facts into a binary embeddings file.
    Embed {
        #[arg(long)]
        facts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Cluster each question's facts and label the clusters.
    Cluster {
        #[arg(long)]
        facts: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        theta: Option<usize>,
        /// Also write the merge history here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Score responses against the labeled clusters.
    Score {
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        facts: PathBuf,
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        theta: Option<usize>,
    },
    /// Build preference pairs from scored responses.
    Pairs {
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        /// top1-bottom1, topk:K, length-balanced:K:R:longest|shortest,
        /// longest-preferred or shortest-preferred. Repeatable.
        #[arg(long = "strategy")]
        strategies: Vec<PairStrategy>,
    },
    /// Write report.json and report.txt for a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long)]
        consistent_only: bool,
        /// Also write the score histogram as report.csv.
        #[arg(long)]
        csv: bool,
    },
    /// Run every stage, resuming a partially complete run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sample, score and keep the best response for each question.
    AscSelect {
        #[arg(long)]
        question_file: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        m: Option<usize>,
    },
    /// Run the synthetic factuality simulator.
    Simulate {
        /// TOML world description; defaults apply to missing keys.
        #[arg(long)]
        world_config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 30)]
        m: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "strategy", default_value = "top1-bottom1")]
        strategy: PairStrategy,
    },
    /// Evaluate the DPO loss of pairs from per-token log-probs.
    DpoEval {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        logprobs: PathBuf,
        #[arg(long, default_value = "total")]
        mode: LogProbMode,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Run config supplying the stage settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Serve responses from recorded fixtures.
    #[arg(long)]
    replay_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).map_err(Failure::config)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.replay_dir {
            cfg.replay_dir = Some(d.clone());
        }
        if let Some(s) = self.seed {
            cfg.run_seed = s;
        }
        Ok(cfg)
    }
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(e: impl Into<anyhow::Error>) -> Self {
        Failure { code: 1, error: e.into() }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure { code: 2, error: e.into() }
    }
}

fn chat_backend(cfg: &RunConfig) -> Result<Box<dyn ChatBackend>, Failure> {
    Ok(match &cfg.replay_dir {
        Some(dir) => Box::new(ReplayBackend::new(dir.clone())),
        None => Box::new(
            HttpChatBackend::new(&cfg.sampling, std::env::var(API_KEY_ENV).ok()).map_err(Failure::config)?,
        ),
    })
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Sample {
            questions,
            out,
            common,
            m,
            record_dir,
        } => {
            let mut cfg = common.load()?;
            if let Some(m) = m {
                cfg.sampling.m = m;
            }
            cfg.sampling.validate().map_err(Failure::config)?;
            let qs = sampling::read_questions(&questions).map_err(Failure::config)?;
            let backend = chat_backend(&cfg)?;
            let (responses, failed) =
                pipeline::stage_sample(&qs, &cfg.sampling, backend.as_ref(), cfg.run_seed, record_dir.as_deref())
                    .map_err(anyhow::Error::msg)?;
            jsonl::write(&out, &responses)?;
            log::info!("{} responses, {} questions failed", responses.len(), failed.len());
        }
        Command::Atomize { responses, out } => {
            let rs = sampling::read_responses(&responses).map_err(Failure::config)?;
            let (facts, degenerate) = pipeline::stage_atomize(&rs);
            for id in degenerate {
                log::warn!("response {id} has no sentences");
            }
            jsonl::write(&out, &facts)?;
            log::info!("{} facts", facts.len());
        }
        Command::Embed { facts, out, common } => {
            let cfg = common.load()?;
            let facts: Vec<AtomicFact> = jsonl::read(&facts).map_err(Failure::config)?;
            let embedder = cfg.embedding.build().map_err(|e| Failure::config(anyhow::Error::msg(e)))?;
            let embeddings = pipeline::stage_embed(&facts, embedder.as_ref()).map_err(anyhow::Error::msg)?;
            write_embeddings(&out, &embeddings)?;
            log::info!("{} embeddings", embeddings.len());
        }
        Command::Cluster {
            facts,
            embeddings,
            out,
            common,
            threshold,
            theta,
            trace,
        } => {
            let cfg = common.load()?;
            let mut clustering: ClusteringConfig = cfg.clustering;
            if let Some(t) = threshold {
                clustering.distance_threshold = t;
            }
            clustering.validate().map_err(Failure::config)?;
            let mut scoring: ScoringConfig = cfg.scoring;
            if let Some(t) = theta {
                scoring.theta = t;
            }
            let facts: Vec<AtomicFact> = jsonl::read(&facts).map_err(Failure::config)?;
            let embeddings = read_embeddings(&embeddings).map_err(Failure::config)?;
            let (clusters, merges) = pipeline::stage_cluster(&facts, &embeddings, &clustering, &scoring, cfg.workers)
                .map_err(anyhow::Error::msg)?;
            if let Some(t) = trace {
                jsonl::write(&t, &merges)?;
            }
            jsonl::write(&out, &clusters)?;
            log::info!("{} clusters", clusters.len());
        }
        Command::Score {
            responses,
            facts,
            clusters,
            out,
            common,
            theta,
        } => {
            let mut scoring = common.load()?.scoring;
            if let Some(t) = theta {
                scoring.theta = t;
            }
            let rs = sampling::read_responses(&responses).map_err(Failure::config)?;
            let facts: Vec<AtomicFact> = jsonl::read(&facts).map_err(Failure::config)?;
            let clusters: Vec<FactCluster> = jsonl::read(&clusters).map_err(Failure::config)?;
            let scores = pipeline::stage_score(&rs, &facts, &clusters, &scoring).map_err(anyhow::Error::msg)?;
            jsonl::write(&out, &scores)?;
        }
        Command::Pairs {
            questions,
            responses,
            scores,
            out,
            common,
            strategies,
        } => {
            let cfg = common.load()?;
            let strategies = if strategies.is_empty() { cfg.strategies } else { strategies };
            let qs = sampling::read_questions(&questions).map_err(Failure::config)?;
            let rs = sampling::read_responses(&responses).map_err(Failure::config)?;
            let scores: Vec<ScoredResponse> = jsonl::read(&scores).map_err(Failure::config)?;
            let pairs = pipeline::stage_pairs(&qs, &rs, &scores, &strategies).map_err(anyhow::Error::msg)?;
            jsonl::write(&out, &pairs)?;
            log::info!("{} pairs", pairs.len());
        }
        Command::Report {
            run_dir,
            questions,
            consistent_only,
            csv,
        } => {
            let qs = match questions {
                Some(p) => sampling::read_questions(&p).map_err(Failure::config)?,
                None => Vec::new(),
            };
            let data = pipeline::load_run_data(&run_dir, &qs).map_err(|e| Failure::config(anyhow::Error::msg(e)))?;
            let stats = report::dataset_stats(&data, ReportOptions { consistent_only })?;
            report::write_report(&run_dir, &stats, csv)?;
            print!("{}", report::render_text(&stats));
        }
        Command::Run { config } => {
            let cfg = RunConfig::load(&config).map_err(|e| Failure {
                code: e.exit_code() as u8,
                error: e.into(),
            })?;
            match pipeline::run_pipeline(&cfg) {
                Ok(summary) => {
                    let report = std::fs::read_to_string(summary.run_dir.join(layout::REPORT_TXT))?;
                    print!("{report}");
                }
                Err(e) => {
                    return Err(Failure {
                        code: e.exit_code() as u8,
                        error: e.into(),
                    })
                }
            }
        }
        Command::AscSelect {
            question_file,
            out,
            common,
            m,
        } => asc_select(&question_file, &out, &common, m)?,
        Command::Simulate {
            world_config,
            trials,
            m,
            out,
            strategy,
        } => simulate(world_config.as_deref(), trials, m, &out, &strategy)?,
        Command::DpoEval {
            pairs,
            logprobs,
            mode,
            beta,
            out,
        } => {
            let report = dpo::batch_dpo_report_files(&pairs, &logprobs, mode, beta)?;
            if let Some(p) = out {
                jsonl::write_json(&p, &report)?;
            }
            print_json(&report)?;
        }
    }
    Ok(())
}

fn asc_select(questions: &Path, out: &Path, common: &Common, m: Option<usize>) -> Result<(), Failure> {
    let mut cfg = common.load()?;
    if let Some(m) = m {
        cfg.sampling.m = m;
    }
    let qs = sampling::read_questions(questions).map_err(Failure::config)?;
    if qs.is_empty() {
        return Err(Failure::config(anyhow::anyhow!("no questions")));
    }
    let backend = chat_backend(&cfg)?;
    let embedder = cfg.embedding.build().map_err(|e| Failure::config(anyhow::Error::msg(e)))?;
    let mut selected = Vec::new();
    let mut scores = Vec::new();
    for q in &qs {
        match asc::asc_select(
            q,
            &cfg.sampling,
            backend.as_ref(),
            cfg.run_seed,
            embedder.as_ref(),
            &cfg.clustering,
            &cfg.scoring,
        ) {
            Ok((sel, _)) => {
                scores.extend(sel.all_scored.iter().cloned());
                selected.push(sel);
            }
            Err(e) => log::warn!("question {} skipped: {e}", q.id),
        }
    }
    if selected.is_empty() {
        return Err(anyhow::anyhow!("every question failed").into());
    }
    jsonl::write(&out.join("selected.jsonl"), &selected)?;
    jsonl::write(&out.join("scores.jsonl"), &scores)?;
    let mean = selected.iter().map(|s| s.mean_score).sum::<f64>() / selected.len() as f64;
    println!("selected {} responses; mean sample score {mean:.3}", selected.len());
    Ok(())
}

fn simulate(
    world_config: Option<&Path>,
    trials: usize,
    m: usize,
    out: &Path,
    strategy: &PairStrategy,
) -> Result<(), Failure> {
    let world = match world_config {
        Some(p) => FactWorld::load(p).map_err(Failure::config)?,
        None => FactWorld::default(),
    };
    if m < 2 || trials == 0 {
        return Err(Failure::config(anyhow::anyhow!("need m >= 2 and at least one trial")));
    }
    let workers = std::thread::available_parallelism().map_or(1, usize::from);
    let outcomes = sim::run_trials(
        &world,
        m,
        trials,
        &ClusteringConfig::default(),
        &ScoringConfig::default(),
        strategy,
        workers,
    )?;
    let mut questions = Vec::new();
    let mut responses = Vec::new();
    let mut facts = Vec::new();
    let mut clusters = Vec::new();
    let mut scores = Vec::new();
    let mut pairs = Vec::new();
    let mut truth = Vec::new();
    let mut precision = Vec::new();
    for o in &outcomes {
        questions.push(o.sim.question.clone());
        responses.extend(o.sim.responses.iter().cloned());
        facts.extend(o.analysis.facts.iter().cloned());
        clusters.extend(o.analysis.clusters.iter().cloned());
        scores.extend(o.analysis.scored.iter().cloned());
        pairs.extend(o.pairs.iter().cloned());
        truth.extend(o.sim.ground_truth_records());
        precision.extend(o.precision.responses.iter().cloned());
    }
    let w = |name: &str| out.join(name);
    jsonl::write(&w("questions.jsonl"), &questions)?;
    jsonl::write(&w(layout::RESPONSES), &responses)?;
    jsonl::write(&w(layout::FACTS), &facts)?;
    jsonl::write(&w(layout::CLUSTERS), &clusters)?;
    jsonl::write(&w(layout::SCORES), &scores)?;
    jsonl::write(&w(layout::PAIRS), &pairs)?;
    jsonl::write(&w("ground_truth.jsonl"), &truth)?;
    jsonl::write(&w("precision.jsonl"), &precision)?;
    let summary = SimSummary::from_outcomes(&outcomes);
    jsonl::write_json(&w("summary.json"), &summary)?;
    print_json(&summary)?;
    Ok(())
}
