//! End-to-end pipeline: for each seed sample, draw agent pairs, generate
//! candidates (plus the base candidate), score, select the winner into the
//! output dataset, reward the sampled pairs and feed the memory bank —
//! with checkpointing and bounded concurrency.
//!
//! # Scheduling and determinism
//!
//! Seeds are processed in blocks of `workers`. Every seed in a block draws
//! pairs against the state committed at the block start; results then
//! commit strictly in seed order. Staleness within a block is therefore a
//! deterministic function of (config, seed, workers), never of thread
//! timing, and a checkpoint taken between blocks resumes bit-identically.
//! With one worker each seed sees every earlier seed's updates.
//!
//! All randomness derives from the master seed: seed sample `i` uses
//! `derive_seed(master, "seed/i")`, and each agent call, retry and pair
//! draw salts that with its own tag.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{
    CheckpointError, FileOffsets, PipelineCheckpoint, RunCounts, CHECKPOINT_VERSION,
};
use crate::config::{ConfigError, PipelineConfig, RefereeQuestionSource, RewardMode, TemplatePaths};
use crate::dataset::{CandidateRecord, DatasetError, InstructionSample};
use crate::evolution::{EvolutionError, PairDraw, PairId, PairMatrix, TrajectoryWriter};
use crate::gateway::{
    AgentId, Gateway, GatewayError, GatewayOptions, HttpBackend, MockBackend, Prompt, ReplayLogger,
};
use crate::hashing::derive_seed;
use crate::memory::{MemoryBank, MemoryEntry, MemoryError};
use crate::scoring::{
    compose_and_select, compute_dual_scores, compute_ifd, Referee, ScoringError, Selection,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("template {path}: {detail}")]
    Template { path: PathBuf, detail: String },
    #[error("checkpoint does not match this config: {0}")]
    CheckpointMismatch(String),
    #[error("refusing to overwrite existing run state {0}; resume or remove it")]
    ExistingState(PathBuf),
    #[error("io error on {path}: {detail}")]
    Io { path: PathBuf, detail: String },
    /// Unrecoverable backend failure; a checkpoint was written and the run
    /// can be resumed.
    #[error("run aborted (resumable): {detail}")]
    Aborted { detail: String },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io { path: path.to_path_buf(), detail: e.to_string() }
}

/// Prompt templates with their fill-in slots.
///
/// * rewrite: `{instruction}`
/// * respond: `{instruction}`, `{reference_response}`
/// * referee user: `<question>`, `<answer_a>`, `<answer_b>`
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    pub rewrite: String,
    pub respond: String,
    pub referee_system: String,
    pub referee_user: String,
}

impl PromptTemplates {
    /// The templates shipped with the crate.
    pub fn embedded_defaults() -> Self {
        PromptTemplates {
            rewrite: include_str!("../templates/rewrite_instruction.txt").trim_end().into(),
            respond: include_str!("../templates/write_response.txt").trim_end().into(),
            referee_system: include_str!("../templates/referee_system.txt").trim_end().into(),
            referee_user: include_str!("../templates/referee_user.txt").trim_end().into(),
        }
    }

    /// Embedded defaults, with any configured file taking precedence.
    pub fn load(paths: &TemplatePaths) -> Result<Self, PipelineError> {
        let mut templates = Self::embedded_defaults();
        let read = |path: &Option<PathBuf>, slot: &mut String| -> Result<(), PipelineError> {
            if let Some(path) = path {
                *slot = std::fs::read_to_string(path)
                    .map_err(|e| PipelineError::Template {
                        path: path.clone(),
                        detail: e.to_string(),
                    })?
                    .trim_end()
                    .to_string();
            }
            Ok(())
        };
        read(&paths.rewrite, &mut templates.rewrite)?;
        read(&paths.respond, &mut templates.respond)?;
        read(&paths.referee_system, &mut templates.referee_system)?;
        read(&paths.referee_user, &mut templates.referee_user)?;
        Ok(templates)
    }

    pub fn fill_rewrite(&self, instruction: &str) -> String {
        self.rewrite.replace("{instruction}", instruction)
    }

    pub fn fill_respond(&self, instruction: &str, reference_response: &str) -> String {
        self.respond
            .replace("{instruction}", instruction)
            .replace("{reference_response}", reference_response)
    }
}

/// Resolved agent roster, index-aligned with the pair matrix.
pub struct Roster {
    pub rewriters: Vec<AgentId>,
    pub responders: Vec<AgentId>,
    pub referee: AgentId,
    pub scorer_small: AgentId,
    pub scorer_large: AgentId,
    pub embedder: AgentId,
}

impl Roster {
    pub fn from_config(config: &PipelineConfig) -> Result<Self, ConfigError> {
        Ok(Roster {
            rewriters: config
                .agents_with_role(crate::gateway::Role::InstructionRewriter)
                .into_iter()
                .map(|a| a.to_agent_id())
                .collect(),
            responders: config
                .agents_with_role(crate::gateway::Role::ResponseGenerator)
                .into_iter()
                .map(|a| a.to_agent_id())
                .collect(),
            referee: config.referee()?,
            scorer_small: config.scorer_small()?,
            scorer_large: config.scorer_large()?,
            embedder: config.embedder()?,
        })
    }
}

/// Build the gateway described by the config (mock always available, HTTP
/// only when some agent needs it, optional replay log).
pub fn build_gateway(config: &PipelineConfig) -> Result<Gateway, PipelineError> {
    let options = GatewayOptions {
        embedding_dim: config.embedding_dim,
        max_in_flight: config.max_in_flight,
    };
    let mock = MockBackend::new(config.mock.clone()).with_embedding_dim(config.embedding_dim);
    let needs_http =
        config.agents.iter().any(|a| a.backend == crate::gateway::BackendKind::Http);
    let http: Option<Box<dyn crate::gateway::Backend>> = if needs_http {
        Some(Box::new(HttpBackend::new(config.gateway.clone())?))
    } else {
        None
    };
    let mut gateway = Gateway::with_backends(Box::new(mock), http, options);
    if let Some(path) = &config.paths.replay_log {
        gateway = gateway.with_replay(ReplayLogger::create(path)?);
    }
    Ok(gateway)
}

/// Per-invocation options for [`run_pipeline`].
#[derive(Default)]
pub struct RunOptions {
    /// Continue from the checkpoint instead of starting fresh.
    pub resume: bool,
    /// Stop with a checkpoint (resumable) once at least this many seeds
    /// have been processed in this invocation. Stops land on worker-block
    /// boundaries, so up to `workers - 1` extra seeds may be processed;
    /// this keeps block snapshots aligned across legs and makes a resumed
    /// run equal an uninterrupted one for any worker count.
    pub stop_after: Option<usize>,
    /// Cooperative cancellation; checked between blocks.
    pub cancel: Option<Arc<AtomicBool>>,
}

#[derive(Debug)]
pub struct RunOutcome {
    /// True when every seed has been processed.
    pub completed: bool,
    pub cursor: usize,
    pub total_seeds: usize,
    pub processed_this_run: u64,
    pub counts: RunCounts,
}

struct AdmissionProto {
    embedding: Vec<f64>,
    pair: PairId,
    score: f64,
    seed_id: String,
}

struct SeedOutcome {
    index: usize,
    draw: PairDraw,
    base_records: Vec<CandidateRecord>,
    candidates: Vec<(PairId, CandidateRecord)>,
    selection: Selection,
    rewards: Vec<(PairId, f64)>,
    admission: Option<AdmissionProto>,
    parse_failures: u64,
    dropped: u64,
}

/// Run the whole loop with the gateway described by the config.
pub fn run_pipeline(
    config: &PipelineConfig,
    options: RunOptions,
) -> Result<RunOutcome, PipelineError> {
    let gateway = build_gateway(config)?;
    run_pipeline_with(config, options, &gateway)
}

/// Run the loop against a caller-supplied gateway (scripted fixtures,
/// replay backends). See the module docs for scheduling semantics.
pub fn run_pipeline_with(
    config: &PipelineConfig,
    options: RunOptions,
    gateway: &Gateway,
) -> Result<RunOutcome, PipelineError> {
    config.validate()?;
    let samples = crate::dataset::load_seed_dataset(&config.paths.seed_dataset)?;
    let templates = PromptTemplates::load(&config.templates)?;
    let roster = Roster::from_config(config)?;

    let mut state = if options.resume {
        RunState::resume(config)?
    } else {
        RunState::fresh(config)?
    };
    if state.cursor > samples.len() {
        return Err(PipelineError::CheckpointMismatch(format!(
            "cursor {} is beyond the {}-sample dataset",
            state.cursor,
            samples.len()
        )));
    }

    let workers = config.workers;
    let memory_draws = config.resolved_memory_draws();
    let mut processed_this_run = 0u64;
    let stop_after = options.stop_after.unwrap_or(usize::MAX);

    while state.cursor < samples.len() {
        if processed_this_run as usize >= stop_after {
            state.write_checkpoint(config)?;
            log::info!("stopping after {processed_this_run} seeds (resumable)");
            return Ok(state.outcome(false, samples.len(), processed_this_run));
        }
        if options.cancel.as_ref().is_some_and(|c| c.load(Ordering::Relaxed)) {
            state.write_checkpoint(config)?;
            log::info!("cancelled at seed {} (resumable)", state.cursor);
            return Ok(state.outcome(false, samples.len(), processed_this_run));
        }

        // Blocks are aligned to absolute seed indices so every leg of a
        // resumed run sees the same block membership; a leg resuming from
        // a mid-block abort first finishes that block.
        let block_end = samples.len().min((state.cursor / workers + 1) * workers);
        let block: Vec<usize> = (state.cursor..block_end).collect();

        // Process the block against the committed snapshot.
        let matrix = &state.matrix;
        let bank = &state.bank;
        let gateway_ref = gateway;
        let templates_ref = &templates;
        let roster_ref = &roster;
        let mut results: Vec<Option<Result<SeedOutcome, PipelineError>>> =
            Vec::with_capacity(block.len());
        std::thread::scope(|scope| {
            let handles: Vec<_> = block
                .iter()
                .map(|&index| {
                    let sample = &samples[index];
                    scope.spawn(move || {
                        process_seed(
                            config,
                            matrix,
                            bank,
                            gateway_ref,
                            templates_ref,
                            roster_ref,
                            memory_draws,
                            index,
                            sample,
                        )
                    })
                })
                .collect();
            for handle in handles {
                results.push(Some(handle.join().expect("seed worker panicked")));
            }
        });

        // Commit in seed order; the first fatal error aborts resumably.
        for result in results.into_iter().flatten() {
            match result {
                Ok(outcome) => {
                    state.commit(config, outcome)?;
                    processed_this_run += 1;
                }
                Err(err) => {
                    state.write_checkpoint(config)?;
                    return Err(PipelineError::Aborted { detail: err.to_string() });
                }
            }
        }

        if state.cursor.is_multiple_of(config.checkpoint_every) {
            state.write_checkpoint(config)?;
        }
        if state.cursor.is_multiple_of(100) {
            log::info!("processed {}/{} seeds", state.cursor, samples.len());
        }
    }

    state.write_checkpoint(config)?;
    log::info!(
        "done: {} seeds, {} base fallbacks, {} referee parse failures, {} dropped candidates",
        state.counts.processed,
        state.counts.base_fallbacks,
        state.counts.referee_parse_failures,
        state.counts.dropped_candidates
    );
    Ok(state.outcome(true, samples.len(), processed_this_run))
}

/// Mutable run state plus the append-only artifact writers.
struct RunState {
    cursor: usize,
    matrix: PairMatrix,
    bank: MemoryBank,
    counts: RunCounts,
    output: BufWriter<File>,
    candidate_log: BufWriter<File>,
    trajectory: TrajectoryWriter<BufWriter<File>>,
}

impl RunState {
    fn fresh(config: &PipelineConfig) -> Result<Self, PipelineError> {
        if config.paths.checkpoint.exists() {
            return Err(PipelineError::ExistingState(config.paths.checkpoint.clone()));
        }
        let matrix = PairMatrix::init_uniform(
            config.rewriter_names(),
            config.responder_names(),
            config.base_pair_ids()?,
            config.evolution_rate,
        )?;
        let bank = MemoryBank::new(
            config.embedding_dim,
            config.bank_capacity,
            config.admission_threshold,
        );
        let create = |path: &PathBuf| {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(io_err(path))?;
            }
            Ok::<_, PipelineError>(BufWriter::new(File::create(path).map_err(io_err(path))?))
        };
        let output = create(&config.paths.output)?;
        let candidate_log = create(&config.paths.candidate_log)?;
        let trajectory =
            TrajectoryWriter::new(create(&config.paths.trajectory)?, "update_count")
                .map_err(|e| io_err(&config.paths.trajectory)(std::io::Error::other(e)))?;
        Ok(RunState {
            cursor: 0,
            matrix,
            bank,
            counts: RunCounts::default(),
            output,
            candidate_log,
            trajectory,
        })
    }

    fn resume(config: &PipelineConfig) -> Result<Self, PipelineError> {
        let checkpoint = PipelineCheckpoint::load(&config.paths.checkpoint)?;
        if checkpoint.master_seed != config.master_seed {
            return Err(PipelineError::CheckpointMismatch(format!(
                "master seed {} in checkpoint, {} in config",
                checkpoint.master_seed, config.master_seed
            )));
        }
        if checkpoint.matrix.rewriters() != config.rewriter_names()
            || checkpoint.matrix.responders() != config.responder_names()
        {
            return Err(PipelineError::CheckpointMismatch(
                "agent roster differs from the checkpointed matrix".into(),
            ));
        }
        if checkpoint.bank.dim() != config.embedding_dim {
            return Err(PipelineError::CheckpointMismatch(format!(
                "bank dimension {} vs configured embedding_dim {}",
                checkpoint.bank.dim(),
                config.embedding_dim
            )));
        }

        // Truncate away any bytes written after the checkpoint was taken.
        let reopen = |path: &PathBuf, len: u64| -> Result<BufWriter<File>, PipelineError> {
            let file = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
            if file.metadata().map_err(io_err(path))?.len() < len {
                return Err(PipelineError::CheckpointMismatch(format!(
                    "{} is shorter than the checkpointed {len} bytes",
                    path.display()
                )));
            }
            file.set_len(len).map_err(io_err(path))?;
            let mut file =
                OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
            file.flush().map_err(io_err(path))?;
            Ok(BufWriter::new(file))
        };
        let output = reopen(&config.paths.output, checkpoint.offsets.output)?;
        let candidate_log =
            reopen(&config.paths.candidate_log, checkpoint.offsets.candidate_log)?;
        let trajectory = TrajectoryWriter::append(reopen(
            &config.paths.trajectory,
            checkpoint.offsets.trajectory,
        )?);
        Ok(RunState {
            cursor: checkpoint.cursor,
            matrix: checkpoint.matrix,
            bank: checkpoint.bank,
            counts: checkpoint.counts,
            output,
            candidate_log,
            trajectory,
        })
    }

    fn append_jsonl<T: Serialize>(
        writer: &mut BufWriter<File>,
        record: &T,
    ) -> Result<(), PipelineError> {
        serde_json::to_writer(&mut *writer, record).map_err(|e| PipelineError::Io {
            path: PathBuf::new(),
            detail: e.to_string(),
        })?;
        writer
            .write_all(b"\n")
            .map_err(|e| PipelineError::Io { path: PathBuf::new(), detail: e.to_string() })
    }

    fn commit(
        &mut self,
        config: &PipelineConfig,
        outcome: SeedOutcome,
    ) -> Result<(), PipelineError> {
        debug_assert_eq!(outcome.index, self.cursor, "commits must be in seed order");
        log::debug!(
            "seed {}: {} of {} drawn pairs came from the memory pool",
            outcome.draw.seed_id,
            outcome.draw.from_memory,
            outcome.draw.sampled.len()
        );

        if !outcome.rewards.is_empty() {
            self.matrix.apply_reward(&outcome.rewards)?;
            if self.matrix.update_count().is_multiple_of(config.trajectory_stride) {
                let labeled = self
                    .matrix
                    .free_pairs()
                    .into_iter()
                    .map(|p| (self.matrix.pair_label(p), self.matrix.prob(p)))
                    .collect::<Vec<_>>();
                self.trajectory
                    .write_step(self.matrix.update_count(), labeled.into_iter())
                    .map_err(|e| PipelineError::Io {
                        path: config.paths.trajectory.clone(),
                        detail: e.to_string(),
                    })?;
            }
        }

        if let Some(admission) = outcome.admission {
            self.bank.admit(MemoryEntry {
                embedding: admission.embedding,
                pair: admission.pair,
                score: admission.score,
                seed_id: admission.seed_id,
                admitted_at: self.matrix.update_count(),
            });
        }

        for record in &outcome.base_records {
            Self::append_jsonl(&mut self.candidate_log, record)?;
        }
        for (_, record) in &outcome.candidates {
            Self::append_jsonl(&mut self.candidate_log, record)?;
        }
        Self::append_jsonl(&mut self.output, &outcome.selection.output)?;

        self.counts.processed += 1;
        if outcome.selection.used_base_fallback {
            self.counts.base_fallbacks += 1;
        }
        self.counts.referee_parse_failures += outcome.parse_failures;
        self.counts.dropped_candidates += outcome.dropped;
        self.cursor += 1;
        Ok(())
    }

    fn flush(&mut self, config: &PipelineConfig) -> Result<FileOffsets, PipelineError> {
        self.output.flush().map_err(io_err(&config.paths.output))?;
        self.candidate_log.flush().map_err(io_err(&config.paths.candidate_log))?;
        self.trajectory.flush().map_err(io_err(&config.paths.trajectory))?;
        let len = |path: &PathBuf| -> Result<u64, PipelineError> {
            Ok(std::fs::metadata(path).map_err(io_err(path))?.len())
        };
        Ok(FileOffsets {
            output: len(&config.paths.output)?,
            candidate_log: len(&config.paths.candidate_log)?,
            trajectory: len(&config.paths.trajectory)?,
        })
    }

    fn write_checkpoint(&mut self, config: &PipelineConfig) -> Result<(), PipelineError> {
        let offsets = self.flush(config)?;
        PipelineCheckpoint {
            version: CHECKPOINT_VERSION,
            cursor: self.cursor,
            master_seed: config.master_seed,
            matrix: self.matrix.clone(),
            bank: self.bank.clone(),
            counts: self.counts.clone(),
            offsets,
        }
        .save(&config.paths.checkpoint)?;
        Ok(())
    }

    fn outcome(&self, completed: bool, total: usize, processed_this_run: u64) -> RunOutcome {
        RunOutcome {
            completed,
            cursor: self.cursor,
            total_seeds: total,
            processed_this_run,
            counts: self.counts.clone(),
        }
    }
}

/// Generate one candidate (rewrite, then respond) for a pair.
#[allow(clippy::too_many_arguments)]
fn generate_candidate(
    gateway: &Gateway,
    templates: &PromptTemplates,
    pair_label: String,
    rewriter: &AgentId,
    responder: &AgentId,
    sample: &InstructionSample,
    seed_tag: u64,
    is_base: bool,
) -> Result<CandidateRecord, GatewayError> {
    let rewritten = gateway.generate(
        rewriter,
        &Prompt::user(templates.fill_rewrite(&sample.instruction)),
        derive_seed(seed_tag, "rewrite"),
    )?;
    let rewritten = rewritten.trim().to_string();
    let response = gateway.generate(
        responder,
        &Prompt::user(templates.fill_respond(&rewritten, &sample.response)),
        derive_seed(seed_tag, "respond"),
    )?;
    Ok(CandidateRecord {
        seed_id: sample.id.clone(),
        pair: pair_label,
        instruction: rewritten,
        response: response.trim().to_string(),
        ifd_small: None,
        ifd_large: None,
        pi_dual: 0.0,
        pi_llm: 0.0,
        pi_composite: 0.0,
        is_base,
        extra: Default::default(),
    })
}

/// Process one seed sample against a consistent snapshot.
///
/// Steps, in order: embed the instruction and query the memory pool; draw
/// pairs; generate the base candidate(s) and one candidate per drawn pair;
/// score IFD under both scorers, dual scores over the batch, referee vs
/// base; compose and select; emit rewards and the winner's bank admission.
///
/// Failures of the embedder or the base generation are fatal (they signal
/// the backend is down); per-candidate failures drop the candidate with a
/// logged reason and the batch proceeds.
#[allow(clippy::too_many_arguments)]
fn process_seed(
    config: &PipelineConfig,
    matrix: &PairMatrix,
    bank: &MemoryBank,
    gateway: &Gateway,
    templates: &PromptTemplates,
    roster: &Roster,
    memory_draws: usize,
    index: usize,
    sample: &InstructionSample,
) -> Result<SeedOutcome, PipelineError> {
    let seed_base = derive_seed(config.master_seed, &format!("seed/{index}"));

    // 1. Embed the instruction, query the memory pool.
    let embedding = gateway.embed(&roster.embedder, &sample.instruction)?;
    let pool = bank.query_pool(&embedding, config.memory_query_size)?;

    // 2. Draw M pairs.
    let mut draw = matrix.sample_pairs(
        config.pairs_per_seed,
        &pool,
        memory_draws,
        derive_seed(seed_base, "draw"),
    )?;
    draw.seed_id = sample.id.clone();

    // 3. Base candidates; the first anchors every referee comparison.
    let mut base_records = Vec::with_capacity(matrix.base_pairs().len());
    for (b, &pair) in matrix.base_pairs().iter().enumerate() {
        let record = generate_candidate(
            gateway,
            templates,
            matrix.pair_label(pair),
            &roster.rewriters[pair.rewriter],
            &roster.responders[pair.responder],
            sample,
            derive_seed(seed_base, &format!("base/{b}")),
            true,
        )?;
        base_records.push(record);
    }
    let anchor = base_records.first().expect("config requires a base pair").clone();

    // 4. Candidates for the drawn pairs; failures drop the candidate.
    let mut dropped = 0u64;
    let mut candidates: Vec<(PairId, CandidateRecord)> = Vec::with_capacity(draw.sampled.len());
    let mut dropped_pairs: Vec<PairId> = Vec::new();
    for (c, &pair) in draw.sampled.iter().enumerate() {
        match generate_candidate(
            gateway,
            templates,
            matrix.pair_label(pair),
            &roster.rewriters[pair.rewriter],
            &roster.responders[pair.responder],
            sample,
            derive_seed(seed_base, &format!("cand/{c}")),
            false,
        ) {
            Ok(record) => candidates.push((pair, record)),
            Err(err) => {
                log::warn!("seed {}: dropping candidate {}: {err}", sample.id, matrix.pair_label(pair));
                dropped += 1;
                dropped_pairs.push(pair);
            }
        }
    }

    // 5. IFD under both scorers; scoring failures drop the candidate.
    let mut scored: Vec<(PairId, CandidateRecord)> = Vec::with_capacity(candidates.len());
    for (pair, mut record) in candidates {
        let ifd = compute_ifd(gateway, &roster.scorer_small, &record.instruction, &record.response)
            .and_then(|small| {
                compute_ifd(gateway, &roster.scorer_large, &record.instruction, &record.response)
                    .map(|large| (small, large))
            });
        match ifd {
            Ok((small, large)) if small.is_finite() && large.is_finite() => {
                record.ifd_small = Some(small);
                record.ifd_large = Some(large);
                scored.push((pair, record));
            }
            Ok((small, large)) => {
                log::warn!(
                    "seed {}: dropping candidate {}: non-finite IFD ({small}, {large})",
                    sample.id,
                    record.pair
                );
                dropped += 1;
                dropped_pairs.push(pair);
            }
            Err(err) => {
                log::warn!("seed {}: dropping candidate {}: {err}", sample.id, record.pair);
                dropped += 1;
                dropped_pairs.push(pair);
            }
        }
    }

    // 6. Dual-model scores over the surviving batch.
    if !scored.is_empty() {
        let ifds: Vec<(f64, f64)> = scored
            .iter()
            .map(|(_, r)| (r.ifd_small.unwrap(), r.ifd_large.unwrap()))
            .collect();
        let batch = compute_dual_scores(&sample.id, &ifds).map_err(PipelineError::Scoring)?;
        for ((_, record), pi_dual) in scored.iter_mut().zip(&batch.pi_dual) {
            record.pi_dual = *pi_dual;
        }
    }

    // 7. Referee each survivor against the base answer.
    let referee = Referee::new(
        gateway,
        &roster.referee,
        &templates.referee_system,
        &templates.referee_user,
    );
    let mut parse_failures = 0u64;
    let mut judged: Vec<(PairId, CandidateRecord)> = Vec::with_capacity(scored.len());
    for (c, (pair, mut record)) in scored.into_iter().enumerate() {
        let question = match config.referee_question_source {
            RefereeQuestionSource::Candidate => record.instruction.as_str(),
            RefereeQuestionSource::Base => anchor.instruction.as_str(),
        };
        match referee.compare(
            question,
            &anchor.response,
            &record.response,
            derive_seed(seed_base, &format!("referee/{c}")),
        ) {
            Ok(outcome) => {
                record.pi_llm = outcome.pi_llm;
                if outcome.parse_fallback {
                    parse_failures += 1;
                }
                judged.push((pair, record));
            }
            Err(err) => {
                log::warn!("seed {}: dropping candidate {}: {err}", sample.id, record.pair);
                dropped += 1;
                dropped_pairs.push(pair);
            }
        }
    }

    // 8. Compose and select.
    let mut batch: Vec<CandidateRecord> = judged.iter().map(|(_, r)| r.clone()).collect();
    let mut selection = compose_and_select(&mut batch, &anchor);
    selection.output.extra = sample.extra.clone();
    for ((_, record), composed) in judged.iter_mut().zip(&batch) {
        record.pi_composite = composed.pi_composite;
    }
    if selection.empty_batch {
        log::warn!("seed {}: every candidate failed; keeping the base sample", sample.id);
    }

    // 9. Rewards. Dropped pairs were sampled but produced nothing: zero.
    let rewards: Vec<(PairId, f64)> = if judged.is_empty() && dropped_pairs.is_empty() {
        Vec::new()
    } else {
        match config.reward_mode {
            RewardMode::All => judged
                .iter()
                .map(|(pair, record)| (*pair, record.pi_composite))
                .chain(dropped_pairs.iter().map(|&pair| (pair, 0.0)))
                .collect(),
            RewardMode::Winner => selection
                .winner_index
                .map(|w| vec![(judged[w].0, judged[w].1.pi_composite)])
                .unwrap_or_default(),
        }
    };

    // 10. Winner's admission offer (threshold applied by the bank).
    let admission = selection.winner_index.map(|w| AdmissionProto {
        embedding: embedding.clone(),
        pair: judged[w].0,
        score: judged[w].1.pi_composite,
        seed_id: sample.id.clone(),
    });

    Ok(SeedOutcome {
        index,
        draw,
        base_records,
        candidates: judged,
        selection,
        rewards,
        admission,
        parse_failures,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedded_templates_carry_their_slots() {
        let templates = PromptTemplates::embedded_defaults();
        assert!(templates.rewrite.contains("{instruction}"));
        assert!(templates.respond.contains("{instruction}"));
        assert!(templates.respond.contains("{reference_response}"));
        for slot in ["<question>", "<answer_a>", "<answer_b>"] {
            assert!(templates.referee_user.contains(slot), "missing {slot}");
        }
        // The judge prompt's verdict-format sentence is the contract the
        // parser relies on.
        for marker in ["[[A]]", "[[B]]", "[[C]]"] {
            assert!(templates.referee_system.contains(marker));
        }
        assert!(templates.referee_user.trim_end().ends_with("[Final Verdict]:"));
    }

    #[test]
    fn template_fill_replaces_every_slot() {
        let templates = PromptTemplates::embedded_defaults();
        let rewrite = templates.fill_rewrite("describe a lake");
        assert!(rewrite.contains("describe a lake"));
        assert!(!rewrite.contains("{instruction}"));
        let respond = templates.fill_respond("describe a lake", "a lake is water");
        assert!(respond.contains("describe a lake"));
        assert!(respond.contains("a lake is water"));
        assert!(!respond.contains("{reference_response}"));
    }
}
