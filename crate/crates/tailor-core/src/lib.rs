//! Optimizes an instruction-tuning seed dataset by generating candidate
//! rewrites through sampled pairs of language-model agents, scoring them
//! with a dual-model difficulty metric plus a referee model, selecting the
//! best candidate per seed sample, and evolving the pair sampling
//! distribution online.
//!
//! The crate is organized around the pipeline's moving parts:
//!
//! * [`dataset`] — instruction data types and JSONL I/O
//! * [`gateway`] — model access (generation, logprobs, embeddings) over
//!   HTTP or a deterministic mock
//! * [`scoring`] — IFD, dual-model scores, referee protocol, selection
//! * [`evolution`] — the pair sampling distribution and its update rule
//! * [`memory`] — the instruction memory bank
//! * [`pipeline`] — the end-to-end loop with checkpointing and workers
//! * [`sim`] — synthetic-agent simulations of the evolution dynamics
//! * [`cost`] — inference cost estimation

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod dataset;
pub mod evolution;
pub mod gateway;
pub mod hashing;
pub mod memory;
pub mod pipeline;
pub mod scoring;
pub mod sim;

pub use checkpoint::{PipelineCheckpoint, RunCounts};
pub use config::{PipelineConfig, RefereeQuestionSource, RewardMode};
pub use dataset::{CandidateRecord, InstructionSample, OutputRecord};
pub use evolution::{PairDraw, PairId, PairMatrix};
pub use gateway::{AgentId, BackendKind, Gateway, Prompt, Role, TokenLogprobs};
pub use memory::{MemoryBank, MemoryEntry};
pub use pipeline::{run_pipeline, run_pipeline_with, PipelineError, PromptTemplates, RunOptions, RunOutcome};
pub use scoring::{DualModelScoreBatch, Verdict, VerdictKind};
pub use sim::{SimConfig, SyntheticPairProfile, Trajectory};
