//! Pipeline configuration: TOML schema, validation and override layering.
//!
//! Precedence is config file < environment < command-line overrides. Only
//! the keys in [`OVERRIDE_KEYS`] may be overridden; the agent roster and
//! base-pair list always come from the file.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evolution::PairId;
use crate::gateway::{AgentId, HttpSettings, MockSettings, Role};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {detail}")]
    Read { path: PathBuf, detail: String },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
    #[error("unknown override key `{0}` (see --help for the list)")]
    UnknownKey(String),
    #[error("override `{key}`: {detail}")]
    BadOverride { key: String, detail: String },
}

/// Environment variable prefix for overrides: `TAILOR_GATEWAY__RETRIES=5`
/// overrides `gateway.retries`.
pub const ENV_PREFIX: &str = "TAILOR_";

/// Overridable config keys. Dots separate sections; environment variables
/// replace dots with double underscores and upper-case the rest.
pub const OVERRIDE_KEYS: &[(&str, &str)] = &[
    ("master_seed", "master RNG seed for the whole run"),
    ("pairs_per_seed", "pairs drawn per seed sample (M)"),
    ("memory_draws", "pairs drawn from the memory pool (l)"),
    ("memory_query_size", "memory-bank neighbors per query (n)"),
    ("evolution_rate", "probability update step (beta)"),
    ("admission_threshold", "memory-bank admission threshold (tau)"),
    ("bank_capacity", "memory-bank capacity (C)"),
    ("workers", "concurrent seed workers (W)"),
    ("embedding_dim", "embedding dimension (d)"),
    ("reward_mode", "`all` rewards every sampled pair, `winner` only the winner"),
    ("referee_question_source", "judge question: `candidate` or `base` instruction"),
    ("checkpoint_every", "seeds between checkpoints"),
    ("trajectory_stride", "updates between trajectory rows"),
    ("paths.seed_dataset", "input seed dataset (JSONL)"),
    ("paths.output", "tailored output dataset (JSONL)"),
    ("paths.candidate_log", "per-candidate audit log (JSONL)"),
    ("paths.checkpoint", "resumable pipeline state (JSON)"),
    ("paths.trajectory", "probability trajectory (CSV)"),
    ("paths.replay_log", "optional gateway replay log (JSONL)"),
    ("max_in_flight", "max concurrent calls per backend"),
    ("gateway.retries", "HTTP retries after the first attempt"),
    ("gateway.backoff_ms", "first retry backoff in milliseconds"),
    ("gateway.request_timeout_ms", "per-request timeout in milliseconds"),
    ("gateway.auth_env", "environment variable holding the bearer token"),
    ("gateway.unconditioned_prefix", "prefix for context-free scoring calls"),
    ("templates.rewrite", "instruction-rewrite template path"),
    ("templates.respond", "response template path"),
    ("templates.referee_system", "judge system prompt path"),
    ("templates.referee_user", "judge user template path"),
    ("mock.uniform_logprob", "mock scorers return exactly this logprob"),
    ("mock.forced_verdict", "mock referee always answers A, B or C"),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub name: String,
    pub role: Role,
    pub backend: crate::gateway::BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    pub model: String,
}

impl AgentConfig {
    pub fn to_agent_id(&self) -> AgentId {
        AgentId {
            name: self.name.clone(),
            role: self.role,
            backend: self.backend,
            endpoint: self.endpoint.clone(),
            model: self.model.clone(),
        }
    }
}

/// A base pair referenced by agent names.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasePairConfig {
    pub instruction: String,
    pub response: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub seed_dataset: PathBuf,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default = "default_candidate_log")]
    pub candidate_log: PathBuf,
    #[serde(default = "default_checkpoint")]
    pub checkpoint: PathBuf,
    #[serde(default = "default_trajectory")]
    pub trajectory: PathBuf,
    #[serde(default)]
    pub replay_log: Option<PathBuf>,
}

fn default_output() -> PathBuf {
    "tailored.jsonl".into()
}

fn default_candidate_log() -> PathBuf {
    "candidates.jsonl".into()
}

fn default_checkpoint() -> PathBuf {
    "checkpoint.json".into()
}

fn default_trajectory() -> PathBuf {
    "trajectory.csv".into()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplatePaths {
    #[serde(default)]
    pub rewrite: Option<PathBuf>,
    #[serde(default)]
    pub respond: Option<PathBuf>,
    #[serde(default)]
    pub referee_system: Option<PathBuf>,
    #[serde(default)]
    pub referee_user: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Every sampled pair is rewarded with its own candidate's composite.
    All,
    /// Only the winning pair is rewarded.
    Winner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefereeQuestionSource {
    /// Show the judge the candidate's rewritten instruction (default).
    Candidate,
    /// Show the judge the base candidate's instruction.
    Base,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub master_seed: u64,
    /// M: pairs drawn per seed sample.
    #[serde(default = "default_pairs_per_seed")]
    pub pairs_per_seed: usize,
    /// l: draws taken from the memory pool; defaults to min(n, M/2).
    #[serde(default)]
    pub memory_draws: Option<usize>,
    /// n: neighbors per memory query.
    #[serde(default = "default_memory_query_size")]
    pub memory_query_size: usize,
    /// beta: evolution rate.
    #[serde(default = "default_evolution_rate")]
    pub evolution_rate: f64,
    /// tau: memory-bank admission threshold.
    #[serde(default = "default_admission_threshold")]
    pub admission_threshold: f64,
    #[serde(default = "default_bank_capacity")]
    pub bank_capacity: usize,
    /// W: concurrent seed workers.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_reward_mode")]
    pub reward_mode: RewardMode,
    #[serde(default = "default_question_source")]
    pub referee_question_source: RefereeQuestionSource,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default = "default_trajectory_stride")]
    pub trajectory_stride: u64,
    pub agents: Vec<AgentConfig>,
    pub base_pairs: Vec<BasePairConfig>,
    pub paths: PathsConfig,
    #[serde(default)]
    pub gateway: HttpSettings,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub templates: TemplatePaths,
    #[serde(default)]
    pub mock: MockSettings,
}

fn default_pairs_per_seed() -> usize {
    10
}

fn default_memory_query_size() -> usize {
    5
}

fn default_evolution_rate() -> f64 {
    0.05
}

fn default_admission_threshold() -> f64 {
    0.5
}

fn default_bank_capacity() -> usize {
    10_000
}

fn default_workers() -> usize {
    1
}

fn default_embedding_dim() -> usize {
    8
}

fn default_reward_mode() -> RewardMode {
    RewardMode::All
}

fn default_question_source() -> RefereeQuestionSource {
    RefereeQuestionSource::Candidate
}

fn default_checkpoint_every() -> usize {
    25
}

fn default_trajectory_stride() -> u64 {
    1
}

fn default_max_in_flight() -> usize {
    16
}

impl PipelineConfig {
    /// Load a config file and apply environment then explicit overrides.
    pub fn load(
        path: &Path,
        overrides: &[(String, String)],
    ) -> Result<PipelineConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let mut value: toml::Value =
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (key, raw) in env_overrides() {
            apply_override(&mut value, &key, &raw)?;
        }
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        let config: PipelineConfig =
            value.try_into().map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Effective l: explicit value or min(n, M/2).
    pub fn resolved_memory_draws(&self) -> usize {
        self.memory_draws
            .unwrap_or_else(|| self.memory_query_size.min(self.pairs_per_seed / 2))
    }

    pub fn agents_with_role(&self, role: Role) -> Vec<&AgentConfig> {
        self.agents.iter().filter(|a| a.role == role).collect()
    }

    fn singleton(&self, role: Role) -> Result<&AgentConfig, ConfigError> {
        let found = self.agents_with_role(role);
        match found.len() {
            1 => Ok(found[0]),
            0 => Err(ConfigError::Invalid(format!(
                "agents: exactly one `{}` agent is required, found none",
                role.as_str()
            ))),
            n => Err(ConfigError::Invalid(format!(
                "agents: exactly one `{}` agent is required, found {n}",
                role.as_str()
            ))),
        }
    }

    pub fn referee(&self) -> Result<AgentId, ConfigError> {
        self.singleton(Role::Referee).map(AgentConfig::to_agent_id)
    }

    pub fn scorer_small(&self) -> Result<AgentId, ConfigError> {
        self.singleton(Role::ScorerSmall).map(AgentConfig::to_agent_id)
    }

    pub fn scorer_large(&self) -> Result<AgentId, ConfigError> {
        self.singleton(Role::ScorerLarge).map(AgentConfig::to_agent_id)
    }

    pub fn embedder(&self) -> Result<AgentId, ConfigError> {
        self.singleton(Role::Embedder).map(AgentConfig::to_agent_id)
    }

    pub fn rewriter_names(&self) -> Vec<String> {
        self.agents_with_role(Role::InstructionRewriter)
            .iter()
            .map(|a| a.name.clone())
            .collect()
    }

    pub fn responder_names(&self) -> Vec<String> {
        self.agents_with_role(Role::ResponseGenerator)
            .iter()
            .map(|a| a.name.clone())
            .collect()
    }

    /// Base pairs as matrix indices.
    pub fn base_pair_ids(&self) -> Result<Vec<PairId>, ConfigError> {
        let rewriters = self.rewriter_names();
        let responders = self.responder_names();
        self.base_pairs
            .iter()
            .map(|bp| {
                let rewriter = rewriters.iter().position(|n| *n == bp.instruction).ok_or_else(
                    || {
                        ConfigError::Invalid(format!(
                            "base_pairs: `{}` is not an instruction_rewriter agent",
                            bp.instruction
                        ))
                    },
                )?;
                let responder =
                    responders.iter().position(|n| *n == bp.response).ok_or_else(|| {
                        ConfigError::Invalid(format!(
                            "base_pairs: `{}` is not a response_generator agent",
                            bp.response
                        ))
                    })?;
                Ok(PairId::new(rewriter, responder))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));

        if self.pairs_per_seed == 0 {
            return fail("pairs_per_seed must be >= 1".into());
        }
        if self.workers == 0 {
            return fail("workers must be >= 1".into());
        }
        if self.memory_query_size == 0 {
            return fail("memory_query_size must be >= 1".into());
        }
        if self.evolution_rate.is_nan() || self.evolution_rate < 0.0 {
            return fail("evolution_rate must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.admission_threshold) {
            return fail("admission_threshold must be in [0, 1]".into());
        }
        if self.bank_capacity == 0 {
            return fail("bank_capacity must be >= 1".into());
        }
        if self.embedding_dim == 0 {
            return fail("embedding_dim must be >= 1".into());
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be >= 1".into());
        }
        if self.trajectory_stride == 0 {
            return fail("trajectory_stride must be >= 1".into());
        }
        if let Some(l) = self.memory_draws {
            if l > self.pairs_per_seed {
                return fail(format!(
                    "memory_draws ({l}) must not exceed pairs_per_seed ({})",
                    self.pairs_per_seed
                ));
            }
        }

        let mut names = HashSet::new();
        for agent in &self.agents {
            if agent.name.is_empty() {
                return fail("agents: empty agent name".into());
            }
            if agent.name.contains(':') {
                return fail(format!(
                    "agents: name `{}` must not contain `:` (reserved for pair labels)",
                    agent.name
                ));
            }
            if !names.insert(agent.name.as_str()) {
                return fail(format!("agents: duplicate agent name `{}`", agent.name));
            }
            if agent.backend == crate::gateway::BackendKind::Http && agent.endpoint.is_none() {
                return fail(format!("agents: http agent `{}` needs an endpoint", agent.name));
            }
        }

        if self.rewriter_names().is_empty() {
            return fail("agents: at least one instruction_rewriter is required".into());
        }
        if self.responder_names().is_empty() {
            return fail("agents: at least one response_generator is required".into());
        }
        let small = self.scorer_small()?;
        let large = self.scorer_large()?;
        if small.model == large.model {
            return fail(format!(
                "agents: scorer_small and scorer_large must be distinct models, both are `{}`",
                small.model
            ));
        }
        self.referee()?;
        self.embedder()?;

        if self.base_pairs.is_empty() {
            return fail("base_pairs: at least one base pair is required".into());
        }
        let base_ids = self.base_pair_ids()?;
        let mut seen = HashSet::new();
        for id in &base_ids {
            if !seen.insert(*id) {
                return fail("base_pairs: duplicate base pair".into());
            }
        }
        let cells = self.rewriter_names().len() * self.responder_names().len();
        let free = cells - base_ids.len();
        if free == 0 {
            return fail("base_pairs: every pair is a base pair; nothing to sample".into());
        }
        if self.pairs_per_seed > free {
            return fail(format!(
                "pairs_per_seed ({}) exceeds the {free} non-base pairs",
                self.pairs_per_seed
            ));
        }
        if let Some(verdict) = &self.mock.forced_verdict {
            if !matches!(verdict.as_str(), "A" | "a" | "B" | "b" | "C" | "c") {
                return fail(format!("mock.forced_verdict must be A, B or C, got `{verdict}`"));
            }
        }
        if let Some(lp) = self.mock.uniform_logprob {
            if lp > 0.0 {
                return fail(format!("mock.uniform_logprob must be <= 0, got {lp}"));
            }
        }
        Ok(())
    }

    /// Rebase all output artifacts (not the seed dataset) under `dir`.
    pub fn rebase_outputs(&mut self, dir: &Path) {
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        rebase(&mut self.paths.output);
        rebase(&mut self.paths.candidate_log);
        rebase(&mut self.paths.checkpoint);
        rebase(&mut self.paths.trajectory);
        if let Some(replay) = &mut self.paths.replay_log {
            rebase(replay);
        }
    }
}

/// Collect `TAILOR_*` environment overrides for known keys.
pub fn env_overrides() -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (key, _) in OVERRIDE_KEYS {
        let var = format!("{ENV_PREFIX}{}", key.replace('.', "__").to_uppercase());
        if let Ok(value) = std::env::var(&var) {
            out.push((key.to_string(), value));
        }
    }
    out
}

/// Apply one `key=value` override onto the parsed TOML tree.
pub fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<(), ConfigError> {
    if !OVERRIDE_KEYS.iter().any(|(k, _)| *k == key) {
        return Err(ConfigError::UnknownKey(key.to_string()));
    }
    let parsed: toml::Value = match raw.parse::<i64>() {
        Ok(i) => toml::Value::Integer(i),
        Err(_) => match raw.parse::<f64>() {
            Ok(f) => toml::Value::Float(f),
            Err(_) => match raw {
                "true" => toml::Value::Boolean(true),
                "false" => toml::Value::Boolean(false),
                other => toml::Value::String(other.to_string()),
            },
        },
    };
    let mut node = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let table = node.as_table_mut().ok_or_else(|| ConfigError::BadOverride {
            key: key.to_string(),
            detail: format!("`{part}` is not a table"),
        })?;
        if parts.peek().is_none() {
            table.insert(part.to_string(), parsed);
            break;
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Ok(())
}
