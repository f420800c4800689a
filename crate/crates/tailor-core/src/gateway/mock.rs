//! Deterministic mock backend.
//!
//! Every operation is a pure function of its declared inputs, so pipeline
//! runs with the mock backend and a fixed seed are bit-identical end to
//! end. The exact recipes (all hashes are [`stable_hash64`] over
//! length-prefixed parts, see `hashing`):
//!
//! * generation — `h = H("mock/generate", agent.name, system, user, seed_le)`.
//!   Rewriters emit `rewrite:<hex16(h)>`, responders `response:<hex16(h)>`,
//!   each followed by hash-picked filler words. Referees emit a short
//!   sentence ending in `[[A]]`, `[[B]]` or `[[C]]` picked by
//!   `H("mock/verdict", agent.name, system, user, seed_le) % 3` unless a
//!   forced verdict is configured.
//! * logprobs — tokens are the whitespace split of the continuation; each
//!   token's logprob is drawn from `H("mock/logprob", agent.model, token,
//!   ctx_flag)` mapped into `[low, high]`, where `ctx_flag` is `"1"` when a
//!   context is present and `"0"` otherwise. Only the presence flag enters
//!   the hash, never the context text.
//! * embeddings — component `i` is the mean over tokens of
//!   `H("mock/embed", agent.model, token, i_le)` mapped into `[-1, 1)`.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Mutex;

use super::{AgentId, Backend, GatewayError, Prompt, Role, TokenLogprobs};
use crate::hashing::{hex16, stable_hash64, unit_f64};

const VOCAB: [&str; 32] = [
    "alpha", "array", "basis", "batch", "cache", "chart", "cycle", "delta", "digit", "draft",
    "entry", "field", "frame", "graph", "index", "input", "layer", "logic", "merge", "model",
    "node", "order", "point", "query", "range", "scale", "shape", "stack", "table", "token",
    "trace", "value",
];

/// Knobs for the mock backend. All default to the hash-based behavior.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockSettings {
    /// When set, every logprob equals this value (must be <= 0).
    #[serde(default)]
    pub uniform_logprob: Option<f64>,
    /// When set to "A", "B" or "C", every referee completion carries this
    /// verdict instead of a hash-picked one.
    #[serde(default)]
    pub forced_verdict: Option<String>,
}

/// Hash-seeded deterministic backend; see the module docs for the recipes.
pub struct MockBackend {
    settings: MockSettings,
    embedding_dim: usize,
    logprob_low: f64,
    logprob_high: f64,
}

impl MockBackend {
    pub fn new(settings: MockSettings) -> Self {
        MockBackend { settings, embedding_dim: 8, logprob_low: -4.0, logprob_high: -0.1 }
    }

    pub fn with_embedding_dim(mut self, dim: usize) -> Self {
        self.embedding_dim = dim.max(1);
        self
    }

    fn generation_hash(agent: &AgentId, prompt: &Prompt, seed: u64) -> u64 {
        stable_hash64(&[
            b"mock/generate",
            agent.name.as_bytes(),
            prompt.system.as_deref().unwrap_or("").as_bytes(),
            prompt.user.as_bytes(),
            &seed.to_le_bytes(),
        ])
    }

    fn filler_words(agent: &AgentId, prompt: &Prompt, seed: u64) -> String {
        let base = stable_hash64(&[
            b"mock/words",
            agent.name.as_bytes(),
            prompt.user.as_bytes(),
            &seed.to_le_bytes(),
        ]);
        let count = 6 + (base % 7) as usize;
        let mut words = Vec::with_capacity(count);
        for i in 0..count {
            let h = stable_hash64(&[b"mock/word", &base.to_le_bytes(), &(i as u64).to_le_bytes()]);
            words.push(VOCAB[(h % VOCAB.len() as u64) as usize]);
        }
        words.join(" ")
    }

    fn verdict_letter(&self, agent: &AgentId, prompt: &Prompt, seed: u64) -> &'static str {
        if let Some(forced) = &self.settings.forced_verdict {
            return match forced.as_str() {
                "A" | "a" => "A",
                "B" | "b" => "B",
                _ => "C",
            };
        }
        let h = stable_hash64(&[
            b"mock/verdict",
            agent.name.as_bytes(),
            prompt.system.as_deref().unwrap_or("").as_bytes(),
            prompt.user.as_bytes(),
            &seed.to_le_bytes(),
        ]);
        ["A", "B", "C"][(h % 3) as usize]
    }
}

impl Backend for MockBackend {
    fn generate(&self, agent: &AgentId, prompt: &Prompt, seed: u64) -> Result<String, GatewayError> {
        let h16 = hex16(Self::generation_hash(agent, prompt, seed));
        let text = match agent.role {
            Role::InstructionRewriter => {
                format!("rewrite:{h16} {}", Self::filler_words(agent, prompt, seed))
            }
            Role::ResponseGenerator => {
                format!("response:{h16} {}", Self::filler_words(agent, prompt, seed))
            }
            Role::Referee => format!(
                "Compared both answers on helpfulness and accuracy. Final verdict: [[{}]]",
                self.verdict_letter(agent, prompt, seed)
            ),
            other => {
                return Err(GatewayError::RoleMismatch {
                    agent: agent.name.clone(),
                    actual: other.as_str(),
                    required: "a generation role",
                })
            }
        };
        Ok(text)
    }

    fn score_logprobs(
        &self,
        agent: &AgentId,
        context: Option<&str>,
        continuation: &str,
    ) -> Result<TokenLogprobs, GatewayError> {
        let tokens: Vec<String> =
            continuation.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(GatewayError::Precondition("continuation has zero tokens".into()));
        }
        let ctx_flag: &[u8] = if context.is_some() { b"1" } else { b"0" };
        let logprobs = tokens
            .iter()
            .map(|token| match self.settings.uniform_logprob {
                Some(lp) => lp.min(0.0),
                None => {
                    let h = stable_hash64(&[
                        b"mock/logprob",
                        agent.model.as_bytes(),
                        token.as_bytes(),
                        ctx_flag,
                    ]);
                    self.logprob_low + (self.logprob_high - self.logprob_low) * unit_f64(h)
                }
            })
            .collect();
        Ok(TokenLogprobs { tokens, logprobs })
    }

    fn embed(&self, agent: &AgentId, text: &str) -> Result<Vec<f64>, GatewayError> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(GatewayError::Precondition("text to embed has zero tokens".into()));
        }
        let mut vector = vec![0.0; self.embedding_dim];
        for (i, slot) in vector.iter_mut().enumerate() {
            let mut acc = 0.0;
            for token in &tokens {
                let h = stable_hash64(&[
                    b"mock/embed",
                    agent.model.as_bytes(),
                    token.as_bytes(),
                    &(i as u64).to_le_bytes(),
                ]);
                acc += unit_f64(h) * 2.0 - 1.0;
            }
            *slot = acc / tokens.len() as f64;
        }
        Ok(vector)
    }
}

type GenerateKey = (String, String);

/// Test fixture backend: scripted responses with mock fallback.
///
/// * `generate` pops from a per-(agent, user-prompt) queue, then falls back
///   to a global per-agent queue, then to the mock recipe.
/// * `score_logprobs` looks up `(model, context-present, continuation)`;
///   unscripted spans fall back to the mock recipe.
/// * `embed` always uses the mock recipe.
pub struct ScriptedBackend {
    fallback: MockBackend,
    generations: Mutex<HashMap<GenerateKey, Vec<String>>>,
    agent_queues: Mutex<HashMap<String, Vec<String>>>,
    logprobs: Mutex<HashMap<(String, bool, String), Vec<f64>>>,
    errors: Mutex<HashMap<String, u32>>,
}

impl Default for ScriptedBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl ScriptedBackend {
    pub fn new() -> Self {
        ScriptedBackend {
            fallback: MockBackend::new(MockSettings::default()),
            generations: Mutex::new(HashMap::new()),
            agent_queues: Mutex::new(HashMap::new()),
            logprobs: Mutex::new(HashMap::new()),
            errors: Mutex::new(HashMap::new()),
        }
    }

    /// Queue a completion for an exact (agent name, user prompt) pair.
    pub fn push_generation(&self, agent: &str, user_prompt: &str, completion: &str) {
        self.generations
            .lock()
            .unwrap()
            .entry((agent.to_string(), user_prompt.to_string()))
            .or_default()
            .insert(0, completion.to_string());
    }

    /// Queue a completion for any prompt sent to `agent` (FIFO).
    pub fn push_agent_completion(&self, agent: &str, completion: &str) {
        self.agent_queues
            .lock()
            .unwrap()
            .entry(agent.to_string())
            .or_default()
            .insert(0, completion.to_string());
    }

    /// Fix the logprobs returned for a continuation under one model.
    pub fn set_logprobs(&self, model: &str, with_context: bool, continuation: &str, lps: &[f64]) {
        self.logprobs
            .lock()
            .unwrap()
            .insert((model.to_string(), with_context, continuation.to_string()), lps.to_vec());
    }

    /// Make the next `n` generate calls to `agent` fail with a transport error.
    pub fn fail_next_generations(&self, agent: &str, n: u32) {
        self.errors.lock().unwrap().insert(agent.to_string(), n);
    }
}

impl Backend for ScriptedBackend {
    fn generate(&self, agent: &AgentId, prompt: &Prompt, seed: u64) -> Result<String, GatewayError> {
        if let Some(n) = self.errors.lock().unwrap().get_mut(&agent.name) {
            if *n > 0 {
                *n -= 1;
                return Err(GatewayError::Transport {
                    agent: agent.name.clone(),
                    detail: "scripted failure".into(),
                });
            }
        }
        let key = (agent.name.clone(), prompt.user.clone());
        if let Some(text) = self.generations.lock().unwrap().get_mut(&key).and_then(Vec::pop) {
            return Ok(text);
        }
        if let Some(text) =
            self.agent_queues.lock().unwrap().get_mut(&agent.name).and_then(Vec::pop)
        {
            return Ok(text);
        }
        self.fallback.generate(agent, prompt, seed)
    }

    fn score_logprobs(
        &self,
        agent: &AgentId,
        context: Option<&str>,
        continuation: &str,
    ) -> Result<TokenLogprobs, GatewayError> {
        let key = (agent.model.clone(), context.is_some(), continuation.to_string());
        if let Some(lps) = self.logprobs.lock().unwrap().get(&key) {
            let tokens: Vec<String> =
                continuation.split_whitespace().map(str::to_string).collect();
            if tokens.len() != lps.len() {
                return Err(GatewayError::Integrity {
                    agent: agent.name.clone(),
                    detail: format!(
                        "scripted logprobs ({}) do not match token count ({})",
                        lps.len(),
                        tokens.len()
                    ),
                });
            }
            return Ok(TokenLogprobs { tokens, logprobs: lps.clone() });
        }
        self.fallback.score_logprobs(agent, context, continuation)
    }

    fn embed(&self, agent: &AgentId, text: &str) -> Result<Vec<f64>, GatewayError> {
        self.fallback.embed(agent, text)
    }
}
