//! Uniform access to three model capabilities — text generation, token-level
//! logprob scoring, and text embedding — over a wire backend and a
//! deterministic mock backend.
//!
//! Every operation goes through [`Gateway`], which checks role
//! preconditions, enforces a per-backend in-flight cap, validates results
//! and optionally records request/response pairs to a replay log.

mod http;
mod mock;
mod replay;

pub use http::{HttpBackend, HttpSettings};
pub use mock::{MockBackend, MockSettings, ScriptedBackend};
pub use replay::{ReplayBackend, ReplayLogger};

use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// What a configured agent is for. Exactly one role per agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    InstructionRewriter,
    ResponseGenerator,
    Referee,
    ScorerSmall,
    ScorerLarge,
    Embedder,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::InstructionRewriter => "instruction_rewriter",
            Role::ResponseGenerator => "response_generator",
            Role::Referee => "referee",
            Role::ScorerSmall => "scorer_small",
            Role::ScorerLarge => "scorer_large",
            Role::Embedder => "embedder",
        }
    }
}

/// Which backend serves an agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
}

/// A configured model agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentId {
    pub name: String,
    pub role: Role,
    pub backend: BackendKind,
    /// Base URL, e.g. `http://host:8000/v1`. Required for HTTP agents.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub model: String,
}

/// A generation prompt. `system` is optional; chat backends map it to a
/// system message, the mock backend hashes it together with `user`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    pub user: String,
}

impl Prompt {
    pub fn user(text: impl Into<String>) -> Self {
        Prompt { system: None, user: text.into() }
    }

    pub fn with_system(system: impl Into<String>, user: impl Into<String>) -> Self {
        Prompt { system: Some(system.into()), user: user.into() }
    }
}

/// Token-level natural-log probabilities for one scored span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprobs {
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
}

impl TokenLogprobs {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mean_logprob(&self) -> f64 {
        self.logprobs.iter().sum::<f64>() / self.logprobs.len() as f64
    }

    fn validate(&self, agent: &str) -> Result<(), GatewayError> {
        if self.tokens.is_empty() || self.tokens.len() != self.logprobs.len() {
            return Err(GatewayError::Integrity {
                agent: agent.into(),
                detail: format!(
                    "token/logprob length mismatch: {} vs {}",
                    self.tokens.len(),
                    self.logprobs.len()
                ),
            });
        }
        if let Some(bad) = self.logprobs.iter().find(|lp| !lp.is_finite() || **lp > 0.0) {
            return Err(GatewayError::Integrity {
                agent: agent.into(),
                detail: format!("logprob {bad} is not a finite value <= 0"),
            });
        }
        Ok(())
    }
}

/// Gateway and backend errors.
#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("agent `{agent}` has role {actual}, operation requires {required}")]
    RoleMismatch { agent: String, actual: &'static str, required: &'static str },
    /// Retryable: connection refused, timeouts, malformed transport.
    #[error("transport error calling `{agent}`: {detail}")]
    Transport { agent: String, detail: String },
    /// Permanent HTTP failure (4xx other than 429).
    #[error("HTTP {status} from `{agent}`: {detail}")]
    HttpStatus { agent: String, status: u16, detail: String },
    #[error("giving up on `{agent}` after {attempts} attempts: {detail}")]
    RetriesExhausted { agent: String, attempts: u32, detail: String },
    #[error("empty completion from `{agent}`")]
    EmptyCompletion { agent: String },
    #[error("backend for `{agent}` does not support {capability}")]
    Capability { agent: String, capability: &'static str },
    #[error("integrity error from `{agent}`: {detail}")]
    Integrity { agent: String, detail: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("no backend configured for {0:?}")]
    NoBackend(BackendKind),
    #[error("replay log: {0}")]
    Replay(String),
}

impl GatewayError {
    /// Whether a retry could plausibly succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport { .. } => true,
            GatewayError::HttpStatus { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

/// A model backend. Implementations must be pure functions of their
/// declared inputs when they claim determinism (the mock backend does).
pub trait Backend: Send + Sync {
    fn generate(&self, agent: &AgentId, prompt: &Prompt, seed: u64) -> Result<String, GatewayError>;

    fn score_logprobs(
        &self,
        agent: &AgentId,
        context: Option<&str>,
        continuation: &str,
    ) -> Result<TokenLogprobs, GatewayError>;

    fn embed(&self, agent: &AgentId, text: &str) -> Result<Vec<f64>, GatewayError>;
}

/// Counting semaphore for the per-backend in-flight cap.
struct InFlight {
    available: Mutex<usize>,
    cv: Condvar,
}

impl InFlight {
    fn new(cap: usize) -> Self {
        InFlight { available: Mutex::new(cap.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.cv.wait(n).unwrap();
        }
        *n -= 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.available.lock().unwrap();
        *n += 1;
        self.0.cv.notify_one();
    }
}

/// Gateway configuration independent of any single agent.
#[derive(Debug, Clone)]
pub struct GatewayOptions {
    /// Expected embedding dimension; `embed` results are checked against it.
    pub embedding_dim: usize,
    /// Max concurrent calls per backend.
    pub max_in_flight: usize,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        GatewayOptions { embedding_dim: 8, max_in_flight: 16 }
    }
}

/// Front door for all model calls.
pub struct Gateway {
    mock: Box<dyn Backend>,
    http: Option<Box<dyn Backend>>,
    options: GatewayOptions,
    mock_cap: InFlight,
    http_cap: InFlight,
    replay: Option<ReplayLogger>,
}

impl Gateway {
    /// Gateway with the default deterministic mock and no HTTP backend.
    pub fn mock_only(settings: MockSettings, options: GatewayOptions) -> Self {
        let mock = MockBackend::new(settings).with_embedding_dim(options.embedding_dim);
        Self::with_backends(Box::new(mock), None, options)
    }

    /// Gateway with explicit backends. Tests use this to inject scripted
    /// fixtures; production wires [`MockBackend`] and [`HttpBackend`].
    pub fn with_backends(
        mock: Box<dyn Backend>,
        http: Option<Box<dyn Backend>>,
        options: GatewayOptions,
    ) -> Self {
        let cap = options.max_in_flight;
        Gateway {
            mock,
            http,
            options,
            mock_cap: InFlight::new(cap),
            http_cap: InFlight::new(cap),
            replay: None,
        }
    }

    /// Record every request/response pair to a replay log.
    pub fn with_replay(mut self, logger: ReplayLogger) -> Self {
        self.replay = Some(logger);
        self
    }

    pub fn embedding_dim(&self) -> usize {
        self.options.embedding_dim
    }

    fn backend(&self, agent: &AgentId) -> Result<(&dyn Backend, &InFlight), GatewayError> {
        match agent.backend {
            BackendKind::Mock => Ok((self.mock.as_ref(), &self.mock_cap)),
            BackendKind::Http => self
                .http
                .as_deref()
                .map(|b| (b, &self.http_cap))
                .ok_or(GatewayError::NoBackend(BackendKind::Http)),
        }
    }

    fn check_role(
        agent: &AgentId,
        allowed: &[Role],
        required: &'static str,
    ) -> Result<(), GatewayError> {
        if allowed.contains(&agent.role) {
            Ok(())
        } else {
            Err(GatewayError::RoleMismatch {
                agent: agent.name.clone(),
                actual: agent.role.as_str(),
                required,
            })
        }
    }

    /// Text generation for rewriters, responders and referees.
    pub fn generate(
        &self,
        agent: &AgentId,
        prompt: &Prompt,
        seed: u64,
    ) -> Result<String, GatewayError> {
        Self::check_role(
            agent,
            &[Role::InstructionRewriter, Role::ResponseGenerator, Role::Referee],
            "a generation role",
        )?;
        let (backend, cap) = self.backend(agent)?;
        let _permit = cap.acquire();
        let text = backend.generate(agent, prompt, seed)?;
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyCompletion { agent: agent.name.clone() });
        }
        if let Some(replay) = &self.replay {
            replay.record_generate(agent, prompt, seed, &text)?;
        }
        Ok(text)
    }

    /// Token logprobs of `continuation` under the scorer, conditioned on
    /// `context` when given. For a fixed agent the tokenization of the
    /// continuation is the same with and without context.
    pub fn score_logprobs(
        &self,
        agent: &AgentId,
        context: Option<&str>,
        continuation: &str,
    ) -> Result<TokenLogprobs, GatewayError> {
        Self::check_role(agent, &[Role::ScorerSmall, Role::ScorerLarge], "a scorer role")?;
        if continuation.trim().is_empty() {
            return Err(GatewayError::Precondition("continuation is empty".into()));
        }
        let (backend, cap) = self.backend(agent)?;
        let _permit = cap.acquire();
        let scored = backend.score_logprobs(agent, context, continuation)?;
        scored.validate(&agent.name)?;
        if let Some(replay) = &self.replay {
            replay.record_score(agent, context, continuation, &scored)?;
        }
        Ok(scored)
    }

    /// Embed text into the configured dimension.
    pub fn embed(&self, agent: &AgentId, text: &str) -> Result<Vec<f64>, GatewayError> {
        Self::check_role(agent, &[Role::Embedder], "embedder")?;
        if text.trim().is_empty() {
            return Err(GatewayError::Precondition("text to embed is empty".into()));
        }
        let (backend, cap) = self.backend(agent)?;
        let _permit = cap.acquire();
        let vector = backend.embed(agent, text)?;
        if vector.len() != self.options.embedding_dim {
            return Err(GatewayError::Integrity {
                agent: agent.name.clone(),
                detail: format!(
                    "embedding dimension {} does not match configured {}",
                    vector.len(),
                    self.options.embedding_dim
                ),
            });
        }
        if let Some(replay) = &self.replay {
            replay.record_embed(agent, text, &vector)?;
        }
        Ok(vector)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agent(role: Role) -> AgentId {
        AgentId {
            name: "m".into(),
            role,
            backend: BackendKind::Mock,
            endpoint: None,
            model: "mock-model".into(),
        }
    }

    #[test]
    fn role_preconditions_are_enforced() {
        let gw = Gateway::mock_only(MockSettings::default(), GatewayOptions::default());
        let err = gw
            .generate(&agent(Role::Embedder), &Prompt::user("hi"), 0)
            .unwrap_err();
        assert!(matches!(err, GatewayError::RoleMismatch { .. }));
        let err = gw.score_logprobs(&agent(Role::Referee), None, "a b").unwrap_err();
        assert!(matches!(err, GatewayError::RoleMismatch { .. }));
        let err = gw.embed(&agent(Role::ScorerSmall), "a").unwrap_err();
        assert!(matches!(err, GatewayError::RoleMismatch { .. }));
    }

    #[test]
    fn http_backend_absence_is_an_error() {
        let gw = Gateway::mock_only(MockSettings::default(), GatewayOptions::default());
        let mut a = agent(Role::Referee);
        a.backend = BackendKind::Http;
        let err = gw.generate(&a, &Prompt::user("hi"), 0).unwrap_err();
        assert!(matches!(err, GatewayError::NoBackend(BackendKind::Http)));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let gw = Gateway::mock_only(MockSettings::default(), GatewayOptions::default());
        assert!(matches!(
            gw.score_logprobs(&agent(Role::ScorerSmall), None, "   "),
            Err(GatewayError::Precondition(_))
        ));
        assert!(matches!(
            gw.embed(&agent(Role::Embedder), ""),
            Err(GatewayError::Precondition(_))
        ));
    }

    /// Backend that records how many calls run at once.
    struct ConcurrencyProbe {
        current: std::sync::atomic::AtomicUsize,
        peak: std::sync::atomic::AtomicUsize,
    }

    impl Backend for ConcurrencyProbe {
        fn generate(&self, _: &AgentId, _: &Prompt, _: u64) -> Result<String, GatewayError> {
            use std::sync::atomic::Ordering::SeqCst;
            let now = self.current.fetch_add(1, SeqCst) + 1;
            self.peak.fetch_max(now, SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(5));
            self.current.fetch_sub(1, SeqCst);
            Ok("done".into())
        }

        fn score_logprobs(
            &self,
            _: &AgentId,
            _: Option<&str>,
            _: &str,
        ) -> Result<TokenLogprobs, GatewayError> {
            unreachable!()
        }

        fn embed(&self, _: &AgentId, _: &str) -> Result<Vec<f64>, GatewayError> {
            unreachable!()
        }
    }

    #[test]
    fn in_flight_cap_bounds_concurrency() {
        let probe = Box::new(ConcurrencyProbe {
            current: std::sync::atomic::AtomicUsize::new(0),
            peak: std::sync::atomic::AtomicUsize::new(0),
        });
        let probe_ref: &'static ConcurrencyProbe = Box::leak(probe);
        let gw = Gateway::with_backends(
            Box::new(ProbeHandle(probe_ref)),
            None,
            GatewayOptions { embedding_dim: 8, max_in_flight: 2 },
        );
        std::thread::scope(|scope| {
            for _ in 0..8 {
                let gw = &gw;
                scope.spawn(move || {
                    gw.generate(&agent(Role::Referee), &Prompt::user("x"), 0).unwrap();
                });
            }
        });
        let peak = probe_ref.peak.load(std::sync::atomic::Ordering::SeqCst);
        assert!(peak <= 2, "observed {peak} concurrent calls with a cap of 2");
    }

    struct ProbeHandle(&'static ConcurrencyProbe);

    impl Backend for ProbeHandle {
        fn generate(&self, a: &AgentId, p: &Prompt, s: u64) -> Result<String, GatewayError> {
            self.0.generate(a, p, s)
        }

        fn score_logprobs(
            &self,
            a: &AgentId,
            c: Option<&str>,
            t: &str,
        ) -> Result<TokenLogprobs, GatewayError> {
            self.0.score_logprobs(a, c, t)
        }

        fn embed(&self, a: &AgentId, t: &str) -> Result<Vec<f64>, GatewayError> {
            self.0.embed(a, t)
        }
    }
}
