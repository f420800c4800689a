//! HTTP backend speaking the open chat-completion/completion/embeddings
//! JSON protocol.
//!
//! Endpoints, relative to each agent's base URL:
//!
//! * `POST {base}/chat/completions` — generation (messages in, text out)
//! * `POST {base}/completions` — logprob scoring via `echo` + `logprobs`
//! * `POST {base}/embeddings` — text in, float vector out
//!
//! Transport errors and HTTP 5xx/429 are retried with exponential backoff;
//! other 4xx statuses are permanent. Auth is a bearer token read from an
//! environment variable named in the settings.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{AgentId, Backend, GatewayError, Prompt, TokenLogprobs};

/// Wire-backend settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpSettings {
    /// Retries after the initial attempt (so `retries = 3` means at most 4
    /// requests per call).
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// First backoff; doubles per retry (1s, 2s, 4s with the defaults).
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_ms")]
    pub request_timeout_ms: u64,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    /// Text prepended when scoring without context, for servers that cannot
    /// return a logprob for the very first prompt token. Excluded from the
    /// scored span.
    #[serde(default)]
    pub unconditioned_prefix: Option<String>,
}

fn default_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    1000
}

fn default_timeout_ms() -> u64 {
    60_000
}

impl Default for HttpSettings {
    fn default() -> Self {
        HttpSettings {
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            request_timeout_ms: default_timeout_ms(),
            auth_env: None,
            unconditioned_prefix: None,
        }
    }
}

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    settings: HttpSettings,
    bearer: Option<String>,
    retries_attempted: AtomicU64,
}

impl HttpBackend {
    pub fn new(settings: HttpSettings) -> Result<Self, GatewayError> {
        let bearer = match &settings.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                GatewayError::Precondition(format!(
                    "auth_env names `{var}` but the variable is not set"
                ))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(settings.request_timeout_ms))
            .build()
            .map_err(|e| GatewayError::Transport { agent: "-".into(), detail: e.to_string() })?;
        Ok(HttpBackend { client, settings, bearer, retries_attempted: AtomicU64::new(0) })
    }

    /// Total retries performed since construction (for tests and stats).
    pub fn retries_attempted(&self) -> u64 {
        self.retries_attempted.load(Ordering::Relaxed)
    }

    fn endpoint(agent: &AgentId, path: &str) -> Result<String, GatewayError> {
        let base = agent.endpoint.as_deref().ok_or_else(|| {
            GatewayError::Precondition(format!("http agent `{}` has no endpoint", agent.name))
        })?;
        Ok(format!("{}/{}", base.trim_end_matches('/'), path))
    }

    fn post_json(
        &self,
        agent: &AgentId,
        url: &str,
        body: &serde_json::Value,
    ) -> Result<serde_json::Value, GatewayError> {
        let mut request = self.client.post(url).json(body);
        if let Some(token) = &self.bearer {
            request = request.header("Authorization", format!("Bearer {token}"));
        }
        let response = request.send().map_err(|e| GatewayError::Transport {
            agent: agent.name.clone(),
            detail: e.to_string(),
        })?;
        let status = response.status();
        if !status.is_success() {
            let detail = response.text().unwrap_or_default();
            return Err(GatewayError::HttpStatus {
                agent: agent.name.clone(),
                status: status.as_u16(),
                detail: detail.chars().take(200).collect(),
            });
        }
        response.json().map_err(|e| GatewayError::Transport {
            agent: agent.name.clone(),
            detail: format!("invalid JSON response: {e}"),
        })
    }

    fn with_retries(
        &self,
        agent: &AgentId,
        url: &str,
        body: &serde_json::Value,
    ) -> Result<serde_json::Value, GatewayError> {
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            match self.post_json(agent, url, body) {
                Ok(v) => return Ok(v),
                Err(err) if err.is_retryable() && attempts <= self.settings.retries => {
                    let backoff = self.settings.backoff_ms << (attempts - 1).min(16);
                    log::warn!(
                        "retry {attempts}/{} for `{}` after {err} (backoff {backoff} ms)",
                        self.settings.retries,
                        agent.name
                    );
                    self.retries_attempted.fetch_add(1, Ordering::Relaxed);
                    std::thread::sleep(Duration::from_millis(backoff));
                }
                Err(err) if err.is_retryable() => {
                    return Err(GatewayError::RetriesExhausted {
                        agent: agent.name.clone(),
                        attempts,
                        detail: err.to_string(),
                    })
                }
                Err(err) => return Err(err),
            }
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    logprobs: Option<CompletionLogprobs>,
}

#[derive(Deserialize)]
struct CompletionLogprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingRow>,
}

#[derive(Deserialize)]
struct EmbeddingRow {
    embedding: Vec<f64>,
}

impl Backend for HttpBackend {
    fn generate(&self, agent: &AgentId, prompt: &Prompt, seed: u64) -> Result<String, GatewayError> {
        let url = Self::endpoint(agent, "chat/completions")?;
        let mut messages = Vec::new();
        if let Some(system) = &prompt.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": prompt.user}));
        let body = json!({"model": agent.model, "messages": messages, "seed": seed});
        let value = self.with_retries(agent, &url, &body)?;
        let parsed: ChatResponse =
            serde_json::from_value(value).map_err(|e| GatewayError::Integrity {
                agent: agent.name.clone(),
                detail: format!("unexpected chat response shape: {e}"),
            })?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| GatewayError::EmptyCompletion { agent: agent.name.clone() })
    }

    fn score_logprobs(
        &self,
        agent: &AgentId,
        context: Option<&str>,
        continuation: &str,
    ) -> Result<TokenLogprobs, GatewayError> {
        let url = Self::endpoint(agent, "completions")?;
        let prefix = match context {
            Some(ctx) => ctx.to_string(),
            None => self.settings.unconditioned_prefix.clone().unwrap_or_default(),
        };
        let prompt = format!("{prefix}{continuation}");
        let body = json!({
            "model": agent.model,
            "prompt": prompt,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
        });
        let value = self.with_retries(agent, &url, &body)?;
        let parsed: CompletionResponse =
            serde_json::from_value(value).map_err(|e| GatewayError::Integrity {
                agent: agent.name.clone(),
                detail: format!("unexpected completion response shape: {e}"),
            })?;
        let choice = parsed.choices.into_iter().next().ok_or_else(|| {
            GatewayError::EmptyCompletion { agent: agent.name.clone() }
        })?;
        let lp = choice.logprobs.ok_or(GatewayError::Capability {
            agent: agent.name.clone(),
            capability: "token logprobs",
        })?;
        if lp.tokens.len() != lp.token_logprobs.len() || lp.tokens.len() != lp.text_offset.len() {
            return Err(GatewayError::Integrity {
                agent: agent.name.clone(),
                detail: "logprob arrays have inconsistent lengths".into(),
            });
        }

        // Keep only tokens belonging to the continuation. Offsets count
        // characters of the prompt we sent, so the continuation starts at
        // the prefix's character length.
        let boundary = prefix.chars().count();
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        let mut first_offset = None;
        for ((token, lp_opt), offset) in
            lp.tokens.iter().zip(&lp.token_logprobs).zip(&lp.text_offset)
        {
            if *offset < boundary {
                continue;
            }
            if first_offset.is_none() {
                first_offset = Some(*offset);
            }
            let Some(value) = lp_opt else {
                return Err(if boundary == 0 {
                    GatewayError::Capability {
                        agent: agent.name.clone(),
                        capability: "a logprob for the first token (set \
                                     gateway.unconditioned_prefix)",
                    }
                } else {
                    GatewayError::Integrity {
                        agent: agent.name.clone(),
                        detail: format!("null logprob for continuation token `{token}`"),
                    }
                });
            };
            tokens.push(token.clone());
            logprobs.push(*value);
        }
        if first_offset != Some(boundary) {
            return Err(GatewayError::Integrity {
                agent: agent.name.clone(),
                detail: format!(
                    "continuation does not start on a token boundary (expected offset \
                     {boundary}, first scored token at {first_offset:?}); tokenizer split \
                     straddles the context"
                ),
            });
        }
        Ok(TokenLogprobs { tokens, logprobs })
    }

    fn embed(&self, agent: &AgentId, text: &str) -> Result<Vec<f64>, GatewayError> {
        let url = Self::endpoint(agent, "embeddings")?;
        let body = json!({"model": agent.model, "input": text});
        let value = self.with_retries(agent, &url, &body)?;
        let parsed: EmbeddingResponse =
            serde_json::from_value(value).map_err(|e| GatewayError::Integrity {
                agent: agent.name.clone(),
                detail: format!("unexpected embeddings response shape: {e}"),
            })?;
        parsed
            .data
            .into_iter()
            .next()
            .map(|row| row.embedding)
            .ok_or_else(|| GatewayError::EmptyCompletion { agent: agent.name.clone() })
    }
}
