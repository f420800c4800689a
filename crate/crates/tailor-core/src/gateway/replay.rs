//! Request/response replay log.
//!
//! [`ReplayLogger`] appends one JSON line per gateway call. A recorded
//! file can then serve as an offline backend through [`ReplayBackend`],
//! which answers identical requests with the recorded responses and
//! errors on anything it has never seen.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{AgentId, Backend, GatewayError, Prompt, TokenLogprobs};
use crate::hashing::stable_hash64;

#[derive(Debug, Serialize, Deserialize)]
struct ReplayEntry {
    op: String,
    agent: String,
    request: serde_json::Value,
    response: serde_json::Value,
}

fn request_key(op: &str, agent: &str, request: &serde_json::Value) -> u64 {
    stable_hash64(&[op.as_bytes(), agent.as_bytes(), request.to_string().as_bytes()])
}

/// Appends gateway traffic to a JSONL file.
pub struct ReplayLogger {
    writer: Mutex<BufWriter<File>>,
}

impl ReplayLogger {
    pub fn create(path: &Path) -> Result<Self, GatewayError> {
        let file = File::create(path)
            .map_err(|e| GatewayError::Replay(format!("cannot create {path:?}: {e}")))?;
        Ok(ReplayLogger { writer: Mutex::new(BufWriter::new(file)) })
    }

    fn append(&self, entry: &ReplayEntry) -> Result<(), GatewayError> {
        let replay_err = |e: &dyn std::fmt::Display| GatewayError::Replay(e.to_string());
        let mut writer = self.writer.lock().unwrap();
        serde_json::to_writer(&mut *writer, entry).map_err(|e| replay_err(&e))?;
        writer.write_all(b"\n").map_err(|e| replay_err(&e))?;
        writer.flush().map_err(|e| replay_err(&e))
    }

    pub(super) fn record_generate(
        &self,
        agent: &AgentId,
        prompt: &Prompt,
        seed: u64,
        completion: &str,
    ) -> Result<(), GatewayError> {
        self.append(&ReplayEntry {
            op: "generate".into(),
            agent: agent.name.clone(),
            request: serde_json::json!({
                "system": prompt.system,
                "user": prompt.user,
                "seed": seed,
            }),
            response: serde_json::Value::String(completion.to_string()),
        })
    }

    pub(super) fn record_score(
        &self,
        agent: &AgentId,
        context: Option<&str>,
        continuation: &str,
        scored: &TokenLogprobs,
    ) -> Result<(), GatewayError> {
        self.append(&ReplayEntry {
            op: "score".into(),
            agent: agent.name.clone(),
            request: serde_json::json!({"context": context, "continuation": continuation}),
            response: serde_json::to_value(scored).expect("TokenLogprobs serializes"),
        })
    }

    pub(super) fn record_embed(
        &self,
        agent: &AgentId,
        text: &str,
        vector: &[f64],
    ) -> Result<(), GatewayError> {
        self.append(&ReplayEntry {
            op: "embed".into(),
            agent: agent.name.clone(),
            request: serde_json::json!({"text": text}),
            response: serde_json::to_value(vector).expect("vector serializes"),
        })
    }
}

/// Serves recorded responses for offline reruns.
pub struct ReplayBackend {
    entries: HashMap<u64, serde_json::Value>,
}

impl ReplayBackend {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let file = File::open(path)
            .map_err(|e| GatewayError::Replay(format!("cannot open {path:?}: {e}")))?;
        let mut entries = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| GatewayError::Replay(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ReplayEntry = serde_json::from_str(&line)
                .map_err(|e| GatewayError::Replay(format!("line {}: {e}", i + 1)))?;
            entries.insert(request_key(&entry.op, &entry.agent, &entry.request), entry.response);
        }
        Ok(ReplayBackend { entries })
    }

    fn lookup(
        &self,
        op: &str,
        agent: &AgentId,
        request: &serde_json::Value,
    ) -> Result<&serde_json::Value, GatewayError> {
        self.entries.get(&request_key(op, &agent.name, request)).ok_or_else(|| {
            GatewayError::Replay(format!(
                "no recorded {op} response for agent `{}` and this request",
                agent.name
            ))
        })
    }
}

impl Backend for ReplayBackend {
    fn generate(&self, agent: &AgentId, prompt: &Prompt, seed: u64) -> Result<String, GatewayError> {
        let request = serde_json::json!({
            "system": prompt.system,
            "user": prompt.user,
            "seed": seed,
        });
        match self.lookup("generate", agent, &request)? {
            serde_json::Value::String(s) => Ok(s.clone()),
            other => Err(GatewayError::Replay(format!("generate entry is not text: {other}"))),
        }
    }

    fn score_logprobs(
        &self,
        agent: &AgentId,
        context: Option<&str>,
        continuation: &str,
    ) -> Result<TokenLogprobs, GatewayError> {
        let request = serde_json::json!({"context": context, "continuation": continuation});
        let value = self.lookup("score", agent, &request)?;
        serde_json::from_value(value.clone())
            .map_err(|e| GatewayError::Replay(format!("bad score entry: {e}")))
    }

    fn embed(&self, agent: &AgentId, text: &str) -> Result<Vec<f64>, GatewayError> {
        let request = serde_json::json!({"text": text});
        let value = self.lookup("embed", agent, &request)?;
        serde_json::from_value(value.clone())
            .map_err(|e| GatewayError::Replay(format!("bad embed entry: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{BackendKind, Gateway, GatewayOptions, MockSettings, Role};

    #[test]
    fn recorded_traffic_replays_identically() {
        let dir = tempfile::tempdir().unwrap();
        let log_path = dir.path().join("replay.jsonl");

        let agent = AgentId {
            name: "rw".into(),
            role: Role::InstructionRewriter,
            backend: BackendKind::Mock,
            endpoint: None,
            model: "m".into(),
        };
        let scorer = AgentId { name: "s".into(), role: Role::ScorerSmall, ..agent.clone() };
        let embedder = AgentId { name: "e".into(), role: Role::Embedder, ..agent.clone() };

        let live = Gateway::mock_only(MockSettings::default(), GatewayOptions::default())
            .with_replay(ReplayLogger::create(&log_path).unwrap());
        let text = live.generate(&agent, &Prompt::user("hello"), 7).unwrap();
        let scored = live.score_logprobs(&scorer, Some("ctx"), "a b").unwrap();
        let vector = live.embed(&embedder, "hello world").unwrap();
        drop(live);

        let replay = ReplayBackend::load(&log_path).unwrap();
        assert_eq!(replay.generate(&agent, &Prompt::user("hello"), 7).unwrap(), text);
        assert_eq!(replay.score_logprobs(&scorer, Some("ctx"), "a b").unwrap(), scored);
        assert_eq!(replay.embed(&embedder, "hello world").unwrap(), vector);
        // Unseen request -> error.
        assert!(replay.generate(&agent, &Prompt::user("other"), 7).is_err());
    }
}
