//! Shared fixtures for the integration and acceptance suites.

use std::io::Write;
use std::path::Path;

use tailor_core::config::{
    AgentConfig, BasePairConfig, PathsConfig, PipelineConfig, RefereeQuestionSource, RewardMode,
    TemplatePaths,
};
use tailor_core::gateway::{BackendKind, HttpSettings, MockSettings, Role};

pub fn agent(name: &str, role: Role) -> AgentConfig {
    AgentConfig {
        name: name.to_string(),
        role,
        backend: BackendKind::Mock,
        endpoint: None,
        model: format!("{name}-model"),
    }
}

/// A mock-backend config over a 2x2 grid with one base pair (three free
/// pairs), M = 2, single worker. Artifact paths live under `dir`.
pub fn mock_config(dir: &Path) -> PipelineConfig {
    PipelineConfig {
        master_seed: 42,
        pairs_per_seed: 2,
        memory_draws: None,
        memory_query_size: 5,
        evolution_rate: 0.05,
        admission_threshold: 0.5,
        bank_capacity: 10_000,
        workers: 1,
        embedding_dim: 8,
        reward_mode: RewardMode::All,
        referee_question_source: RefereeQuestionSource::Candidate,
        checkpoint_every: 25,
        trajectory_stride: 1,
        agents: vec![
            agent("rw1", Role::InstructionRewriter),
            agent("rw2", Role::InstructionRewriter),
            agent("rs1", Role::ResponseGenerator),
            agent("rs2", Role::ResponseGenerator),
            agent("judge", Role::Referee),
            agent("small", Role::ScorerSmall),
            agent("large", Role::ScorerLarge),
            agent("emb", Role::Embedder),
        ],
        base_pairs: vec![BasePairConfig { instruction: "rw1".into(), response: "rs1".into() }],
        paths: PathsConfig {
            seed_dataset: dir.join("seed.jsonl"),
            output: dir.join("tailored.jsonl"),
            candidate_log: dir.join("candidates.jsonl"),
            checkpoint: dir.join("checkpoint.json"),
            trajectory: dir.join("trajectory.csv"),
            replay_log: None,
        },
        gateway: HttpSettings::default(),
        max_in_flight: 16,
        templates: TemplatePaths::default(),
        mock: MockSettings::default(),
    }
}

/// Write `n` synthetic seed samples with mildly overlapping vocabulary.
pub fn write_seed_dataset(path: &Path, n: usize) {
    let topics = [
        "sort a list of integers",
        "explain how gravity works",
        "write a short poem about rain",
        "sum the first n natural numbers",
        "describe the water cycle",
        "reverse a string in place",
        "define a binary search tree",
        "plan a small vegetable garden",
        "derive the quadratic formula",
        "compare tcp and udp protocols",
    ];
    let mut file =
        std::io::BufWriter::new(std::fs::File::create(path).expect("create seed dataset"));
    for i in 0..n {
        let topic = topics[i % topics.len()];
        let line = serde_json::json!({
            "id": format!("s{i:04}"),
            "instruction": format!("{topic} (variant {i})"),
            "response": format!("a careful reference answer about how to {topic}, with detail {i}"),
        });
        writeln!(file, "{line}").unwrap();
    }
    file.flush().unwrap();
}
