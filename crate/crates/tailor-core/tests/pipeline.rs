//! End-to-end pipeline behavior: determinism, worker scheduling, failure
//! isolation, metadata passthrough and forced-fixture end states.

mod common;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use common::{mock_config, write_seed_dataset};
use tailor_core::config::RewardMode;
use tailor_core::dataset::{load_candidate_log, load_output_dataset, load_seed_dataset};
use tailor_core::gateway::{Gateway, GatewayOptions, ScriptedBackend};
use tailor_core::pipeline::{
    run_pipeline, run_pipeline_with, PipelineError, PromptTemplates, RunOptions,
};
use tailor_core::{PairId, PipelineCheckpoint};

fn read(path: &std::path::Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn seventy_thousand_line_dataset_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.jsonl");
    write_seed_dataset(&path, 70_000);
    let samples = load_seed_dataset(&path).unwrap();
    assert_eq!(samples.len(), 70_000);
    assert_eq!(samples[0].id, "s0000");
    assert_eq!(samples[69_999].id, "s69999");
}

#[test]
fn mock_runs_are_bit_identical() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [&dir_a, &dir_b] {
        write_seed_dataset(&dir.path().join("seed.jsonl"), 20);
    }
    let cfg_a = mock_config(dir_a.path());
    let cfg_b = mock_config(dir_b.path());
    run_pipeline(&cfg_a, RunOptions::default()).unwrap();
    run_pipeline(&cfg_b, RunOptions::default()).unwrap();

    assert_eq!(read(&cfg_a.paths.output), read(&cfg_b.paths.output));
    assert_eq!(read(&cfg_a.paths.candidate_log), read(&cfg_b.paths.candidate_log));
    assert_eq!(read(&cfg_a.paths.trajectory), read(&cfg_b.paths.trajectory));
}

#[test]
fn every_seed_yields_exactly_one_output_record() {
    let dir = tempfile::tempdir().unwrap();
    write_seed_dataset(&dir.path().join("seed.jsonl"), 33);
    let config = mock_config(dir.path());
    let outcome = run_pipeline(&config, RunOptions::default()).unwrap();
    assert!(outcome.completed);

    let seeds = load_seed_dataset(&config.paths.seed_dataset).unwrap();
    let outputs = load_output_dataset(&config.paths.output).unwrap();
    assert_eq!(outputs.len(), seeds.len());
    for (seed, output) in seeds.iter().zip(&outputs) {
        assert_eq!(seed.id, output.seed_id, "output order follows seed order");
    }
}

#[test]
fn two_workers_are_deterministic_too() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut outputs = Vec::new();
    for dir in &dirs {
        write_seed_dataset(&dir.path().join("seed.jsonl"), 24);
        let mut config = mock_config(dir.path());
        config.workers = 2;
        let outcome = run_pipeline(&config, RunOptions::default()).unwrap();
        assert!(outcome.completed);
        outputs.push((read(&config.paths.output), read(&config.paths.candidate_log)));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn worker_count_changes_results_only_through_draw_staleness() {
    // Not asserting equality across W (draws see staler state with W=2);
    // both must still be complete and internally consistent.
    let dir = tempfile::tempdir().unwrap();
    write_seed_dataset(&dir.path().join("seed.jsonl"), 16);
    let mut config = mock_config(dir.path());
    config.workers = 2;
    let outcome = run_pipeline(&config, RunOptions::default()).unwrap();
    assert!(outcome.completed);
    assert_eq!(outcome.counts.processed, 16);
    let outputs = load_output_dataset(&config.paths.output).unwrap();
    assert_eq!(outputs.len(), 16);
}

#[test]
fn cancellation_checkpoints_and_resume_matches_uninterrupted() {
    let reference_dir = tempfile::tempdir().unwrap();
    write_seed_dataset(&reference_dir.path().join("seed.jsonl"), 30);
    let reference_cfg = mock_config(reference_dir.path());
    run_pipeline(&reference_cfg, RunOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    write_seed_dataset(&dir.path().join("seed.jsonl"), 30);
    let config = mock_config(dir.path());

    // Pre-set cancellation stops before the first block.
    let cancel = Arc::new(AtomicBool::new(true));
    let outcome = run_pipeline(
        &config,
        RunOptions { resume: false, stop_after: None, cancel: Some(cancel.clone()) },
    )
    .unwrap();
    assert!(!outcome.completed);
    assert_eq!(outcome.cursor, 0);
    assert!(config.paths.checkpoint.exists());

    // Resume in two legs: 11 seeds, then the rest.
    cancel.store(false, Ordering::SeqCst);
    let outcome = run_pipeline(
        &config,
        RunOptions { resume: true, stop_after: Some(11), cancel: None },
    )
    .unwrap();
    assert!(!outcome.completed);
    assert_eq!(outcome.cursor, 11);
    let outcome =
        run_pipeline(&config, RunOptions { resume: true, stop_after: None, cancel: None })
            .unwrap();
    assert!(outcome.completed);

    assert_eq!(read(&reference_cfg.paths.output), read(&config.paths.output));
    assert_eq!(read(&reference_cfg.paths.candidate_log), read(&config.paths.candidate_log));
    assert_eq!(read(&reference_cfg.paths.trajectory), read(&config.paths.trajectory));
}

#[test]
fn fresh_run_refuses_to_clobber_existing_state() {
    let dir = tempfile::tempdir().unwrap();
    write_seed_dataset(&dir.path().join("seed.jsonl"), 4);
    let config = mock_config(dir.path());
    run_pipeline(&config, RunOptions::default()).unwrap();
    let err = run_pipeline(&config, RunOptions::default()).unwrap_err();
    assert!(matches!(err, PipelineError::ExistingState(_)), "{err}");
}

#[test]
fn unknown_seed_fields_ride_through_to_the_output() {
    let dir = tempfile::tempdir().unwrap();
    let seed_path = dir.path().join("seed.jsonl");
    std::fs::write(
        &seed_path,
        concat!(
            r#"{"id":"a","instruction":"describe a fox","response":"a fox is quick","source":"web","rank":3}"#,
            "\n",
        ),
    )
    .unwrap();
    let config = mock_config(dir.path());
    run_pipeline(&config, RunOptions::default()).unwrap();
    let outputs = load_output_dataset(&config.paths.output).unwrap();
    assert_eq!(outputs[0].extra["source"], serde_json::Value::String("web".into()));
    assert_eq!(outputs[0].extra["rank"], serde_json::json!(3));
}

#[test]
fn invalid_config_is_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    write_seed_dataset(&dir.path().join("seed.jsonl"), 2);
    let mut config = mock_config(dir.path());
    config.pairs_per_seed = 0;
    let err = run_pipeline(&config, RunOptions::default()).unwrap_err();
    assert!(err.to_string().contains("pairs_per_seed"), "{err}");
    assert!(!config.paths.output.exists());
}

#[test]
fn base_generation_failure_aborts_resumably() {
    let dir = tempfile::tempdir().unwrap();
    write_seed_dataset(&dir.path().join("seed.jsonl"), 6);
    let config = mock_config(dir.path());

    // The base rewriter fails once: seed 0 cannot build its anchor, which
    // is fatal, so the run aborts with a checkpoint at cursor 0.
    let scripted = ScriptedBackend::new();
    scripted.fail_next_generations("rw1", 1);
    let gateway = Gateway::with_backends(
        Box::new(scripted),
        None,
        GatewayOptions { embedding_dim: config.embedding_dim, max_in_flight: 4 },
    );
    let err = run_pipeline_with(&config, RunOptions::default(), &gateway).unwrap_err();
    assert!(matches!(err, PipelineError::Aborted { .. }), "{err}");
    let checkpoint = PipelineCheckpoint::load(&config.paths.checkpoint).unwrap();
    assert_eq!(checkpoint.cursor, 0);

    // With the backend healthy again, resume completes and matches a
    // clean mock run (the scripted backend falls back to mock behavior).
    let outcome = run_pipeline(
        &config,
        RunOptions { resume: true, stop_after: None, cancel: None },
    )
    .unwrap();
    assert!(outcome.completed);

    let reference_dir = tempfile::tempdir().unwrap();
    write_seed_dataset(&reference_dir.path().join("seed.jsonl"), 6);
    let reference_cfg = mock_config(reference_dir.path());
    run_pipeline(&reference_cfg, RunOptions::default()).unwrap();
    assert_eq!(read(&reference_cfg.paths.output), read(&config.paths.output));
}

#[test]
fn all_candidates_losing_keeps_base_and_matrix() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("seed.jsonl"),
        concat!(r#"{"id":"only","instruction":"seed question","response":"seed answer"}"#, "\n"),
    )
    .unwrap();
    let mut config = mock_config(dir.path());
    config.pairs_per_seed = 3;

    // Every comparison pops [[A]] for the first ordering (base as
    // assistant A) and [[B]] for the swapped one: the base wins both, so
    // every candidate scores pi_llm = 0.
    let scripted = ScriptedBackend::new();
    for _ in 0..3 {
        scripted.push_agent_completion("judge", "clear case. [[A]]");
        scripted.push_agent_completion("judge", "still the same answer. [[B]]");
    }
    let gateway = Gateway::with_backends(
        Box::new(scripted),
        None,
        GatewayOptions { embedding_dim: config.embedding_dim, max_in_flight: 4 },
    );
    let outcome = run_pipeline_with(&config, RunOptions::default(), &gateway).unwrap();
    assert!(outcome.completed);
    assert_eq!(outcome.counts.base_fallbacks, 1);

    let outputs = load_output_dataset(&config.paths.output).unwrap();
    assert_eq!(outputs[0].provenance, "base");
    assert_eq!(outputs[0].score, 0.0);

    // All rewards were zero, so the distribution is untouched (the update
    // counter still advances).
    let checkpoint = PipelineCheckpoint::load(&config.paths.checkpoint).unwrap();
    for pair in checkpoint.matrix.free_pairs() {
        assert_eq!(checkpoint.matrix.prob(pair), 1.0 / 3.0);
    }
    assert_eq!(checkpoint.matrix.update_count(), 1);
    assert_eq!(checkpoint.bank.len(), 0, "losing seeds admit nothing");
}

/// Forced-fixture end state: one candidate gets referee preference in both
/// orderings and the largest IFD gap, so it must win with composite 1.0,
/// collect the reward, and enter the memory bank.
#[test]
fn forced_winner_takes_reward_and_bank_entry() {
    let dir = tempfile::tempdir().unwrap();
    let seed_path = dir.path().join("seed.jsonl");
    std::fs::write(
        &seed_path,
        concat!(r#"{"id":"only","instruction":"seed question","response":"seed answer"}"#, "\n"),
    )
    .unwrap();

    let mut config = mock_config(dir.path());
    config.pairs_per_seed = 3; // draw every free pair, so the draw order is irrelevant
    config.reward_mode = RewardMode::All;

    let templates = PromptTemplates::embedded_defaults();
    let scripted = ScriptedBackend::new();

    // Rewrites, keyed by the exact filled prompt. rw1 rewrites for the base
    // candidate and for the free pair (rw1, rs2); rw2 for its two pairs.
    let rewrite_prompt = templates.fill_rewrite("seed question");
    scripted.push_generation("rw1", &rewrite_prompt, "base question");
    scripted.push_generation("rw1", &rewrite_prompt, "base question");
    scripted.push_generation("rw2", &rewrite_prompt, "hard question");
    scripted.push_generation("rw2", &rewrite_prompt, "hard question");

    // Responses: the winner-to-be is (rw2, rs2) answering "hard question".
    scripted.push_generation("rs1", &templates.fill_respond("base question", "seed answer"), "base answer");
    scripted.push_generation("rs2", &templates.fill_respond("base question", "seed answer"), "answer alpha");
    scripted.push_generation("rs1", &templates.fill_respond("hard question", "seed answer"), "answer beta");
    scripted.push_generation("rs2", &templates.fill_respond("hard question", "seed answer"), "answer gamma");

    // IFD fixtures: gamma has the largest small-vs-large gap (diff e-1),
    // alpha a smaller one, beta none.
    let set = |resp: &str, cond_small: f64, uncond_small: f64| {
        let n = resp.split_whitespace().count();
        scripted.set_logprobs("small-model", true, resp, &vec![cond_small; n]);
        scripted.set_logprobs("small-model", false, resp, &vec![uncond_small; n]);
        scripted.set_logprobs("large-model", true, resp, &vec![-1.0; n]);
        scripted.set_logprobs("large-model", false, resp, &vec![-1.0; n]);
    };
    set("answer alpha", -1.5, -1.0); // IFD_small e^0.5, diff e^0.5 - 1
    set("answer beta", -1.0, -1.0); // diff 0
    set("answer gamma", -2.0, -1.0); // IFD_small e^1, diff e - 1 (max)

    // Referee: gamma preferred in both orderings; alpha and beta lose both.
    let judge = |question: &str, a: &str, b: &str, verdict: &str| {
        let user = templates
            .referee_user
            .replace("<question>", question)
            .replace("<answer_a>", a)
            .replace("<answer_b>", b);
        scripted.push_generation("judge", &user, verdict);
    };
    judge("hard question", "base answer", "answer gamma", "[[B]]");
    judge("hard question", "answer gamma", "base answer", "[[A]]");
    judge("base question", "base answer", "answer alpha", "[[A]]");
    judge("base question", "answer alpha", "base answer", "[[B]]");
    judge("hard question", "base answer", "answer beta", "[[A]]");
    judge("hard question", "answer beta", "base answer", "[[B]]");

    let gateway = Gateway::with_backends(
        Box::new(scripted),
        None,
        GatewayOptions { embedding_dim: config.embedding_dim, max_in_flight: 4 },
    );
    let outcome = run_pipeline_with(&config, RunOptions::default(), &gateway).unwrap();
    assert!(outcome.completed);
    assert_eq!(outcome.counts.base_fallbacks, 0);

    let outputs = load_output_dataset(&config.paths.output).unwrap();
    assert_eq!(outputs.len(), 1);
    assert_eq!(outputs[0].provenance, "rw2:rs2");
    assert_eq!(outputs[0].score, 1.0);
    assert_eq!(outputs[0].instruction, "hard question");
    assert_eq!(outputs[0].response, "answer gamma");

    let log = load_candidate_log(&config.paths.candidate_log).unwrap();
    assert_eq!(log.len(), 4, "one base record plus three candidates");
    let gamma = log.iter().find(|c| c.response == "answer gamma").unwrap();
    assert_eq!(gamma.pi_llm, 1.0);
    assert_eq!(gamma.pi_dual, 1.0);
    assert_eq!(gamma.pi_composite, 1.0);

    let checkpoint = PipelineCheckpoint::load(&config.paths.checkpoint).unwrap();
    let winner = PairId::new(1, 1); // rw2:rs2
    assert!(checkpoint.matrix.prob(winner) > 1.0 / 3.0, "winner gained probability");
    let stats = checkpoint.bank.stats();
    assert_eq!(stats.size, 1);
    assert_eq!(stats.per_pair, vec![(winner, 1)]);
}
