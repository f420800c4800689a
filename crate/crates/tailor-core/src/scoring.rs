//! Difficulty and quality scoring, plus per-seed candidate selection.
//!
//! The pieces, in the order the pipeline applies them:
//!
//! 1. instruction-following difficulty (IFD) of a response under one
//!    scorer model — the ratio of conditioned to unconditioned response
//!    perplexity ([`compute_ifd`]);
//! 2. the dual-model score: per-batch max-normalized gap between the small
//!    scorer's IFD and the large scorer's IFD ([`compute_dual_scores`]);
//! 3. the referee score: 0 / 0.5 / 1 from a judge model's pairwise verdict
//!    of candidate vs base, run in both orders ([`Referee`]);
//! 4. the composite score `pi = pi_llm * pi_dual` and the per-seed argmax
//!    selection with base fallback ([`compose_and_select`]).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CandidateRecord, OutputRecord, BASE_PROVENANCE};
use crate::gateway::{AgentId, Gateway, GatewayError, Prompt};
use crate::hashing::derive_seed;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("conditioned and unconditioned token sequences diverge: {0}")]
    TokenMismatch(String),
    #[error("empty candidate batch")]
    EmptyBatch,
    #[error("IFD values must be positive and finite, got ({small}, {large})")]
    NonPositiveIfd { small: f64, large: f64 },
    #[error("no verdict marker ([[A]]/[[B]]/[[C]]) in referee output")]
    VerdictParse,
}

/// IFD from matched per-token logprob sequences:
/// `exp(mean(log P(w)) - mean(log P(w | I)))`.
///
/// Always positive; above 1 exactly when the instruction made the response
/// harder (conditioned mean below the unconditioned mean).
pub fn ifd_from_logprobs(conditioned: &[f64], unconditioned: &[f64]) -> f64 {
    debug_assert_eq!(conditioned.len(), unconditioned.len());
    let mean_cond = conditioned.iter().sum::<f64>() / conditioned.len() as f64;
    let mean_uncond = unconditioned.iter().sum::<f64>() / unconditioned.len() as f64;
    (mean_uncond - mean_cond).exp()
}

/// Score `response` under `scorer` with and without `instruction` as
/// context and combine the two means into the IFD ratio.
///
/// The two calls must tokenize the continuation identically; diverging
/// token sequences signal tokenizer inconsistency and fail the call.
pub fn compute_ifd(
    gateway: &Gateway,
    scorer: &AgentId,
    instruction: &str,
    response: &str,
) -> Result<f64, ScoringError> {
    let conditioned = gateway.score_logprobs(scorer, Some(instruction), response)?;
    let unconditioned = gateway.score_logprobs(scorer, None, response)?;
    if conditioned.tokens != unconditioned.tokens {
        return Err(ScoringError::TokenMismatch(format!(
            "scorer `{}` produced {} conditioned vs {} unconditioned tokens",
            scorer.name,
            conditioned.tokens.len(),
            unconditioned.tokens.len()
        )));
    }
    Ok(ifd_from_logprobs(&conditioned.logprobs, &unconditioned.logprobs))
}

/// Dual-model scores for one seed's candidate batch.
///
/// `diffs[i] = ifd_small[i] - ifd_large[i]`; when the batch max of the
/// diffs is positive, each score is the candidate's non-negative diff
/// divided by that max (so the argmax candidates score exactly 1). When no
/// diff is positive, no candidate exhibits tailored complexity and every
/// score is 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualModelScoreBatch {
    pub seed_id: String,
    pub diffs: Vec<f64>,
    pub max_diff: f64,
    pub pi_dual: Vec<f64>,
}

pub fn compute_dual_scores(
    seed_id: &str,
    ifds: &[(f64, f64)],
) -> Result<DualModelScoreBatch, ScoringError> {
    if ifds.is_empty() {
        return Err(ScoringError::EmptyBatch);
    }
    let valid = |x: f64| x.is_finite() && x > 0.0;
    for &(small, large) in ifds {
        if !valid(small) || !valid(large) {
            return Err(ScoringError::NonPositiveIfd { small, large });
        }
    }
    let diffs: Vec<f64> = ifds.iter().map(|(s, l)| s - l).collect();
    let max_diff = diffs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pi_dual = if max_diff > 0.0 {
        diffs.iter().map(|d| d.max(0.0) / max_diff).collect()
    } else {
        vec![0.0; diffs.len()]
    };
    Ok(DualModelScoreBatch { seed_id: seed_id.to_string(), diffs, max_diff, pi_dual })
}

/// A parsed referee verdict marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictKind {
    ABetter,
    BBetter,
    Tie,
}

/// Which sample a verdict favors once the A/B ordering is undone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preference {
    Base,
    Candidate,
    Tie,
}

/// Scan for the last `[[A]]` / `[[B]]` / `[[C]]` marker. Brackets are
/// case-sensitive, the letter is not; surrounding prose and whitespace are
/// ignored; with several markers the last one wins.
pub fn parse_verdict(raw: &str) -> Result<VerdictKind, ScoringError> {
    let bytes = raw.as_bytes();
    let mut found = None;
    let mut i = 0;
    while i + 5 <= bytes.len() {
        if &bytes[i..i + 2] == b"[[" && &bytes[i + 3..i + 5] == b"]]" {
            let kind = match bytes[i + 2] {
                b'A' | b'a' => Some(VerdictKind::ABetter),
                b'B' | b'b' => Some(VerdictKind::BBetter),
                b'C' | b'c' => Some(VerdictKind::Tie),
                _ => None,
            };
            if let Some(kind) = kind {
                found = Some(kind);
                i += 5;
                continue;
            }
        }
        i += 1;
    }
    found.ok_or(ScoringError::VerdictParse)
}

/// One referee completion together with its parsed marker.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Verdict {
    pub raw: String,
    pub parsed: VerdictKind,
}

/// Result of the dual-ordering comparison for one candidate.
#[derive(Debug, Clone)]
pub struct RefereeOutcome {
    /// 0 (base better), 1 (candidate better) or 0.5 (tie or disagreement).
    pub pi_llm: f64,
    /// Verdicts that parsed, at most one per ordering.
    pub verdicts: Vec<Verdict>,
    /// How many of the two orderings yielded a parseable verdict.
    pub orderings_used: u8,
    /// True when any ordering fell back to a tie after an unparseable
    /// completion (retried once first).
    pub parse_fallback: bool,
}

/// Map the two order-corrected preferences to `pi_llm`. Agreement maps
/// base -> 0, candidate -> 1, tie -> 0.5; disagreement and missing
/// verdicts are scored as a tie.
pub fn combine_preferences(
    first: Option<Preference>,
    second: Option<Preference>,
) -> (f64, bool) {
    match (first, second) {
        (Some(a), Some(b)) if a == b => {
            let pi = match a {
                Preference::Base => 0.0,
                Preference::Candidate => 1.0,
                Preference::Tie => 0.5,
            };
            (pi, false)
        }
        (Some(_), Some(_)) => (0.5, false),
        _ => (0.5, true),
    }
}

/// Pairwise judge protocol: the prompt is issued once with the base answer
/// as assistant A, then again with the positions swapped; disagreement
/// after order correction is scored as a tie, which cancels position bias
/// by construction.
pub struct Referee<'a> {
    gateway: &'a Gateway,
    agent: &'a AgentId,
    system_prompt: &'a str,
    user_template: &'a str,
}

impl<'a> Referee<'a> {
    pub fn new(
        gateway: &'a Gateway,
        agent: &'a AgentId,
        system_prompt: &'a str,
        user_template: &'a str,
    ) -> Self {
        Referee { gateway, agent, system_prompt, user_template }
    }

    fn fill(&self, question: &str, answer_a: &str, answer_b: &str) -> Prompt {
        let user = self
            .user_template
            .replace("<question>", question)
            .replace("<answer_a>", answer_a)
            .replace("<answer_b>", answer_b);
        Prompt::with_system(self.system_prompt, user)
    }

    /// Run one ordering, retrying once on an unparseable completion.
    fn one_ordering(
        &self,
        question: &str,
        answer_a: &str,
        answer_b: &str,
        seed: u64,
    ) -> Result<Option<Verdict>, GatewayError> {
        let prompt = self.fill(question, answer_a, answer_b);
        for attempt in 0..2u64 {
            let raw =
                self.gateway.generate(self.agent, &prompt, derive_seed(seed, &format!("attempt/{attempt}")))?;
            if let Ok(parsed) = parse_verdict(&raw) {
                return Ok(Some(Verdict { raw, parsed }));
            }
            log::warn!("referee `{}` produced no verdict marker (attempt {attempt})", self.agent.name);
        }
        Ok(None)
    }

    /// Compare a candidate answer against the base answer for a question.
    ///
    /// Gateway errors propagate; unparseable verdicts degrade to a tie with
    /// `parse_fallback` set.
    pub fn compare(
        &self,
        question: &str,
        base_answer: &str,
        candidate_answer: &str,
        seed: u64,
    ) -> Result<RefereeOutcome, GatewayError> {
        let first = self.one_ordering(
            question,
            base_answer,
            candidate_answer,
            derive_seed(seed, "ordering/0"),
        )?;
        let second = self.one_ordering(
            question,
            candidate_answer,
            base_answer,
            derive_seed(seed, "ordering/1"),
        )?;

        // Undo the orderings: in the first call A is the base, in the
        // swapped call A is the candidate.
        let correct_first = |v: VerdictKind| match v {
            VerdictKind::ABetter => Preference::Base,
            VerdictKind::BBetter => Preference::Candidate,
            VerdictKind::Tie => Preference::Tie,
        };
        let correct_second = |v: VerdictKind| match v {
            VerdictKind::ABetter => Preference::Candidate,
            VerdictKind::BBetter => Preference::Base,
            VerdictKind::Tie => Preference::Tie,
        };
        let pref_first = first.as_ref().map(|v| correct_first(v.parsed));
        let pref_second = second.as_ref().map(|v| correct_second(v.parsed));
        let (pi_llm, parse_fallback) = combine_preferences(pref_first, pref_second);

        let verdicts: Vec<Verdict> = [first, second].into_iter().flatten().collect();
        let orderings_used = verdicts.len() as u8;
        Ok(RefereeOutcome { pi_llm, verdicts, orderings_used, parse_fallback })
    }
}

/// Outcome of the per-seed argmax selection.
#[derive(Debug, Clone)]
pub struct Selection {
    pub output: OutputRecord,
    /// Index into the candidate batch, `None` for the base fallback.
    pub winner_index: Option<usize>,
    pub used_base_fallback: bool,
    /// Set when the batch was empty (every candidate failed upstream).
    pub empty_batch: bool,
}

/// Set `pi_composite = pi_llm * pi_dual` on every candidate and pick the
/// winner.
///
/// The maximum-composite candidate wins; ties break toward the lowest
/// index (generation order). When every composite is 0 — including the
/// empty batch — the base candidate is returned with provenance `"base"`
/// and score 0.
pub fn compose_and_select(batch: &mut [CandidateRecord], base: &CandidateRecord) -> Selection {
    for candidate in batch.iter_mut() {
        candidate.pi_composite = candidate.pi_llm * candidate.pi_dual;
    }
    let mut winner: Option<(usize, f64)> = None;
    for (i, candidate) in batch.iter().enumerate() {
        if candidate.pi_composite > 0.0
            && winner.is_none_or(|(_, best)| candidate.pi_composite > best)
        {
            winner = Some((i, candidate.pi_composite));
        }
    }
    match winner {
        Some((index, score)) => {
            let chosen = &batch[index];
            Selection {
                output: OutputRecord {
                    seed_id: chosen.seed_id.clone(),
                    instruction: chosen.instruction.clone(),
                    response: chosen.response.clone(),
                    score,
                    provenance: chosen.pair.clone(),
                    extra: Default::default(),
                },
                winner_index: Some(index),
                used_base_fallback: false,
                empty_batch: false,
            }
        }
        None => Selection {
            output: OutputRecord {
                seed_id: base.seed_id.clone(),
                instruction: base.instruction.clone(),
                response: base.response.clone(),
                score: 0.0,
                provenance: BASE_PROVENANCE.to_string(),
                extra: Default::default(),
            },
            winner_index: None,
            used_base_fallback: true,
            empty_batch: batch.is_empty(),
        },
    }
}

/// Re-derive the output records from a candidate log: per seed (in log
/// order), recompute composites and apply the same argmax/fallback rule.
/// Used by `inspect` and by replay-consistency checks.
pub fn reselect_from_log(log: &[CandidateRecord]) -> Vec<OutputRecord> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: std::collections::HashMap<&str, (Vec<CandidateRecord>, Option<CandidateRecord>)> =
        std::collections::HashMap::new();
    for rec in log {
        let entry = groups.entry(&rec.seed_id).or_insert_with(|| {
            order.push(&rec.seed_id);
            (Vec::new(), None)
        });
        if rec.is_base {
            // The first base record is the comparison anchor.
            if entry.1.is_none() {
                entry.1 = Some(rec.clone());
            }
        } else {
            entry.0.push(rec.clone());
        }
    }
    order
        .into_iter()
        .filter_map(|seed_id| {
            let (mut batch, base) = groups.remove(seed_id)?;
            let base = base?;
            Some(compose_and_select(&mut batch, &base).output)
        })
        .collect()
}
