//! Agent-pair sampling distribution and its online evolution.
//!
//! [`PairMatrix`] holds one probability per (rewriter, responder) cell.
//! Base pairs are invoked unconditionally every iteration, so they carry
//! no probability mass and never evolve. The update is additive with rate
//! `beta` followed by renormalization; unrewarded pairs therefore decay
//! relative to rewarded ones. Probabilities can underflow to zero in f64
//! after sustained one-sided decay, which is acceptable: such pairs have
//! been phased out.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("no non-base pairs to sample from")]
    NoFreePairs,
    #[error("evolution rate must be >= 0, got {0}")]
    NegativeRate(f64),
    #[error("cannot draw {requested} pairs from {available} non-base pairs")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("memory draws ({l}) exceed pairs per seed ({m})")]
    MemoryDrawsExceedBatch { l: usize, m: usize },
    #[error("pair {0:?} is out of range for this matrix")]
    UnknownPair(PairId),
    #[error("pair {0:?} is a base pair and cannot {1}")]
    BasePair(PairId, &'static str),
    #[error("reward {pi} for pair {pair:?} outside [0, 1]")]
    RewardOutOfRange { pair: PairId, pi: f64 },
    #[error("duplicate base pair {0:?}")]
    DuplicateBasePair(PairId),
}

/// Index of one (rewriter, responder) cell.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct PairId {
    pub rewriter: usize,
    pub responder: usize,
}

impl PairId {
    pub fn new(rewriter: usize, responder: usize) -> Self {
        PairId { rewriter, responder }
    }
}

/// One draw of pairs for a seed sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairDraw {
    /// Filled in by the pipeline; sampling itself does not know the seed id.
    #[serde(default)]
    pub seed_id: String,
    /// Distinct pairs, memory-pool draws first.
    pub sampled: Vec<PairId>,
    /// How many of `sampled` came from the memory pool.
    pub from_memory: usize,
    pub rng_seed: u64,
}

/// The evolving sampling distribution over non-base agent pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMatrix {
    rewriters: Vec<String>,
    responders: Vec<String>,
    /// Row-major `rewriter * responders.len() + responder`.
    probs: Vec<f64>,
    base_pairs: Vec<PairId>,
    evolution_rate: f64,
    update_count: u64,
}

impl PairMatrix {
    /// Uniform distribution over all non-base cells. Base cells hold zero
    /// mass. `evolution_rate` of zero freezes the distribution (useful for
    /// ablation runs); negative rates are rejected.
    pub fn init_uniform(
        rewriters: Vec<String>,
        responders: Vec<String>,
        base_pairs: Vec<PairId>,
        evolution_rate: f64,
    ) -> Result<Self, EvolutionError> {
        if evolution_rate.is_nan() || evolution_rate < 0.0 {
            return Err(EvolutionError::NegativeRate(evolution_rate));
        }
        let cells = rewriters.len() * responders.len();
        let mut is_base = vec![false; cells];
        for &pair in &base_pairs {
            let idx = pair
                .rewriter
                .checked_mul(responders.len())
                .and_then(|row| row.checked_add(pair.responder))
                .filter(|_| pair.rewriter < rewriters.len() && pair.responder < responders.len())
                .ok_or(EvolutionError::UnknownPair(pair))?;
            if std::mem::replace(&mut is_base[idx], true) {
                return Err(EvolutionError::DuplicateBasePair(pair));
            }
        }
        let free = cells - base_pairs.len();
        if free == 0 {
            return Err(EvolutionError::NoFreePairs);
        }
        let uniform = 1.0 / free as f64;
        let probs = is_base.iter().map(|b| if *b { 0.0 } else { uniform }).collect();
        Ok(PairMatrix {
            rewriters,
            responders,
            probs,
            base_pairs,
            evolution_rate,
            update_count: 0,
        })
    }

    pub fn rewriters(&self) -> &[String] {
        &self.rewriters
    }

    pub fn responders(&self) -> &[String] {
        &self.responders
    }

    pub fn base_pairs(&self) -> &[PairId] {
        &self.base_pairs
    }

    pub fn evolution_rate(&self) -> f64 {
        self.evolution_rate
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    fn index(&self, pair: PairId) -> Result<usize, EvolutionError> {
        if pair.rewriter >= self.rewriters.len() || pair.responder >= self.responders.len() {
            return Err(EvolutionError::UnknownPair(pair));
        }
        Ok(pair.rewriter * self.responders.len() + pair.responder)
    }

    pub fn is_base(&self, pair: PairId) -> bool {
        self.base_pairs.contains(&pair)
    }

    pub fn prob(&self, pair: PairId) -> f64 {
        self.index(pair).map(|i| self.probs[i]).unwrap_or(0.0)
    }

    /// Non-base pairs in row-major order.
    pub fn free_pairs(&self) -> Vec<PairId> {
        let mut out = Vec::with_capacity(self.probs.len() - self.base_pairs.len());
        for rewriter in 0..self.rewriters.len() {
            for responder in 0..self.responders.len() {
                let pair = PairId::new(rewriter, responder);
                if !self.is_base(pair) {
                    out.push(pair);
                }
            }
        }
        out
    }

    pub fn free_pair_count(&self) -> usize {
        self.probs.len() - self.base_pairs.len()
    }

    /// `rewriter:responder` label used in logs, trajectories and output
    /// provenance.
    pub fn pair_label(&self, pair: PairId) -> String {
        format!(
            "{}:{}",
            self.rewriters.get(pair.rewriter).map(String::as_str).unwrap_or("?"),
            self.responders.get(pair.responder).map(String::as_str).unwrap_or("?")
        )
    }

    /// Total probability mass (1 within 1e-12 by invariant).
    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Draw `m` distinct non-base pairs: up to `l` from the memory pool
    /// (renormalized over the pool), the rest from the remaining pairs
    /// (renormalized over the remainder). Deterministic in `rng_seed`.
    pub fn sample_pairs(
        &self,
        m: usize,
        memory_pool: &[PairId],
        l: usize,
        rng_seed: u64,
    ) -> Result<PairDraw, EvolutionError> {
        let available = self.free_pair_count();
        if m == 0 || m > available {
            return Err(EvolutionError::SampleTooLarge { requested: m, available });
        }
        if l > m {
            return Err(EvolutionError::MemoryDrawsExceedBatch { l, m });
        }

        // Deduplicate the pool, preserving rank order, and validate it.
        let mut pool: Vec<PairId> = Vec::new();
        for &pair in memory_pool {
            self.index(pair)?;
            if self.is_base(pair) {
                return Err(EvolutionError::BasePair(pair, "appear in the memory pool"));
            }
            if !pool.contains(&pair) {
                pool.push(pair);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut sampled = Vec::with_capacity(m);

        let mut pool_weighted: Vec<(PairId, f64)> =
            pool.iter().map(|&p| (p, self.prob(p))).collect();
        let from_memory = l.min(pool_weighted.len());
        for _ in 0..from_memory {
            sampled.push(weighted_draw(&mut rng, &mut pool_weighted));
        }

        let mut rest: Vec<(PairId, f64)> = self
            .free_pairs()
            .into_iter()
            .filter(|p| !sampled.contains(p))
            .map(|p| (p, self.prob(p)))
            .collect();
        for _ in 0..m - from_memory {
            sampled.push(weighted_draw(&mut rng, &mut rest));
        }

        Ok(PairDraw { seed_id: String::new(), sampled, from_memory, rng_seed })
    }

    /// Additive update with renormalization.
    ///
    /// Each rewarded pair gains `evolution_rate * pi`; the whole matrix is
    /// then divided by its new total so rewarded pairs gain and everyone
    /// else decays. Rewards for base pairs or outside [0, 1] are contract
    /// errors. A call whose rewards are all zero leaves the probabilities
    /// bit-identical.
    pub fn apply_reward(&mut self, rewards: &[(PairId, f64)]) -> Result<(), EvolutionError> {
        for &(pair, pi) in rewards {
            let _ = self.index(pair)?;
            if self.is_base(pair) {
                return Err(EvolutionError::BasePair(pair, "receive a reward"));
            }
            if !pi.is_finite() || !(0.0..=1.0).contains(&pi) {
                return Err(EvolutionError::RewardOutOfRange { pair, pi });
            }
        }
        let mut added = 0.0;
        for &(pair, pi) in rewards {
            let idx = self.index(pair).expect("validated above");
            let delta = self.evolution_rate * pi;
            self.probs[idx] += delta;
            added += delta;
        }
        if added > 0.0 {
            let total: f64 = self.probs.iter().sum();
            for p in &mut self.probs {
                *p /= total;
            }
        }
        self.update_count += 1;
        Ok(())
    }
}

/// Pick one item proportionally to weight and remove it. Degenerates to a
/// uniform pick if all remaining weights are zero (possible only after
/// probabilities underflow).
fn weighted_draw<R: Rng>(rng: &mut R, items: &mut Vec<(PairId, f64)>) -> PairId {
    debug_assert!(!items.is_empty());
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let index = if total > 0.0 {
        let mut target = rng.random::<f64>() * total;
        let mut chosen = items.len() - 1;
        for (i, (_, w)) in items.iter().enumerate() {
            target -= w;
            if target < 0.0 {
                chosen = i;
                break;
            }
        }
        chosen
    } else {
        rng.random_range(0..items.len())
    };
    items.remove(index).0
}

/// Streams `(update, pair, probability)` rows for trajectory plots.
pub struct TrajectoryWriter<W: std::io::Write> {
    writer: csv::Writer<W>,
}

impl<W: std::io::Write> TrajectoryWriter<W> {
    /// `step_column` names the first column (`update_count` for pipeline
    /// runs, `iteration` for simulations).
    pub fn new(inner: W, step_column: &str) -> Result<Self, csv::Error> {
        let mut writer = csv::Writer::from_writer(inner);
        writer.write_record([step_column, "pair", "probability"])?;
        Ok(TrajectoryWriter { writer })
    }

    /// Continue an existing file without rewriting the header.
    pub fn append(inner: W) -> Self {
        TrajectoryWriter { writer: csv::Writer::from_writer(inner) }
    }

    pub fn write_step(
        &mut self,
        step: u64,
        labeled_probs: impl Iterator<Item = (String, f64)>,
    ) -> Result<(), csv::Error> {
        for (label, prob) in labeled_probs {
            self.writer.write_record([step.to_string(), label, format!("{prob:.9}")])?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.writer.flush()
    }
}
