//! Instruction memory bank.
//!
//! Stores embeddings of instructions whose winning candidate scored at or
//! above the admission threshold, keyed to the agent-pair that produced
//! the winner. Queries return the distinct pairs behind the top-n entries
//! by cosine similarity — an exact linear scan, which keeps the
//! brute-force oracle equivalence exact at the scales this runs at.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evolution::PairId;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("query embedding has dimension {got}, bank expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("query size n must be >= 1")]
    ZeroQuery,
}

/// One admitted instruction embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub embedding: Vec<f64>,
    pub pair: PairId,
    /// Composite score of the winning candidate at admission.
    pub score: f64,
    pub seed_id: String,
    /// Matrix update count at admission; lower means older.
    pub admitted_at: u64,
}

/// Aggregate counters for `bank-stats`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankStats {
    pub size: usize,
    pub capacity: usize,
    pub admitted: u64,
    pub rejected: u64,
    pub per_pair: Vec<(PairId, usize)>,
}

/// Fixed-capacity FIFO store with an admission threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    dim: usize,
    capacity: usize,
    /// Admission threshold tau; entries below it are rejected.
    tau: f64,
    entries: VecDeque<MemoryEntry>,
    admitted: u64,
    rejected: u64,
}

impl MemoryBank {
    pub fn new(dim: usize, capacity: usize, tau: f64) -> Self {
        MemoryBank {
            dim,
            capacity: capacity.max(1),
            tau,
            entries: VecDeque::new(),
            admitted: 0,
            rejected: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Store the entry iff its score reaches the threshold; returns whether
    /// it was stored. At capacity the oldest entry is evicted first.
    /// Below-threshold admissions are silent no-ops counted in the stats.
    pub fn admit(&mut self, entry: MemoryEntry) -> bool {
        debug_assert_eq!(entry.embedding.len(), self.dim, "caller guarantees dimensions");
        if entry.score.is_nan() || entry.score < self.tau {
            self.rejected += 1;
            return false;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
        self.admitted += 1;
        true
    }

    /// Distinct pairs behind the `n` entries most similar to the query,
    /// best first; fewer when the bank is smaller. Ties in similarity
    /// resolve toward the older entry.
    pub fn query_pool(&self, query: &[f64], n: usize) -> Result<Vec<PairId>, MemoryError> {
        if query.len() != self.dim {
            return Err(MemoryError::DimensionMismatch { got: query.len(), expected: self.dim });
        }
        if n == 0 {
            return Err(MemoryError::ZeroQuery);
        }
        let mut ranked: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i, cosine(query, &e.embedding)))
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
        let mut pool = Vec::new();
        for (idx, _) in ranked.into_iter().take(n) {
            let pair = self.entries[idx].pair;
            if !pool.contains(&pair) {
                pool.push(pair);
            }
        }
        Ok(pool)
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter()
    }

    pub fn stats(&self) -> BankStats {
        let mut per_pair: std::collections::BTreeMap<PairId, usize> = Default::default();
        for entry in &self.entries {
            *per_pair.entry(entry.pair).or_default() += 1;
        }
        BankStats {
            size: self.entries.len(),
            capacity: self.capacity,
            admitted: self.admitted,
            rejected: self.rejected,
            per_pair: per_pair.into_iter().collect(),
        }
    }
}

/// Cosine similarity; zero-norm vectors rank below everything.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return f64::NEG_INFINITY;
    }
    dot / (na * nb)
}
