//! Resumable pipeline state.
//!
//! The checkpoint captures everything a resumed run needs to continue
//! bit-identically under the mock backend: the cursor into the seed
//! dataset, the pair matrix, the memory bank, the master seed (per-seed
//! RNG streams are derived from it), run counters, and byte offsets of
//! the append-only artifacts so a resume can truncate half-written tails.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evolution::PairMatrix;
use crate::memory::MemoryBank;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot {action} checkpoint {path}: {detail}")]
    Io { action: &'static str, path: String, detail: String },
    #[error("checkpoint is not valid JSON: {0}")]
    Parse(String),
    #[error("checkpoint version {found} is not supported (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
}

/// Run counters surfaced in logs, `inspect` and the final summary.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub processed: u64,
    pub base_fallbacks: u64,
    pub referee_parse_failures: u64,
    pub dropped_candidates: u64,
}

/// Byte lengths of the append-only artifacts at checkpoint time.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileOffsets {
    pub output: u64,
    pub candidate_log: u64,
    pub trajectory: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineCheckpoint {
    pub version: u32,
    /// Index of the next unprocessed seed sample.
    pub cursor: usize,
    pub master_seed: u64,
    pub matrix: PairMatrix,
    pub bank: MemoryBank,
    pub counts: RunCounts,
    pub offsets: FileOffsets,
}

impl PipelineCheckpoint {
    /// Write atomically: serialize to a sibling temp file, then rename.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |action| {
            move |e: std::io::Error| CheckpointError::Io {
                action,
                path: path.display().to_string(),
                detail: e.to_string(),
            }
        };
        let body = serde_json::to_vec(self).expect("checkpoint serializes");
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, body).map_err(io("write"))?;
        std::fs::rename(&tmp, path).map_err(io("rename"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|e| CheckpointError::Io {
            action: "read",
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let checkpoint: PipelineCheckpoint =
            serde_json::from_str(&text).map_err(|e| CheckpointError::Parse(e.to_string()))?;
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { found: checkpoint.version });
        }
        Ok(checkpoint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::PairId;
    use crate::memory::MemoryEntry;

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");

        let mut matrix = PairMatrix::init_uniform(
            vec!["a".into(), "b".into()],
            vec!["x".into()],
            vec![],
            0.05,
        )
        .unwrap();
        matrix.apply_reward(&[(PairId::new(0, 0), 0.3)]).unwrap();
        let mut bank = MemoryBank::new(2, 8, 0.5);
        bank.admit(MemoryEntry {
            embedding: vec![0.25, -0.5],
            pair: PairId::new(0, 0),
            score: 0.75,
            seed_id: "s1".into(),
            admitted_at: 1,
        });

        let checkpoint = PipelineCheckpoint {
            version: CHECKPOINT_VERSION,
            cursor: 17,
            master_seed: 42,
            matrix: matrix.clone(),
            bank: bank.clone(),
            counts: RunCounts { processed: 17, base_fallbacks: 3, ..Default::default() },
            offsets: FileOffsets { output: 100, candidate_log: 900, trajectory: 50 },
        };
        checkpoint.save(&path).unwrap();
        let loaded = PipelineCheckpoint::load(&path).unwrap();
        assert_eq!(loaded.cursor, 17);
        assert_eq!(loaded.matrix, matrix);
        assert_eq!(loaded.bank, bank);
        assert_eq!(loaded.counts.base_fallbacks, 3);
        assert!(!path.with_extension("json.tmp").exists());
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let matrix =
            PairMatrix::init_uniform(vec!["a".into()], vec!["x".into()], vec![], 0.05).unwrap();
        let checkpoint = PipelineCheckpoint {
            version: 999,
            cursor: 0,
            master_seed: 0,
            matrix,
            bank: MemoryBank::new(2, 8, 0.5),
            counts: Default::default(),
            offsets: Default::default(),
        };
        let body = serde_json::to_string(&checkpoint).unwrap();
        std::fs::write(&path, body).unwrap();
        assert!(matches!(
            PipelineCheckpoint::load(&path),
            Err(CheckpointError::Version { found: 999 })
        ));
    }
}
