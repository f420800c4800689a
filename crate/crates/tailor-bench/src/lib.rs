//! Benchmark-only crate; see `benches/core_ops.rs`.

pub use criterion;
