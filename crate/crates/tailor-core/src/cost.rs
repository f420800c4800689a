//! Back-of-envelope inference cost estimation.

use std::collections::BTreeMap;

/// Total multiply-accumulate operations for a run: for every model,
/// `macs_per_sample * pairs_invoked * samples`, summed over models.
///
/// With a single 4e12-MAC model, 10 pairs and 70,000 samples this is
/// 2.8e18 MACs; halving the pairs halves the total.
pub fn estimate_compute(
    macs_per_sample: &BTreeMap<String, f64>,
    pairs_invoked: u64,
    samples: u64,
) -> f64 {
    macs_per_sample
        .values()
        .map(|macs| macs * pairs_invoked as f64 * samples as f64)
        .sum()
}
