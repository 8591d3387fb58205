//! Unplanned 30-day readmission prediction from raw EHR event logs.
//!
//! The pipeline runs: [`records`] (parse) → [`cohort`] (label and split) →
//! [`featurize`] (vocabulary, windows) → [`seqmodel`] or [`baseline`] →
//! [`metrics`]. [`synth`] generates event logs with planted signals and
//! [`pipeline`] wires everything into resumable CLI stages.

pub mod baseline;
pub mod cohort;
pub mod config;
mod container;
pub mod featurize;
pub mod metrics;
pub mod pipeline;
pub mod records;
pub mod seqmodel;
pub mod synth;

/// Derives an independent 64-bit seed from `(seed, stream)` (SplitMix64
/// finalizer over a combined word).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
