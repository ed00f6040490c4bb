//! Detecting behavioral change in black-box multi-agent systems.
//!
//! The pipeline: a [`tensor::ResponseTensor`] of embedded query responses is
//! reduced to per-slot mean matrices, a block distance matrix, and a joint
//! low-dimensional Euclidean embedding of every `(agent, timepoint)` slot
//! ([`embedding`]). Permutation tests on top of that embedding decide whether
//! a single agent ([`agent_tests`]) or a whole group ([`group_tests`])
//! changed between two timepoints. [`simulation`] generates temporal
//! Gaussian-blob datasets with ground truth retained so that oracle tests
//! can calibrate the rest.
//!
//! All randomness flows through seeded ChaCha8 streams ([`seeding`]); any
//! result is reproducible from the seeds recorded next to it.

pub mod agent_tests;
pub mod embedding;
pub mod error;
pub mod group_tests;
pub mod seeding;
pub mod simulation;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};

/// Format a float with 17 significant decimal digits (round-trip exact),
/// used by every CSV surface.
pub fn format_g17(x: f64) -> String {
    format!("{x:.16e}")
}
