//! Operation attribution for weight-sharing architecture search.
//!
//! Candidate operations on the edges of a cell are players in a cooperative
//! game whose value is supernet validation accuracy. This crate computes
//! their Shapley values (exactly, or by truncated Monte-Carlo permutation
//! sampling), uses them to drive a momentum-smoothed update of architecture
//! parameters, and derives the final discrete cell.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar to `f64`.

// search errors carry the partial state for resumption
#![allow(clippy::result_large_err)]

pub mod analysis;
pub mod game;
pub mod protocol;
pub mod scalar;
pub mod search;
pub mod shapley;
pub mod space;
pub mod synthetic;

pub use game::{cached_evaluate, Coalition, EvalCache, EvalError, GameError, OperationId, ValueFunction};
pub use scalar::Scalar;
pub use search::{run_search, NormScope, SearchMode};
pub use shapley::{shapley_exact, shapley_mc, ExactConfig, ScanDirection, TruncationPolicy};
pub use space::{Genotype, SearchSpace};
pub use synthetic::{make_game, GameSpec};

pub type ShapleyEstimate = shapley::ShapleyEstimate<f64>;
pub type McConfig = shapley::McConfig<f64>;
pub type SearchConfig = search::SearchConfig<f64>;
pub type SearchState = search::SearchState<f64>;
pub type SearchOutcome = search::SearchOutcome<f64>;
pub type InteractionGame = synthetic::InteractionGame<f64>;
pub type CorrelationReport = analysis::CorrelationReport<f64>;

/// SplitMix64 finalizer over `seed + stream`; derives independent seeds for
/// epochs, noise streams and sweep runs.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
