//! DenseHMM: hidden Markov models whose transition, emission and start
//! probabilities are softmax kernels over learned dense vectors.
//!
//! The crate provides
//!
//! * corpus loading and preprocessing ([`corpus`]),
//! * stochastic-matrix kernels ([`stochastic`]),
//! * classical HMM machinery with a brute-force likelihood oracle ([`hmm`]),
//! * the dense parameterization ([`dense`]) and its text serialization ([`format`]),
//! * first-order optimizers and a finite-difference gradient checker ([`optim`]),
//! * Baum-Welch and gradient M-step EM trainers ([`em`]),
//! * direct co-occurrence training ([`cooc`]),
//! * the softmax vs. normAbsLin factorization study ([`factor`]),
//! * the evaluation metrics and experiment protocol ([`harness`]).
//!
//! All floating point is `f64`. All randomness is drawn from caller-owned,
//! seeded [`rand_chacha::ChaCha8Rng`] generators.

// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cooc;
pub mod corpus;
pub mod dense;
pub mod em;
mod error;
pub mod factor;
pub mod format;
pub mod harness;
pub mod hmm;
pub mod optim;
pub mod stats;
pub mod stochastic;

pub use cooc::{CoocMatrix, DirectFit};
pub use corpus::{SequenceDataset, Vocabulary};
pub use dense::{DenseReps, DofReport};
pub use em::{AggregateStats, EmConfig};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, ExperimentResult, ModelKind};
pub use hmm::{HmmParams, PosteriorStats};
pub use stochastic::{ProbVector, StochasticMatrix};

/// The random generator used throughout the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Builds a [`SeededRng`] from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}

/// Derives an independent child seed from `base` and a path of indices by
/// chained splitmix64 mixing.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(base), |acc, &k| mix(acc ^ mix(k)))
}
