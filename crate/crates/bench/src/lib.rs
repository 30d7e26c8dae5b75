//! Fixtures shared by the benchmarks in `benches/`.

use densehmm::dense::init_reps;
use densehmm::em::accumulate_stats;
use densehmm::hmm::sample;
use densehmm::stochastic::{sample_dirichlet_rows, ProbVector};
use densehmm::{seeded_rng, AggregateStats, DenseReps, HmmParams, SequenceDataset};

/// An HMM with `Dirichlet(1)` rows.
pub fn random_hmm(n: usize, m: usize, seed: u64) -> HmmParams {
    let mut rng = seeded_rng(seed);
    let a = sample_dirichlet_rows(n, n, 1.0, &mut rng).unwrap();
    let b = sample_dirichlet_rows(n, m, 1.0, &mut rng).unwrap();
    let pi = sample_dirichlet_rows(1, n, 1.0, &mut rng).unwrap().into_inner().row(0).to_owned();
    HmmParams::new(a, b, ProbVector::new(pi).unwrap()).unwrap()
}

/// `count` sequences of length `len` sampled from `params`.
pub fn sampled_dataset(params: &HmmParams, count: usize, len: usize, seed: u64) -> SequenceDataset {
    let mut rng = seeded_rng(seed);
    let seqs = (0..count).map(|_| sample(params, len, &mut rng)).collect();
    SequenceDataset::from_indices(seqs, params.n_symbols()).unwrap()
}

/// Gaussian reps together with E-step statistics of data drawn from a
/// random HMM of the same size.
pub fn reps_and_stats(n: usize, m: usize, l: usize, seed: u64) -> (DenseReps, AggregateStats) {
    let params = random_hmm(n, m, seed);
    let data = sampled_dataset(&params, 10, 200, seed + 1);
    let (stats, _) = accumulate_stats(&params, &data).unwrap();
    (init_reps(n, m, l, &mut seeded_rng(seed + 2)).unwrap(), stats)
}
