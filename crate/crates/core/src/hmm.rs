//! Classical discrete HMM machinery: parameters, sampling, scaled
//! forward-backward, likelihood scoring and a brute-force oracle.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;

use crate::corpus::SequenceDataset;
use crate::stochastic::{sample_categorical, stationarity_residual, ProbVector, StochasticMatrix};
use crate::{Error, Result};

/// Emission likelihood floor used by [`forward_log_likelihood_floored`].
pub const LIKELIHOOD_FLOOR: f64 = 1e-300;

/// The parameter triple `(A, B, π)` of a discrete HMM with `n` hidden states
/// and `m` symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmParams {
    a: StochasticMatrix,
    b: StochasticMatrix,
    pi: ProbVector,
}

impl HmmParams {
    pub fn new(a: StochasticMatrix, b: StochasticMatrix, pi: ProbVector) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::Shape(format!("A must be square, got {}x{}", n, a.cols())));
        }
        if b.rows() != n {
            return Err(Error::Shape(format!("B has {} rows, expected {n}", b.rows())));
        }
        if pi.len() != n {
            return Err(Error::Shape(format!("pi has length {}, expected {n}", pi.len())));
        }
        Ok(Self { a, b, pi })
    }

    pub fn n_states(&self) -> usize {
        self.a.rows()
    }

    pub fn n_symbols(&self) -> usize {
        self.b.cols()
    }

    pub fn a(&self) -> &StochasticMatrix {
        &self.a
    }

    pub fn b(&self) -> &StochasticMatrix {
        &self.b
    }

    pub fn pi(&self) -> &ProbVector {
        &self.pi
    }

    /// Same `A` and `B` with a different initial distribution.
    pub fn with_pi(&self, pi: ProbVector) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), pi)
    }

    /// Max-abs residual of `πᵀA = πᵀ`.
    pub fn stationarity_residual(&self) -> f64 {
        stationarity_residual(&self.a, &self.pi)
    }

    /// Relabels hidden states: new state `k` is old state `perm[k]`.
    pub fn permute_states(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_states();
        if perm.len() != n {
            return Err(Error::Shape("permutation length".into()));
        }
        let a = Array2::from_shape_fn((n, n), |(i, j)| self.a[[perm[i], perm[j]]]);
        let b = Array2::from_shape_fn((n, self.n_symbols()), |(i, j)| self.b[[perm[i], j]]);
        let pi = Array1::from_shape_fn(n, |i| self.pi[perm[i]]);
        Self::new(StochasticMatrix::new(a)?, StochasticMatrix::new(b)?, ProbVector::new(pi)?)
    }

    fn check_sequence(&self, seq: &[u32]) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::InvalidArgument("empty sequence".into()));
        }
        let m = self.n_symbols() as u32;
        if let Some(&o) = seq.iter().find(|&&o| o >= m) {
            return Err(Error::InvalidArgument(format!("symbol {o} outside model alphabet of size {m}")));
        }
        Ok(())
    }
}

/// Smoothed posteriors for one sequence.
#[derive(Debug, Clone)]
pub struct PosteriorStats {
    /// `gamma[[t, i]] = P(X_t = i | o)`, shape `T × n`.
    pub gamma: Array2<f64>,
    /// `xi[[t, i, j]] = P(X_t = i, X_{t+1} = j | o)`, shape `(T-1) × n × n`.
    pub xi: Array3<f64>,
    pub log_likelihood: f64,
}

/// Samples `len` emissions from the model.
pub fn sample<R: Rng + ?Sized>(params: &HmmParams, len: usize, rng: &mut R) -> Vec<u32> {
    let mut out = Vec::with_capacity(len);
    if len == 0 {
        return out;
    }
    let mut state = sample_categorical(params.pi.view(), rng);
    for t in 0..len {
        if t > 0 {
            state = sample_categorical(params.a.row(state), rng);
        }
        out.push(sample_categorical(params.b.row(state), rng) as u32);
    }
    out
}

/// Scaled forward pass. Returns the normalized forward variables and the
/// scaling coefficients `c_t = P(o_t | o_1..o_{t-1})`.
fn forward(params: &HmmParams, seq: &[u32]) -> Result<(Array2<f64>, Vec<f64>)> {
    params.check_sequence(seq)?;
    let (n, len) = (params.n_states(), seq.len());
    let a = params.a.as_array();
    let b = params.b.as_array();
    let mut alpha = Array2::zeros((len, n));
    let mut scale = Vec::with_capacity(len);
    for (t, &o) in seq.iter().enumerate() {
        let o = o as usize;
        let prior = if t == 0 { params.pi.as_array().clone() } else { alpha.row(t - 1).dot(a) };
        let mut row = alpha.row_mut(t);
        for i in 0..n {
            row[i] = prior[i] * b[[i, o]];
        }
        let c = row.sum();
        if c <= 0.0 {
            return Err(Error::ImpossibleSequence { position: t });
        }
        row /= c;
        scale.push(c);
    }
    Ok((alpha, scale))
}

/// Forward-backward with per-step scaling.
pub fn forward_backward(params: &HmmParams, seq: &[u32]) -> Result<PosteriorStats> {
    let (alpha, scale) = forward(params, seq)?;
    let (n, len) = (params.n_states(), seq.len());
    let a = params.a.as_array();
    let b = params.b.as_array();

    let mut beta = Array2::ones((len, n));
    for t in (0..len - 1).rev() {
        let o = seq[t + 1] as usize;
        let weighted = Array1::from_shape_fn(n, |j| b[[j, o]] * beta[[t + 1, j]]);
        let row = a.dot(&weighted) / scale[t + 1];
        beta.row_mut(t).assign(&row);
    }

    let mut gamma = &alpha * &beta;
    for mut row in gamma.axis_iter_mut(Axis(0)) {
        let s = row.sum();
        row /= s;
    }

    let mut xi = Array3::zeros((len.saturating_sub(1), n, n));
    for t in 0..len.saturating_sub(1) {
        let o = seq[t + 1] as usize;
        let mut slice = xi.index_axis_mut(Axis(0), t);
        for i in 0..n {
            for j in 0..n {
                slice[[i, j]] = alpha[[t, i]] * a[[i, j]] * b[[j, o]] * beta[[t + 1, j]];
            }
        }
        let s = slice.sum();
        slice /= s;
    }

    let log_likelihood = scale.iter().map(|c| c.ln()).sum();
    Ok(PosteriorStats { gamma, xi, log_likelihood })
}

/// `log P(o; λ)` from the scaled forward pass.
pub fn forward_log_likelihood(params: &HmmParams, seq: &[u32]) -> Result<f64> {
    let (_, scale) = forward(params, seq)?;
    Ok(scale.iter().map(|c| c.ln()).sum())
}

/// `log P(o; λ)` where a step with zero total emission likelihood contributes
/// `log(LIKELIHOOD_FLOOR)` and keeps the predicted state distribution.
/// Also returns the number of floored steps.
pub fn forward_log_likelihood_floored(params: &HmmParams, seq: &[u32]) -> Result<(f64, usize)> {
    params.check_sequence(seq)?;
    let n = params.n_states();
    let a = params.a.as_array();
    let b = params.b.as_array();
    let mut state = params.pi.as_array().clone();
    let mut ll = 0.0;
    let mut floored = 0;
    for (t, &o) in seq.iter().enumerate() {
        let prior = if t == 0 { state.clone() } else { state.dot(a) };
        let mut next = Array1::from_shape_fn(n, |i| prior[i] * b[[i, o as usize]]);
        let c = next.sum();
        if c > 0.0 {
            next /= c;
            ll += c.ln();
            state = next;
        } else {
            ll += LIKELIHOOD_FLOOR.ln();
            floored += 1;
            state = prior;
        }
    }
    Ok((ll, floored))
}

/// Exact `log P(o; λ)` by enumerating every hidden path. Guarded to at most
/// `10⁶` paths; used as an oracle for the forward recursion.
pub fn brute_force_log_likelihood(params: &HmmParams, seq: &[u32]) -> Result<f64> {
    params.check_sequence(seq)?;
    let (n, len) = (params.n_states(), seq.len());
    let paths = (n as f64).powi(len as i32);
    if paths > 1e6 {
        return Err(Error::TooManyPaths { paths });
    }
    let log_joints: Vec<f64> = enumerate_paths(n, len).map(|path| path_log_joint(params, seq, &path)).collect();
    Ok(crate::stochastic::log_sum_exp(&log_joints))
}

/// Iterates over all `n^len` hidden paths in lexicographic order.
pub(crate) fn enumerate_paths(n: usize, len: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = n.pow(len as u32);
    (0..total).map(move |mut code| {
        let mut path = vec![0; len];
        for slot in path.iter_mut().rev() {
            *slot = code % n;
            code /= n;
        }
        path
    })
}

/// `log P(x, o; λ)` for a single hidden path.
pub(crate) fn path_log_joint(params: &HmmParams, seq: &[u32], path: &[usize]) -> f64 {
    let mut lp = params.pi[path[0]].ln() + params.b[[path[0], seq[0] as usize]].ln();
    for t in 1..seq.len() {
        lp += params.a[[path[t - 1], path[t]]].ln() + params.b[[path[t], seq[t] as usize]].ln();
    }
    lp
}

/// Negative log-likelihood of a test set, normalized by the number of
/// sequences and the longest sequence length in the set.
pub fn score_nll(params: &HmmParams, test: &SequenceDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let mut total = 0.0;
    for (k, seq) in test.sequences().iter().enumerate() {
        total += forward_log_likelihood(params, seq).map_err(|e| match e {
            Error::ImpossibleSequence { position } => Error::ImpossibleDatasetSequence { sequence: k, position },
            other => other,
        })?;
    }
    Ok(-total / (test.len() as f64 * test.max_len() as f64))
}

/// [`score_nll`] with the likelihood floor applied to impossible steps.
/// Returns the normalized NLL and the number of floored steps.
pub fn score_nll_floored(params: &HmmParams, test: &SequenceDataset) -> Result<(f64, usize)> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let mut total = 0.0;
    let mut floored = 0;
    for seq in test.sequences() {
        let (ll, f) = forward_log_likelihood_floored(params, seq)?;
        total += ll;
        floored += f;
    }
    Ok((-total / (test.len() as f64 * test.max_len() as f64), floored))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::stochastic::sample_dirichlet_rows;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    pub(crate) fn random_params(n: usize, m: usize, seed: u64) -> HmmParams {
        let mut rng = crate::seeded_rng(seed);
        let a = sample_dirichlet_rows(n, n, 1.0, &mut rng).unwrap();
        let b = sample_dirichlet_rows(n, m, 1.0, &mut rng).unwrap();
        let pi = sample_dirichlet_rows(1, n, 1.0, &mut rng).unwrap().into_inner().row(0).to_owned();
        HmmParams::new(a, b, ProbVector::new(pi).unwrap()).unwrap()
    }

    fn uniform(n: usize, m: usize) -> HmmParams {
        HmmParams::new(StochasticMatrix::uniform(n, n), StochasticMatrix::uniform(n, m), ProbVector::uniform(n))
            .unwrap()
    }

    #[test]
    fn degenerate_sampling() {
        let p = uniform(1, 1);
        assert_eq!(sample(&p, 7, &mut crate::seeded_rng(0)), vec![0; 7]);

        let p = HmmParams::new(
            StochasticMatrix::identity(2),
            StochasticMatrix::new(array![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]).unwrap(),
            ProbVector::new(array![1.0, 0.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(sample(&p, 20, &mut crate::seeded_rng(1)), vec![2; 20]);
    }

    #[test]
    fn sampled_frequencies_match_stationary_emission_law() {
        let a = StochasticMatrix::new(array![[0.9, 0.1], [0.5, 0.5]]).unwrap();
        let b = StochasticMatrix::new(array![[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]]).unwrap();
        // start from the stationary law [5/6, 1/6] so every step has the same marginal
        let pi = ProbVector::new(array![5.0 / 6.0, 1.0 / 6.0]).unwrap();
        let expected = pi.dot(b.as_array());
        let p = HmmParams::new(a, b, pi).unwrap();
        let s = sample(&p, 100_000, &mut crate::seeded_rng(2));
        for (k, e) in expected.iter().enumerate() {
            let f = s.iter().filter(|&&o| o == k as u32).count() as f64 / s.len() as f64;
            assert!((f - e).abs() < 0.01, "symbol {k}: {f} vs {e}");
        }
    }

    #[test]
    fn single_state_closed_form() {
        let p = HmmParams::new(
            StochasticMatrix::identity(1),
            StochasticMatrix::new(array![[0.2, 0.8]]).unwrap(),
            ProbVector::new(array![1.0]).unwrap(),
        )
        .unwrap();
        let seq = [0, 1, 1, 0, 1];
        let post = forward_backward(&p, &seq).unwrap();
        assert!(post.gamma.iter().all(|&g| g == 1.0));
        let expected = 2.0 * 0.2f64.ln() + 3.0 * 0.8f64.ln();
        assert_abs_diff_eq!(post.log_likelihood, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(brute_force_log_likelihood(&p, &seq).unwrap(), expected, epsilon = 1e-12);
        let test = SequenceDataset::from_indices(vec![seq.to_vec()], 2).unwrap();
        assert_abs_diff_eq!(score_nll(&p, &test).unwrap(), -expected / 5.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_model_likelihood() {
        let p = uniform(2, 2);
        let seq = [0, 1, 1, 0, 0, 0, 1];
        let post = forward_backward(&p, &seq).unwrap();
        assert_abs_diff_eq!(post.log_likelihood, 7.0 * 0.5f64.ln(), epsilon = 1e-12);
        for g in post.gamma.iter() {
            assert_abs_diff_eq!(*g, 0.5, epsilon = 1e-12);
        }
        let test = SequenceDataset::from_indices(
            (0..10).map(|k| (0..200).map(|t| ((t * 7 + k) % 2) as u32).collect()).collect(),
            2,
        )
        .unwrap();
        assert_abs_diff_eq!(score_nll(&p, &test).unwrap(), 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn single_step_brute_force() {
        let p = random_params(2, 3, 5);
        let o = 1;
        let expected = (p.pi()[0] * p.b()[[0, o]] + p.pi()[1] * p.b()[[1, o]]).ln();
        assert_abs_diff_eq!(brute_force_log_likelihood(&p, &[o as u32]).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn brute_force_guard() {
        let p = random_params(4, 2, 0);
        assert!(matches!(brute_force_log_likelihood(&p, &[0; 11]), Err(Error::TooManyPaths { .. })));
    }

    #[test]
    fn duplicate_sequences_keep_normalized_nll() {
        let p = random_params(3, 4, 9);
        let s = sample(&p, 30, &mut crate::seeded_rng(3));
        let one = SequenceDataset::from_indices(vec![s.clone()], 4).unwrap();
        let two = SequenceDataset::from_indices(vec![s.clone(), s], 4).unwrap();
        assert_abs_diff_eq!(score_nll(&p, &one).unwrap(), score_nll(&p, &two).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn impossible_sequence_is_reported() {
        let p = HmmParams::new(
            StochasticMatrix::identity(1),
            StochasticMatrix::new(array![[1.0, 0.0]]).unwrap(),
            ProbVector::new(array![1.0]).unwrap(),
        )
        .unwrap();
        assert!(matches!(forward_backward(&p, &[0, 0, 1]), Err(Error::ImpossibleSequence { position: 2 })));
        let test = SequenceDataset::from_indices(vec![vec![0], vec![0, 1]], 2).unwrap();
        assert!(matches!(score_nll(&p, &test), Err(Error::ImpossibleDatasetSequence { sequence: 1, position: 1 })));
        let (nll, floored) = score_nll_floored(&p, &test).unwrap();
        assert_eq!(floored, 1);
        assert_abs_diff_eq!(nll, -LIKELIHOOD_FLOOR.ln() / 4.0, epsilon = 1e-9);
    }

    #[test]
    fn random_three_state_matches_oracle() {
        let p = random_params(3, 4, 21);
        let seq = sample(&p, 5, &mut crate::seeded_rng(22));
        let fb = forward_backward(&p, &seq).unwrap().log_likelihood;
        assert_abs_diff_eq!(fb, brute_force_log_likelihood(&p, &seq).unwrap(), epsilon = 1e-10);
    }

    /// Exact posteriors from path enumeration.
    fn brute_force_posteriors(p: &HmmParams, seq: &[u32]) -> (Array2<f64>, Array3<f64>) {
        let (n, len) = (p.n_states(), seq.len());
        let paths: Vec<_> = enumerate_paths(n, len).collect();
        let lj: Vec<f64> = paths.iter().map(|x| path_log_joint(p, seq, x)).collect();
        let z = crate::stochastic::log_sum_exp(&lj);
        let mut gamma = Array2::zeros((len, n));
        let mut xi = Array3::zeros((len - 1, n, n));
        for (x, l) in paths.iter().zip(&lj) {
            let w = (l - z).exp();
            for t in 0..len {
                gamma[[t, x[t]]] += w;
                if t + 1 < len {
                    xi[[t, x[t], x[t + 1]]] += w;
                }
            }
        }
        (gamma, xi)
    }

    #[test]
    fn posteriors_match_enumeration() {
        let p = random_params(3, 3, 40);
        let seq = sample(&p, 6, &mut crate::seeded_rng(41));
        let post = forward_backward(&p, &seq).unwrap();
        let (g, x) = brute_force_posteriors(&p, &seq);
        for (a, b) in post.gamma.iter().zip(g.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
        for (a, b) in post.xi.iter().zip(x.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn forward_matches_brute_force(seed in 0u64..10_000, n in 1usize..5, m in 1usize..4, len in 1usize..8) {
            let p = random_params(n, m, seed);
            let seq = sample(&p, len, &mut crate::seeded_rng(seed + 1));
            let fb = forward_backward(&p, &seq).unwrap();
            let bf = brute_force_log_likelihood(&p, &seq).unwrap();
            prop_assert!((fb.log_likelihood - bf).abs() < 1e-10);

            for row in fb.gamma.axis_iter(Axis(0)) {
                prop_assert!((row.sum() - 1.0).abs() < 1e-10);
            }
            for t in 0..len.saturating_sub(1) {
                let slice = fb.xi.index_axis(Axis(0), t);
                prop_assert!((slice.sum() - 1.0).abs() < 1e-10);
                let rows = slice.sum_axis(Axis(1));
                let cols = slice.sum_axis(Axis(0));
                for i in 0..n {
                    prop_assert!((rows[i] - fb.gamma[[t, i]]).abs() < 1e-10);
                    prop_assert!((cols[i] - fb.gamma[[t + 1, i]]).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn likelihood_is_permutation_invariant(seed in 0u64..10_000, len in 1usize..30) {
            let p = random_params(4, 3, seed);
            let seq = sample(&p, len, &mut crate::seeded_rng(seed ^ 7));
            let perm = [2, 0, 3, 1];
            let q = p.permute_states(&perm).unwrap();
            let a = forward_log_likelihood(&p, &seq).unwrap();
            let b = forward_log_likelihood(&q, &seq).unwrap();
            prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
    }
}
