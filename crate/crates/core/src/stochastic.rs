//! Stochastic-matrix kernels and probability utilities.

use std::ops::Deref;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::{Error, Result};

/// Tolerance on row sums for [`StochasticMatrix`] and [`ProbVector`].
pub const SUM_TOL: f64 = 1e-12;

/// Power iteration stops once the max-abs update falls below this.
pub const STATIONARY_TOL: f64 = 1e-13;
pub const STATIONARY_MAX_ITERS: usize = 10_000;

/// A row-stochastic matrix: entries in `[0, 1]`, every row sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix(Array2<f64>);

impl StochasticMatrix {
    /// Validates `m` and wraps it.
    pub fn new(m: Array2<f64>) -> Result<Self> {
        check_stochastic_rows(&m, "matrix")?;
        Ok(Self(m))
    }

    /// Normalizes each row of a nonnegative weight matrix.
    pub fn from_weights(mut w: Array2<f64>) -> Result<Self> {
        for (i, mut row) in w.axis_iter_mut(Axis(0)).enumerate() {
            if row.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::NotStochastic {
                    what: "weight matrix",
                    reason: format!("row {i} has a negative or non-finite entry"),
                });
            }
            let s = row.sum();
            if s <= 0.0 {
                return Err(Error::ZeroRow { what: "weight matrix", row: i });
            }
            row.mapv_inplace(|x| x / s);
        }
        Ok(Self(w))
    }

    /// The `r × c` matrix with every entry `1 / c`.
    pub fn uniform(r: usize, c: usize) -> Self {
        Self(Array2::from_elem((r, c), 1.0 / c as f64))
    }

    pub fn identity(n: usize) -> Self {
        Self(Array2::eye(n))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

impl Deref for StochasticMatrix {
    type Target = Array2<f64>;
    fn deref(&self) -> &Array2<f64> {
        &self.0
    }
}

/// A probability vector: entries in `[0, 1]` summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Array1<f64>);

impl ProbVector {
    pub fn new(v: Array1<f64>) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::NotStochastic { what: "vector", reason: "empty".into() });
        }
        check_row(v.view(), "vector", 0)?;
        Ok(Self(v))
    }

    pub fn uniform(k: usize) -> Self {
        Self(Array1::from_elem(k, 1.0 / k as f64))
    }

    /// Normalizes a nonnegative weight vector.
    pub fn from_weights(w: Array1<f64>) -> Result<Self> {
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::NotStochastic { what: "weight vector", reason: "negative or non-finite entry".into() });
        }
        let s = w.sum();
        if s <= 0.0 {
            return Err(Error::ZeroRow { what: "weight vector", row: 0 });
        }
        Ok(Self(w / s))
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }
}

impl Deref for ProbVector {
    type Target = Array1<f64>;
    fn deref(&self) -> &Array1<f64> {
        &self.0
    }
}

fn check_row(row: ArrayView1<f64>, what: &'static str, i: usize) -> Result<()> {
    if let Some(x) = row.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::NotStochastic { what, reason: format!("row {i} has entry {x} outside [0, 1]") });
    }
    let s = row.sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::NotStochastic { what, reason: format!("row {i} sums to {s}") });
    }
    Ok(())
}

fn check_stochastic_rows(m: &Array2<f64>, what: &'static str) -> Result<()> {
    if m.ncols() == 0 {
        return Err(Error::NotStochastic { what, reason: "zero columns".into() });
    }
    for (i, row) in m.axis_iter(Axis(0)).enumerate() {
        check_row(row, what, i)?;
    }
    Ok(())
}

/// `log Σ exp(v_i)` with a max shift. Returns `-inf` if every entry is `-inf`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    assert!(!v.is_empty(), "log_sum_exp of an empty slice");
    if v.len() == 1 {
        return v[0];
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// In-place softmax of a single slice.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

/// Row-wise softmax of a finite matrix.
pub fn row_softmax(m: &Array2<f64>) -> Result<StochasticMatrix> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    if m.ncols() == 0 {
        return Err(Error::Shape("softmax of a matrix with zero columns".into()));
    }
    let mut out = m.as_standard_layout().into_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        softmax_in_place(row.as_slice_mut().expect("owned rows are contiguous"));
    }
    Ok(StochasticMatrix(out))
}

/// Softmax of a finite vector.
pub fn softmax(v: &Array1<f64>) -> Result<ProbVector> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    if v.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(ProbVector(Array1::from(out)))
}

/// Row-wise normalized absolute values: `|M_ij| / Σ_k |M_ik|`.
pub fn norm_abs_lin(m: &Array2<f64>) -> Result<StochasticMatrix> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("normAbsLin input"));
    }
    let mut out = m.mapv(f64::abs);
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let s = row.sum();
        if s == 0.0 {
            return Err(Error::ZeroRow { what: "normAbsLin input", row: i });
        }
        row.mapv_inplace(|x| x / s);
    }
    Ok(StochasticMatrix(out))
}

/// Samples an `r × c` matrix whose rows are i.i.d. `Dirichlet(alpha · 1_c)`,
/// via normalized `Gamma(alpha, 1)` draws.
pub fn sample_dirichlet_rows<R: Rng + ?Sized>(r: usize, c: usize, alpha: f64, rng: &mut R) -> Result<StochasticMatrix> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("Dirichlet alpha must be positive, got {alpha}")));
    }
    if c == 0 {
        return Err(Error::InvalidArgument("Dirichlet dimension must be positive".into()));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(format!("Gamma({alpha}, 1): {e}")))?;
    let mut out = Array2::zeros((r, c));
    for mut row in out.axis_iter_mut(Axis(0)) {
        // With small alpha every draw can underflow to zero; redraw.
        loop {
            for x in row.iter_mut() {
                *x = gamma.sample(rng);
            }
            let s = row.sum();
            if s > 0.0 && s.is_finite() {
                row.mapv_inplace(|x| x / s);
                break;
            }
        }
    }
    Ok(StochasticMatrix(out))
}

/// Residual of `πᵀA = πᵀ` in max-abs norm.
pub fn stationarity_residual(a: &Array2<f64>, pi: &Array1<f64>) -> f64 {
    let next = a.t().dot(pi);
    (&next - pi).iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Stationary distribution of a square row-stochastic matrix by power
/// iteration on `Aᵀ`, starting from the uniform vector.
///
/// For reducible chains this returns whichever fixed point the uniform start
/// converges to. When the iteration does not settle within
/// [`STATIONARY_MAX_ITERS`] steps (periodic or very slowly mixing chains) the
/// balance equations are solved directly instead; if they have no unique
/// solution the chain is reported as [`Error::NoConvergence`].
pub fn stationary_distribution(a: &StochasticMatrix) -> Result<ProbVector> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::Shape(format!("stationary distribution needs a square matrix, got {}x{}", n, a.cols())));
    }
    let at = a.t();
    let mut pi = Array1::from_elem(n, 1.0 / n as f64);
    let mut update = f64::INFINITY;
    for _ in 0..STATIONARY_MAX_ITERS {
        let mut next = at.dot(&pi);
        let s = next.sum();
        next /= s;
        update = (&next - &pi).iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        pi = next;
        if update < STATIONARY_TOL {
            return Ok(ProbVector(pi));
        }
    }
    match solve_balance(a.as_array()) {
        Some(solved) => Ok(ProbVector(solved)),
        None => Err(Error::NoConvergence { iterations: STATIONARY_MAX_ITERS, residual: update }),
    }
}

/// Solves `(Aᵀ − I) π = 0`, `Σ π = 1` by Gaussian elimination with partial
/// pivoting. Returns `None` unless the solution is unique, non-negative up to
/// rounding and stationary within `1e-10`.
fn solve_balance(a: &Array2<f64>) -> Option<Array1<f64>> {
    let n = a.nrows();
    let mut m = a.t().to_owned() - Array2::<f64>::eye(n);
    let mut rhs = Array1::zeros(n);
    // the balance equations are rank deficient; swap one for normalization
    m.row_mut(n - 1).fill(1.0);
    rhs[n - 1] = 1.0;
    let mut pi = solve_linear(m, rhs)?;
    if pi.iter().any(|&x| !(x > -1e-10)) {
        return None;
    }
    pi.mapv_inplace(|x| x.max(0.0));
    pi /= pi.sum();
    (stationarity_residual(a, &pi) <= 1e-10).then_some(pi)
}

/// Solves `m x = rhs` by Gaussian elimination with partial pivoting;
/// `None` when a pivot falls below `1e-12`.
pub(crate) fn solve_linear(mut m: Array2<f64>, mut rhs: Array1<f64>) -> Option<Array1<f64>> {
    let n = m.nrows();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs()))?;
        if m[[pivot, col]].abs() < 1e-12 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                m.swap([pivot, k], [col, k]);
            }
            rhs.swap(pivot, col);
        }
        for row in col + 1..n {
            let f = m[[row, col]] / m[[col, col]];
            if f != 0.0 {
                for k in col..n {
                    m[[row, k]] -= f * m[[col, k]];
                }
                rhs[row] -= f * rhs[col];
            }
        }
    }
    let mut x = Array1::zeros(n);
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| m[[row, k]] * x[k]).sum();
        x[row] = (rhs[row] - tail) / m[[row, row]];
    }
    Some(x)
}

/// Draws an index from a discrete distribution given as a slice of weights
/// summing to one.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(p: ArrayView1<f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > 0.0 {
            last_positive = i;
        }
        acc += x;
        if u < acc {
            return i;
        }
    }
    last_positive
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = row_softmax(&Array2::zeros((3, 3))).unwrap();
        for x in s.iter() {
            assert_abs_diff_eq!(*x, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_of_log_weights() {
        let s = row_softmax(&array![[1f64.ln(), 3f64.ln()]]).unwrap();
        assert_abs_diff_eq!(s[[0, 0]], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(s[[0, 1]], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let s = row_softmax(&array![[1000.0, 1000.5]]).unwrap();
        // 1 / (1 + e^0.5), evaluated at higher precision offline
        let p0 = 0.377_540_668_798_145_44;
        assert_abs_diff_eq!(s[[0, 0]], p0, epsilon = 1e-15);
        assert_abs_diff_eq!(s[[0, 1]], 1.0 - p0, epsilon = 1e-15);
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(matches!(row_softmax(&array![[f64::NAN, 0.0]]), Err(Error::NonFinite(_))));
        assert!(row_softmax(&array![[f64::INFINITY, 0.0]]).is_err());
    }

    #[test]
    fn norm_abs_lin_cases() {
        let s = norm_abs_lin(&array![[1.0, -1.0], [3.0, 1.0]]).unwrap();
        assert_eq!(s.as_array(), &array![[0.5, 0.5], [0.75, 0.25]]);
        assert!(matches!(norm_abs_lin(&array![[0.0, 0.0]]), Err(Error::ZeroRow { row: 0, .. })));
    }

    #[test]
    fn dirichlet_concentrates_for_large_alpha() {
        let mut rng = crate::seeded_rng(3);
        for _ in 0..100 {
            let m = sample_dirichlet_rows(4, 5, 1e6, &mut rng).unwrap();
            for x in m.iter() {
                assert!((x - 0.2).abs() < 0.01);
            }
        }
    }

    #[test]
    fn dirichlet_small_alpha_is_stochastic_and_deterministic() {
        let a = sample_dirichlet_rows(5, 5, 0.1, &mut crate::seeded_rng(11)).unwrap();
        let b = sample_dirichlet_rows(5, 5, 0.1, &mut crate::seeded_rng(11)).unwrap();
        assert_eq!(a, b);
        StochasticMatrix::new(a.into_inner()).unwrap();
        assert!(sample_dirichlet_rows(2, 2, 0.0, &mut crate::seeded_rng(0)).is_err());
        assert!(sample_dirichlet_rows(2, 2, -1.0, &mut crate::seeded_rng(0)).is_err());
    }

    #[test]
    fn stationary_hand_cases() {
        let pi = stationary_distribution(&StochasticMatrix::identity(2)).unwrap();
        assert_eq!(pi.as_array(), &array![0.5, 0.5]);

        let swap = StochasticMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(stationary_distribution(&swap).unwrap().as_array(), &array![0.5, 0.5]);

        let a = StochasticMatrix::new(array![[0.9, 0.1], [0.5, 0.5]]).unwrap();
        let pi = stationary_distribution(&a).unwrap();
        assert_abs_diff_eq!(pi[0], 5.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pi[1], 1.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn periodic_chains() {
        let a = StochasticMatrix::new(array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]).unwrap();
        // uniform is fixed for this cyclic permutation
        assert!(stationary_distribution(&a).is_ok());
        // the uniform start oscillates; the direct solve still finds the
        // unique answer
        let b = StochasticMatrix::new(array![[0.0, 0.5, 0.5], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let pi = stationary_distribution(&b).unwrap();
        assert_abs_diff_eq!(pi.as_slice().unwrap(), &[0.5, 0.25, 0.25][..], epsilon = 1e-12);
        // two periodic closed classes: no unique answer
        let c = StochasticMatrix::new(array![
            [0.0, 1.0, 0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0, 0.0, 0.0],
            [0.5, 0.0, 0.5, 0.0, 0.0]
        ])
        .unwrap();
        assert!(matches!(stationary_distribution(&c), Err(Error::NoConvergence { .. })));
    }

    #[test]
    fn log_sum_exp_cases() {
        assert_abs_diff_eq!(log_sum_exp(&[0.0, 0.0]), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(log_sum_exp(&[-3.25]), -3.25);
        assert_abs_diff_eq!(log_sum_exp(&[1000.0, 1001.0]), 1001.0 + (1.0 + (-1f64).exp()).ln(), epsilon = 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    fn matrix_strategy() -> impl Strategy<Value = Array2<f64>> {
        (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-30.0..30.0f64, r * c)
                .prop_map(move |v| Array2::from_shape_vec((r, c), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(m in matrix_strategy(), shift in -50.0..50.0f64) {
            let a = row_softmax(&m).unwrap();
            let b = row_softmax(&(&m + shift)).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            StochasticMatrix::new(a.into_inner()).unwrap();
        }

        #[test]
        fn norm_abs_lin_is_stochastic(m in matrix_strategy()) {
            if let Ok(s) = norm_abs_lin(&m) {
                prop_assert!(StochasticMatrix::new(s.into_inner()).is_ok());
            }
        }

        #[test]
        fn stationary_is_fixed_and_stable(seed in 0u64..500, n in 1usize..6) {
            let a = sample_dirichlet_rows(n, n, 1.0, &mut crate::seeded_rng(seed)).unwrap();
            let pi = stationary_distribution(&a).unwrap();
            prop_assert!(stationarity_residual(&a, &pi) < 1e-10);
            let mut more = pi.as_array().clone();
            for _ in 0..100 {
                more = a.t().dot(&more);
                let s = more.sum();
                more /= s;
            }
            for (x, y) in more.iter().zip(pi.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
