//! The dense parameterization of an HMM.
//!
//! Every hidden state `i` owns three vectors: an incoming vector `u_i`, an
//! outgoing vector `z_i` along the hidden chain and an outgoing vector `w_i`
//! toward the observations. Every symbol `j` owns a vector `v_j`, and a single
//! `z_start` drives the initial distribution:
//!
//! ```text
//! A_ij = softmax_j(u_j · z_i)
//! B_ij = softmax_j(v_j · w_i)
//! π_i  = softmax_i(u_i · z_start)
//! ```
//!
//! Vectors are stored one per row. The kernel is fixed to `exp`; swapping in
//! another positive kernel only touches [`materialize`] and the two gradient
//! routines in [`crate::em`] and [`crate::cooc`].

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::hmm::HmmParams;
use crate::optim::FlatParams;
use crate::stochastic::{row_softmax, softmax};
use crate::{Error, Result};

/// Learnable embeddings of a DenseHMM.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseReps {
    /// `n × l`, row `i` is `u_i`.
    pub u: Array2<f64>,
    /// `n × l`, row `i` is `z_i`.
    pub z: Array2<f64>,
    /// `n × l`, row `i` is `w_i`.
    pub w: Array2<f64>,
    /// `m × l`, row `j` is `v_j`.
    pub v: Array2<f64>,
    /// length `l`.
    pub z_start: Array1<f64>,
}

/// Block names in packing order.
pub const BLOCKS: [&str; 5] = ["U", "Z", "W", "V", "z_start"];

impl DenseReps {
    pub fn new(u: Array2<f64>, z: Array2<f64>, w: Array2<f64>, v: Array2<f64>, z_start: Array1<f64>) -> Result<Self> {
        let reps = Self { u, z, w, v, z_start };
        reps.validate()?;
        Ok(reps)
    }

    /// All-zero representations.
    pub fn zeros(n: usize, m: usize, l: usize) -> Self {
        Self {
            u: Array2::zeros((n, l)),
            z: Array2::zeros((n, l)),
            w: Array2::zeros((n, l)),
            v: Array2::zeros((m, l)),
            z_start: Array1::zeros(l),
        }
    }

    pub fn n_states(&self) -> usize {
        self.u.nrows()
    }

    pub fn n_symbols(&self) -> usize {
        self.v.nrows()
    }

    pub fn repr_len(&self) -> usize {
        self.z_start.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, l) = self.u.dim();
        if self.z.dim() != (n, l) || self.w.dim() != (n, l) {
            return Err(Error::Shape(format!(
                "U {:?}, Z {:?} and W {:?} must share one shape",
                self.u.dim(),
                self.z.dim(),
                self.w.dim()
            )));
        }
        if self.v.ncols() != l || self.z_start.len() != l {
            return Err(Error::Shape(format!(
                "V has {} columns and z_start length {}, expected {l}",
                self.v.ncols(),
                self.z_start.len()
            )));
        }
        if n == 0 || self.v.nrows() == 0 {
            return Err(Error::Shape("need at least one state and one symbol".into()));
        }
        let finite =
            self.u.iter().chain(&self.z).chain(&self.w).chain(&self.v).chain(&self.z_start).all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("dense representations"));
        }
        Ok(())
    }

    /// Appends `extra` zero columns to every block.
    pub fn pad(&self, extra: usize) -> Self {
        let pad2 = |a: &Array2<f64>| concatenate![Axis(1), a.view(), Array2::zeros((a.nrows(), extra)).view()];
        Self {
            u: pad2(&self.u),
            z: pad2(&self.z),
            w: pad2(&self.w),
            v: pad2(&self.v),
            z_start: concatenate![Axis(0), self.z_start.view(), Array1::zeros(extra).view()],
        }
    }

    /// Packs every block into a flat vector in [`BLOCKS`] order.
    pub fn pack(&self) -> FlatParams {
        let mut values = Vec::with_capacity(self.num_params());
        values.extend(self.u.iter());
        values.extend(self.z.iter());
        values.extend(self.w.iter());
        values.extend(self.v.iter());
        values.extend(self.z_start.iter());
        let layout = vec![
            (BLOCKS[0].to_string(), vec![self.u.nrows(), self.u.ncols()]),
            (BLOCKS[1].to_string(), vec![self.z.nrows(), self.z.ncols()]),
            (BLOCKS[2].to_string(), vec![self.w.nrows(), self.w.ncols()]),
            (BLOCKS[3].to_string(), vec![self.v.nrows(), self.v.ncols()]),
            (BLOCKS[4].to_string(), vec![self.z_start.len()]),
        ];
        FlatParams::new(values, layout).expect("layout matches values")
    }

    /// Inverse of [`DenseReps::pack`].
    pub fn unpack(flat: &FlatParams) -> Result<Self> {
        let names: Vec<&str> = flat.layout().iter().map(|(s, _)| s.as_str()).collect();
        if names != BLOCKS {
            return Err(Error::Shape(format!("unexpected layout {names:?}")));
        }
        let block = |k: usize| -> Result<Array2<f64>> {
            let (vals, shape) = flat.block(k);
            Array2::from_shape_vec((shape[0], shape[1]), vals.to_vec()).map_err(|e| Error::Shape(e.to_string()))
        };
        let (zs, _) = flat.block(4);
        Self::new(block(0)?, block(1)?, block(2)?, block(3)?, Array1::from(zs.to_vec()))
    }

    /// Overwrites the blocks from a flat slice laid out as by [`DenseReps::pack`].
    pub fn assign_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_params(), "flat length");
        let mut it = values.iter().copied();
        for x in self
            .u
            .iter_mut()
            .chain(self.z.iter_mut())
            .chain(self.w.iter_mut())
            .chain(self.v.iter_mut())
            .chain(self.z_start.iter_mut())
        {
            *x = it.next().expect("length checked");
        }
    }

    pub fn to_flat_vec(&self) -> Vec<f64> {
        self.u.iter().chain(&self.z).chain(&self.w).chain(&self.v).chain(&self.z_start).copied().collect()
    }

    pub fn num_params(&self) -> usize {
        self.u.len() + self.z.len() + self.w.len() + self.v.len() + self.z_start.len()
    }

    /// Logits of `A`: `(Z Uᵀ)_ij = z_i · u_j`.
    pub fn transition_logits(&self) -> Array2<f64> {
        self.z.dot(&self.u.t())
    }

    /// Logits of `B`: `(W Vᵀ)_ij = w_i · v_j`.
    pub fn emission_logits(&self) -> Array2<f64> {
        self.w.dot(&self.v.t())
    }

    /// Logits of `π`: `u_i · z_start`.
    pub fn start_logits(&self) -> Array1<f64> {
        self.u.dot(&self.z_start)
    }
}

/// Draws every entry i.i.d. from the standard normal distribution.
pub fn init_reps<R: Rng + ?Sized>(n: usize, m: usize, l: usize, rng: &mut R) -> Result<DenseReps> {
    if n == 0 || m == 0 || l == 0 {
        return Err(Error::InvalidArgument(format!("n, m, l must be positive (got {n}, {m}, {l})")));
    }
    let mut gauss = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || rng.sample::<f64, _>(StandardNormal));
    let u = gauss(n, l);
    let z = gauss(n, l);
    let w = gauss(n, l);
    let v = gauss(m, l);
    let z_start = gauss(1, l).into_shape_with_order(l).expect("1×l reshapes to l");
    Ok(DenseReps { u, z, w, v, z_start })
}

/// Builds `(A, B, π)` from the representations.
pub fn materialize(reps: &DenseReps) -> Result<HmmParams> {
    reps.validate()?;
    let a = row_softmax(&reps.transition_logits())?;
    let b = row_softmax(&reps.emission_logits())?;
    let pi = softmax(&reps.start_logits())?;
    HmmParams::new(a, b, pi)
}

/// Degrees of freedom of a standard HMM and a DenseHMM of the same size,
/// and the state count that gives a standard HMM roughly the dense budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DofReport {
    pub n: usize,
    pub m: usize,
    pub l: usize,
    /// `n² + n(m − 1) − 1`
    pub dof_standard: u64,
    /// `l(3n + m + 1)`
    pub dof_dense: u64,
    /// Positive root of `x² + x(m − 1) − 1 = dof_dense`, rounded, at least 1.
    pub n_fair: usize,
}

pub fn dof_report(n: usize, m: usize, l: usize) -> Result<DofReport> {
    if n == 0 || m == 0 || l == 0 {
        return Err(Error::InvalidArgument(format!("n, m, l must be positive (got {n}, {m}, {l})")));
    }
    let (nu, mu, lu) = (n as u64, m as u64, l as u64);
    let dof_standard = nu * nu + nu * (mu - 1) - 1;
    let dof_dense = lu * (3 * nu + mu + 1);
    let b = (m - 1) as f64;
    let root = (-b + (b * b + 4.0 * (dof_dense as f64 + 1.0)).sqrt()) / 2.0;
    let n_fair = (root.round() as usize).max(1);
    Ok(DofReport { n, m, l, dof_standard, dof_dense, n_fair })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn init_shapes_and_determinism() {
        let r = init_reps(3, 3, 2, &mut crate::seeded_rng(1)).unwrap();
        assert_eq!(r.u.dim(), (3, 2));
        assert_eq!(r.z.dim(), (3, 2));
        assert_eq!(r.w.dim(), (3, 2));
        assert_eq!(r.v.dim(), (3, 2));
        assert_eq!(r.z_start.len(), 2);
        assert_eq!(r, init_reps(3, 3, 2, &mut crate::seeded_rng(1)).unwrap());
        assert!(init_reps(0, 3, 2, &mut crate::seeded_rng(1)).is_err());
    }

    #[test]
    fn init_moments() {
        // four 5000×5 blocks plus z_start: just over 10⁵ draws
        let r = init_reps(5000, 5000, 5, &mut crate::seeded_rng(8)).unwrap();
        let all = r.to_flat_vec();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(all.len() >= 100_000);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn zero_reps_materialize_uniform() {
        let p = materialize(&DenseReps::zeros(3, 4, 2)).unwrap();
        assert!(p.a().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert!(p.b().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert!(p.pi().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn zero_outgoing_vectors_give_identical_rows() {
        let mut r = init_reps(4, 2, 3, &mut crate::seeded_rng(2)).unwrap();
        r.z.fill(0.0);
        let p = materialize(&r).unwrap();
        for i in 1..4 {
            assert_eq!(p.a().row(i), p.a().row(0));
        }
    }

    #[test]
    fn hand_computed_transition() {
        let r = DenseReps::new(
            array![[1.0], [0.0]],
            array![[1.0], [1.0]],
            array![[0.0], [0.0]],
            array![[0.0]],
            array![0.0],
        )
        .unwrap();
        let a = materialize(&r).unwrap().a().clone();
        let e = std::f64::consts::E;
        for i in 0..2 {
            assert_abs_diff_eq!(a[[i, 0]], e / (e + 1.0), epsilon = 1e-15);
            assert_abs_diff_eq!(a[[i, 1]], 1.0 / (e + 1.0), epsilon = 1e-15);
        }
        assert_abs_diff_eq!(a[[0, 0]], 0.731, epsilon = 1e-3);
    }

    #[test]
    fn rejects_bad_reps() {
        let mut r = DenseReps::zeros(2, 2, 2);
        r.u[[0, 0]] = f64::NAN;
        assert!(matches!(materialize(&r), Err(Error::NonFinite(_))));
        let bad = DenseReps::new(
            Array2::zeros((2, 2)),
            Array2::zeros((2, 3)),
            Array2::zeros((2, 2)),
            Array2::zeros((2, 2)),
            Array1::zeros(2),
        );
        assert!(matches!(bad, Err(Error::Shape(_))));
    }

    #[test]
    fn dof_arithmetic() {
        let d = dof_report(5, 10, 2).unwrap();
        assert_eq!(d.dof_standard, 69);
        assert_eq!(d.dof_dense, 52);
        let d = dof_report(10, 19, 5).unwrap();
        assert_eq!(d.dof_dense, 250);
        assert_eq!(d.n_fair, 9);
        assert_eq!(dof_report(1, 1, 1).unwrap().dof_standard, 0);
    }

    #[test]
    fn dof_crossover_on_grid() {
        for n in 1..15usize {
            let m = n;
            for l in 1..30usize {
                let d = dof_report(n, m, l).unwrap();
                let bound = (n * n + n * (m - 1) - 1) as f64 / (3 * n + m + 1) as f64;
                assert_eq!(d.dof_dense < d.dof_standard, (l as f64) < bound, "n={n} l={l}");
            }
        }
    }

    proptest! {
        #[test]
        fn pack_round_trips(seed in 0u64..1000, n in 1usize..5, m in 1usize..5, l in 1usize..4) {
            let r = init_reps(n, m, l, &mut crate::seeded_rng(seed)).unwrap();
            let flat = r.pack();
            prop_assert_eq!(flat.values().len(), r.num_params());
            prop_assert_eq!(DenseReps::unpack(&flat).unwrap(), r.clone());
            let mut s = DenseReps::zeros(n, m, l);
            s.assign_flat(&r.to_flat_vec());
            prop_assert_eq!(s, r);
        }

        #[test]
        fn materialize_is_padding_invariant(seed in 0u64..1000, extra in 1usize..3) {
            let r = init_reps(3, 4, 2, &mut crate::seeded_rng(seed)).unwrap();
            let p = materialize(&r).unwrap();
            let q = materialize(&r.pad(extra)).unwrap();
            for (x, y) in p.a().iter().chain(p.b().iter()).chain(p.pi().iter())
                .zip(q.a().iter().chain(q.b().iter()).chain(q.pi().iter())) {
                prop_assert!((x - y).abs() <= 1e-15);
            }
        }

        #[test]
        fn materialized_rows_sum_to_one(seed in 0u64..1000, n in 1usize..7, m in 1usize..7, l in 1usize..5) {
            let mut r = init_reps(n, m, l, &mut crate::seeded_rng(seed)).unwrap();
            // stretch the logits to exercise saturation
            r.u *= 4.0;
            let p = materialize(&r).unwrap();
            for row in p.a().as_array().rows().into_iter().chain(p.b().as_array().rows()) {
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            }
            prop_assert!((p.pi().sum() - 1.0).abs() < 1e-12);
        }
    }
}
