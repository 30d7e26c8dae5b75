//! Approximating stochastic matrices by kernels of a low-rank product.
//!
//! A ground-truth `A_gt` (n×n) is approximated by `k(UZ)` with `U` n×l and
//! `Z` l×n, where `k` is either the row-wise softmax or normAbsLin
//! (`|M_ij| / Σ_k |M_ik|`). Note the orientation: here `Z` is l×n and the
//! product is a plain matrix product, unlike the per-row layout of
//! [`DenseReps`](crate::DenseReps). The loss is `‖k(UZ) − A_gt‖_F / ‖A_gt‖_F`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::optim::{AdamConfig, AdamState};
use crate::stats::{quartiles, Quartiles};
use crate::stochastic::{norm_abs_lin, row_softmax, sample_dirichlet_rows, StochasticMatrix};
use crate::{derive_seed, seeded_rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kernel {
    Softmax,
    NormAbsLin,
}

impl Kernel {
    pub const ALL: [Kernel; 2] = [Kernel::Softmax, Kernel::NormAbsLin];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Softmax => "softmax",
            Kernel::NormAbsLin => "normAbsLin",
        }
    }

    pub fn apply(self, m: &Array2<f64>) -> Result<StochasticMatrix> {
        match self {
            Kernel::Softmax => row_softmax(m),
            Kernel::NormAbsLin => norm_abs_lin(m),
        }
    }

    /// Pulls a gradient w.r.t. the kernel output `p = k(m)` back to `m`.
    fn backward(self, m: &Array2<f64>, p: &Array2<f64>, grad_p: &Array2<f64>) -> Array2<f64> {
        let inner = (p * grad_p).sum_axis(Axis(1)).insert_axis(Axis(1));
        let centered = grad_p - &inner;
        match self {
            Kernel::Softmax => p * &centered,
            Kernel::NormAbsLin => {
                let sums = m.mapv(f64::abs).sum_axis(Axis(1)).insert_axis(Axis(1));
                // subgradient of |x| at 0 is taken as 0
                let sign = m.mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                sign / &sums * &centered
            }
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kernel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Kernel::Softmax),
            "normAbsLin" | "normabslin" | "norm-abs-lin" => Ok(Kernel::NormAbsLin),
            _ => Err(Error::InvalidArgument(format!("unknown kernel {s:?}"))),
        }
    }
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Normalized Frobenius loss of `k(UZ)` against `a_gt`.
pub fn factor_loss(a_gt: &StochasticMatrix, u: &Array2<f64>, z: &Array2<f64>, kernel: Kernel) -> Result<f64> {
    let approx = kernel.apply(&u.dot(z))?;
    Ok(frobenius(&(approx.as_array() - a_gt.as_array())) / frobenius(a_gt))
}

/// Loss and gradients `(∂U, ∂Z)`.
pub fn factor_loss_grad(
    a_gt: &StochasticMatrix,
    u: &Array2<f64>,
    z: &Array2<f64>,
    kernel: Kernel,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let m = u.dot(z);
    let approx = kernel.apply(&m)?.into_inner();
    let diff = &approx - a_gt.as_array();
    let (d, g) = (frobenius(&diff), frobenius(a_gt));
    if d == 0.0 {
        return Ok((0.0, Array2::zeros(u.dim()), Array2::zeros(z.dim())));
    }
    let grad_approx = diff / (d * g);
    let grad_m = kernel.backward(&m, &approx, &grad_approx);
    Ok((d / g, grad_m.dot(&z.t()), u.t().dot(&grad_m)))
}

/// Result of one factorization fit.
#[derive(Debug, Clone)]
pub struct FactorFit {
    pub u: Array2<f64>,
    pub z: Array2<f64>,
    /// Best loss seen; `u`, `z` attain it.
    pub loss: f64,
}

/// Fits `k(UZ) ≈ a_gt` from a standard Gaussian initialization by `steps`
/// plain Adam steps, keeping the best iterate.
pub fn fit_factorization(
    a_gt: &StochasticMatrix,
    l: usize,
    kernel: Kernel,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<FactorFit> {
    let n = a_gt.rows();
    if a_gt.cols() != n {
        return Err(Error::Shape(format!("ground truth must be square, got {}×{}", n, a_gt.cols())));
    }
    if l == 0 {
        return Err(Error::InvalidArgument("representation length must be positive".into()));
    }
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    let mut rng = seeded_rng(seed);
    let mut u = Array2::from_shape_simple_fn((n, l), || rng.sample::<f64, _>(StandardNormal));
    let mut z = Array2::from_shape_simple_fn((l, n), || rng.sample::<f64, _>(StandardNormal));
    let mut state = AdamState::new(2 * n * l, AdamConfig::with_lr(lr));
    let mut best = FactorFit { u: u.clone(), z: z.clone(), loss: f64::INFINITY };
    let mut grad = Vec::with_capacity(2 * n * l);
    for _ in 0..steps {
        let (loss, gu, gz) = factor_loss_grad(a_gt, &u, &z, kernel)?;
        if loss < best.loss {
            best = FactorFit { u: u.clone(), z: z.clone(), loss };
        }
        grad.clear();
        grad.extend(gu.iter().chain(gz.iter()));
        let step = state.step_direction(&grad)?;
        let (su, sz) = step.split_at(n * l);
        u.iter_mut().zip(su).for_each(|(x, s)| *x -= s);
        z.iter_mut().zip(sz).for_each(|(x, s)| *x -= s);
    }
    let loss = factor_loss(a_gt, &u, &z, kernel)?;
    if loss < best.loss {
        best = FactorFit { u, z, loss };
    }
    Ok(best)
}

/// Configuration of [`run_study`].
#[derive(Debug, Clone, PartialEq)]
pub struct FactorStudyConfig {
    /// `(n, l)` cells.
    pub grid: Vec<(usize, usize)>,
    pub replicas: usize,
    /// Dirichlet concentration of the ground-truth rows.
    pub alpha: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl FactorStudyConfig {
    /// The 12-cell grid of the reference study.
    pub fn table_grid() -> Vec<(usize, usize)> {
        vec![(3, 1), (3, 2), (3, 3), (3, 5), (5, 1), (5, 3), (5, 5), (5, 10), (10, 1), (10, 5), (10, 10), (10, 15)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.grid.iter().any(|&(n, l)| n == 0 || l == 0) {
            return Err(Error::InvalidArgument("grid must be non-empty with positive n and l".into()));
        }
        if self.replicas == 0 {
            return Err(Error::InvalidArgument("replicas must be at least 1".into()));
        }
        if !(self.alpha > 0.0) || !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("alpha and lr must be positive".into()));
        }
        Ok(())
    }
}

impl Default for FactorStudyConfig {
    fn default() -> Self {
        Self { grid: Self::table_grid(), replicas: 10, alpha: 0.1, steps: 10_000, lr: 0.05, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorRecord {
    pub n: usize,
    pub l: usize,
    pub kernel: Kernel,
    pub replica: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorSummary {
    pub n: usize,
    pub l: usize,
    pub kernel: Kernel,
    pub quartiles: Quartiles,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorStudyResult {
    /// Ordered by cell, replica, kernel.
    pub records: Vec<FactorRecord>,
    /// Ordered by cell, kernel.
    pub summary: Vec<FactorSummary>,
}

impl FactorStudyResult {
    pub fn median(&self, n: usize, l: usize, kernel: Kernel) -> Option<f64> {
        self.summary.iter().find(|s| s.n == n && s.l == l && s.kernel == kernel).map(|s| s.quartiles.median)
    }

    pub fn write_records_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "n,l,kernel,replica,loss")?;
        for r in &self.records {
            writeln!(out, "{},{},{},{},{}", r.n, r.l, r.kernel, r.replica, r.loss)?;
        }
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "n,l,kernel,p25,median,p75")?;
        for s in &self.summary {
            let q = s.quartiles;
            writeln!(out, "{},{},{},{},{},{}", s.n, s.l, s.kernel, q.p25, q.median, q.p75)?;
        }
        Ok(())
    }
}

/// Runs every `(cell, replica)` on a pool of `jobs` threads. Within a
/// replica both kernels see the same ground truth and the same initial
/// seed. Results do not depend on `jobs`.
pub fn run_study(cfg: &FactorStudyConfig, jobs: usize) -> Result<FactorStudyResult> {
    cfg.validate()?;
    let tasks: Vec<(usize, usize)> = (0..cfg.grid.len()).flat_map(|c| (0..cfg.replicas).map(move |r| (c, r))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<Vec<FactorRecord>>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(c, r)| {
                let (n, l) = cfg.grid[c];
                let mut rng = seeded_rng(derive_seed(cfg.seed, &[c as u64, r as u64, 0]));
                let a_gt = sample_dirichlet_rows(n, n, cfg.alpha, &mut rng)?;
                let init_seed = derive_seed(cfg.seed, &[c as u64, r as u64, 1]);
                let records = Kernel::ALL
                    .iter()
                    .map(|&kernel| {
                        let fit = fit_factorization(&a_gt, l, kernel, cfg.steps, cfg.lr, init_seed)?;
                        log::debug!("n={n} l={l} {kernel} replica {r}: {:.6}", fit.loss);
                        Ok(FactorRecord { n, l, kernel, replica: r, loss: fit.loss })
                    })
                    .collect();
                log::info!("n={n} l={l} replica {r} done");
                records
            })
            .collect()
    });
    let mut records = Vec::with_capacity(tasks.len() * 2);
    for o in outcomes {
        records.extend(o?);
    }
    let mut summary = Vec::new();
    for &(n, l) in &cfg.grid {
        for kernel in Kernel::ALL {
            let losses: Vec<f64> =
                records.iter().filter(|r| r.n == n && r.l == l && r.kernel == kernel).map(|r| r.loss).collect();
            summary.push(FactorSummary { n, l, kernel, quartiles: quartiles(&losses)? });
        }
    }
    Ok(FactorStudyResult { records, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::check_gradient;
    use ndarray::array;

    fn grad_check(kernel: Kernel, seed: u64) -> f64 {
        let mut rng = seeded_rng(seed);
        let a_gt = sample_dirichlet_rows(4, 4, 1.0, &mut rng).unwrap();
        let x0: Vec<f64> = (0..16).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let split = |x: &[f64]| {
            (
                Array2::from_shape_vec((4, 2), x[..8].to_vec()).unwrap(),
                Array2::from_shape_vec((2, 4), x[8..].to_vec()).unwrap(),
            )
        };
        let f = |x: &[f64]| {
            let (u, z) = split(x);
            factor_loss(&a_gt, &u, &z, kernel).unwrap()
        };
        let g = |x: &[f64]| {
            let (u, z) = split(x);
            let (_, gu, gz) = factor_loss_grad(&a_gt, &u, &z, kernel).unwrap();
            gu.iter().chain(gz.iter()).copied().collect()
        };
        check_gradient(f, g, &x0, 1e-6, 1e-6).unwrap().max_rel_error
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            assert!(grad_check(Kernel::Softmax, seed) < 1e-6);
            assert!(grad_check(Kernel::NormAbsLin, seed) < 1e-6);
        }
    }

    #[test]
    fn uniform_target_is_exact_for_softmax() {
        let fit = fit_factorization(&StochasticMatrix::uniform(4, 4), 1, Kernel::Softmax, 2000, 0.05, 3).unwrap();
        assert!(fit.loss < 1e-6, "loss {}", fit.loss);
    }

    #[test]
    fn exact_factorization_for_norm_abs_lin() {
        let a_gt = sample_dirichlet_rows(3, 3, 0.1, &mut seeded_rng(5)).unwrap();
        let loss = factor_loss(&a_gt, a_gt.as_array(), &Array2::eye(3), Kernel::NormAbsLin).unwrap();
        assert!(loss < 1e-15);
        let fit = fit_factorization(&a_gt, 3, Kernel::NormAbsLin, 10_000, 0.05, 6).unwrap();
        assert!(fit.loss < 0.01, "loss {}", fit.loss);
    }

    #[test]
    fn loss_hand_value() {
        // softmax of zeros is uniform; target the identity
        let a_gt = StochasticMatrix::identity(2);
        let loss = factor_loss(&a_gt, &array![[0.0], [0.0]], &array![[0.0, 0.0]], Kernel::Softmax).unwrap();
        assert!((loss - (4.0 * 0.25f64).sqrt() / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn study_is_independent_of_thread_count() {
        let cfg = FactorStudyConfig { grid: vec![(3, 1), (3, 2)], replicas: 3, steps: 200, ..Default::default() };
        let a = run_study(&cfg, 1).unwrap();
        let b = run_study(&cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 12);
        assert_eq!(a.summary.len(), 4);
        let mut buf = Vec::new();
        a.write_summary_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("n,l,kernel,p25,median,p75\n3,1,softmax,"));
    }

    #[test]
    fn kernel_names_round_trip() {
        for k in Kernel::ALL {
            assert_eq!(k.name().parse::<Kernel>().unwrap(), k);
        }
    }
}
