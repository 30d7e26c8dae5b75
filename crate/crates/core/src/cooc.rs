//! Co-occurrence matrices and direct co-occurrence training.
//!
//! For a stationary HMM the joint law of two consecutive symbols is
//! `Ω = Bᵀ Θ B` with `Θ_kl = π_k A_kl`. The direct trainer fits dense
//! representations by minimizing `‖Ω_target − Ω_dense‖²_F`, where `π` is
//! the stationary distribution of the current `A`. The trainer differentiates
//! through `π` with an adjoint solve; a frozen-`π` gradient, which treats
//! `π` as a constant, is also provided.

use std::io::Write;
use std::ops::Deref;

use ndarray::{Array1, Array2, Axis};

use crate::corpus::SequenceDataset;
use crate::dense::{init_reps, materialize, DenseReps};
use crate::hmm::HmmParams;
use crate::optim::{guarded_adam_step, AdamConfig, AdamState};
use crate::stochastic::{row_softmax, solve_linear, stationary_distribution, ProbVector};
use crate::{Error, Result};

/// Default Adam learning rate of [`direct_fit`].
pub const DEFAULT_LR: f64 = 0.05;

/// Default number of steps of [`direct_fit`].
pub const DEFAULT_STEPS: usize = 5000;

/// Tolerance on `π` being stationary for [`analytic_cooc`].
pub const STATIONARITY_TOL: f64 = 1e-8;

/// An `m × m` joint distribution over consecutive symbol pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CoocMatrix(Array2<f64>);

impl CoocMatrix {
    /// Validates entries in `[0, 1]` summing to one within `1e-10`.
    pub fn new(m: Array2<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.is_empty() {
            return Err(Error::Shape(format!("co-occurrence matrix must be square, got {:?}", m.dim())));
        }
        if m.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::NotStochastic { what: "co-occurrence matrix", reason: "entry outside [0, 1]".into() });
        }
        let s = m.sum();
        if (s - 1.0).abs() > 1e-10 {
            return Err(Error::NotStochastic { what: "co-occurrence matrix", reason: format!("entries sum to {s}") });
        }
        Ok(Self(m))
    }

    pub fn uniform(m: usize) -> Self {
        Self(Array2::from_elem((m, m), 1.0 / (m * m) as f64))
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// Writes the matrix as headerless CSV, one row per line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for row in self.0.rows() {
            let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Parses the CSV produced by [`CoocMatrix::write_csv`].
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse { line: k + 1, message: e.to_string() })?;
            rows.push(row);
        }
        let m = rows.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("co-occurrence CSV is not square".into()));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Self::new(Array2::from_shape_vec((m, m), flat).map_err(|e| Error::Shape(e.to_string()))?)
    }
}

impl Deref for CoocMatrix {
    type Target = Array2<f64>;
    fn deref(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Relative frequencies of adjacent symbol pairs, counted within sequences
/// only.
pub fn empirical_cooc(ds: &SequenceDataset) -> Result<CoocMatrix> {
    let counts = pair_counts(ds);
    let total = counts.sum();
    if total == 0.0 {
        return Err(Error::NoPairs);
    }
    CoocMatrix::new(counts / total)
}

/// Raw adjacent-pair counts.
pub fn pair_counts(ds: &SequenceDataset) -> Array2<f64> {
    let m = ds.num_symbols();
    let mut counts = Array2::zeros((m, m));
    for seq in ds.sequences() {
        for w in seq.windows(2) {
            counts[[w[0] as usize, w[1] as usize]] += 1.0;
        }
    }
    counts
}

/// `Ω = Bᵀ diag(π) A B` for an explicit `π`, without any stationarity check.
fn cooc_with_pi(a: &Array2<f64>, b: &Array2<f64>, pi: &Array1<f64>) -> Array2<f64> {
    let theta = a * &pi.view().insert_axis(Axis(1));
    b.t().dot(&theta.dot(b))
}

fn clamp_cooc(mut omega: Array2<f64>) -> Result<CoocMatrix> {
    // rounding can leave entries a hair below zero
    omega.mapv_inplace(|x| x.clamp(0.0, 1.0));
    CoocMatrix::new(omega)
}

/// Analytic co-occurrence matrix of a stationary HMM.
pub fn analytic_cooc(params: &HmmParams) -> Result<CoocMatrix> {
    let residual = params.stationarity_residual();
    if residual > STATIONARITY_TOL {
        return Err(Error::NotStationary { residual });
    }
    clamp_cooc(cooc_with_pi(params.a(), params.b(), params.pi()))
}

/// Co-occurrence matrix of the DenseHMM defined by `reps`, with `π` set to
/// the stationary distribution of the materialized `A`.
pub fn dense_cooc(reps: &DenseReps) -> Result<(CoocMatrix, ProbVector)> {
    reps.validate()?;
    let a = row_softmax(&reps.transition_logits())?;
    let b = row_softmax(&reps.emission_logits())?;
    let pi = stationary_distribution(&a)?;
    Ok((clamp_cooc(cooc_with_pi(&a, &b, &pi))?, pi))
}

/// The materialized DenseHMM with its stationary `π`.
pub fn stationary_params(reps: &DenseReps) -> Result<HmmParams> {
    let p = materialize(reps)?;
    let pi = stationary_distribution(p.a())?;
    p.with_pi(pi)
}

fn check_target(reps: &DenseReps, target: &CoocMatrix) -> Result<()> {
    if target.size() != reps.n_symbols() {
        return Err(Error::Shape(format!("target has {} symbols, model {}", target.size(), reps.n_symbols())));
    }
    Ok(())
}

fn frobenius_sq(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `‖target − Ω_dense(reps)‖²_F`.
pub fn cooc_loss(reps: &DenseReps, target: &CoocMatrix) -> Result<f64> {
    check_target(reps, target)?;
    let (omega, _) = dense_cooc(reps)?;
    Ok(frobenius_sq(target, &omega))
}

/// The loss with `π` held fixed instead of recomputed from `A`.
pub fn cooc_loss_frozen(reps: &DenseReps, target: &CoocMatrix, pi: &Array1<f64>) -> Result<f64> {
    check_target(reps, target)?;
    let a = row_softmax(&reps.transition_logits())?;
    let b = row_softmax(&reps.emission_logits())?;
    Ok(frobenius_sq(target, &cooc_with_pi(&a, &b, pi)))
}

/// Backpropagates a gradient w.r.t. a row-softmax output to its logits.
fn softmax_backward(p: &Array2<f64>, grad_p: &Array2<f64>) -> Array2<f64> {
    let inner = (p * grad_p).sum_axis(Axis(1)).insert_axis(Axis(1));
    p * &(grad_p - &inner)
}

/// Gradient of [`cooc_loss_frozen`] w.r.t. `U, Z, W, V`; the `z_start`
/// block is always zero.
pub fn cooc_loss_grad_frozen(reps: &DenseReps, target: &CoocMatrix, pi: &Array1<f64>) -> Result<DenseReps> {
    cooc_grad_impl(reps, target, pi, false)
}

/// Gradient of [`cooc_loss`] including the dependence of the stationary
/// `π` on `A`.
///
/// With `G_π = rowsum(G_Θ ∘ A)` the adjoint `λ` solves
/// `(I − A + 1πᵀ) λ = G_π − (πᵀG_π) 1`, and `π λᵀ` is added to `G_A`.
pub fn cooc_loss_grad_exact(reps: &DenseReps, target: &CoocMatrix) -> Result<DenseReps> {
    let a = row_softmax(&reps.transition_logits())?;
    let pi = stationary_distribution(&a)?;
    cooc_grad_impl(reps, target, &pi, true)
}

fn cooc_grad_impl(reps: &DenseReps, target: &CoocMatrix, pi: &Array1<f64>, through_pi: bool) -> Result<DenseReps> {
    check_target(reps, target)?;
    let a = row_softmax(&reps.transition_logits())?.into_inner();
    let b = row_softmax(&reps.emission_logits())?.into_inner();
    let pi_col = pi.view().insert_axis(Axis(1));
    let theta = &a * &pi_col;
    let omega = b.t().dot(&theta.dot(&b));
    let g_omega = (omega - target.as_array()) * 2.0;

    // Ω = Bᵀ Θ B
    let g_b = theta.dot(&b).dot(&g_omega.t()) + theta.t().dot(&b).dot(&g_omega);
    let g_theta = b.dot(&g_omega).dot(&b.t());
    let mut g_a = &g_theta * &pi_col;
    if through_pi {
        let n = a.nrows();
        let g_pi = (&g_theta * &a).sum_axis(Axis(1));
        let c = pi.dot(&g_pi);
        let mut m = Array2::<f64>::eye(n) - &a;
        for i in 0..n {
            for j in 0..n {
                m[[i, j]] += pi[j];
            }
        }
        let lambda = solve_linear(m, g_pi - c).ok_or(Error::NonFinite("stationary adjoint"))?;
        g_a += &(&pi_col * &lambda.view().insert_axis(Axis(0)));
    }

    let g_logits_a = softmax_backward(&a, &g_a);
    let g_logits_b = softmax_backward(&b, &g_b);
    Ok(DenseReps {
        u: g_logits_a.t().dot(&reps.z),
        z: g_logits_a.dot(&reps.u),
        w: g_logits_b.dot(&reps.v),
        v: g_logits_b.t().dot(&reps.w),
        z_start: Array1::zeros(reps.repr_len()),
    })
}

/// Gradient of [`cooc_loss`] with `π` frozen at the stationary distribution
/// of the current `A`.
pub fn cooc_loss_grad(reps: &DenseReps, target: &CoocMatrix) -> Result<DenseReps> {
    let a = row_softmax(&reps.transition_logits())?;
    let pi = stationary_distribution(&a)?;
    cooc_loss_grad_frozen(reps, target, &pi)
}

/// Output of [`direct_fit`].
#[derive(Debug, Clone)]
pub struct DirectFit {
    pub reps: DenseReps,
    /// Materialized `A`, `B` with the stationary `π`.
    pub params: HmmParams,
    /// Loss before the first step followed by the loss after every step.
    pub loss_trace: Vec<f64>,
}

impl DirectFit {
    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("trace holds the initial loss")
    }
}

/// Fits a DenseHMM with `n` states and representation length `l` to a
/// target co-occurrence matrix by guarded Adam descent on
/// [`cooc_loss_grad_exact`].
pub fn direct_fit(target: &CoocMatrix, n: usize, l: usize, steps: usize, lr: f64, seed: u64) -> Result<DirectFit> {
    let m = target.size();
    let reps = init_reps(n, m, l, &mut crate::seeded_rng(seed))?;
    direct_fit_from(target, reps, steps, lr)
}

/// [`direct_fit`] from given initial representations.
pub fn direct_fit_from(target: &CoocMatrix, init: DenseReps, steps: usize, lr: f64) -> Result<DirectFit> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    check_target(&init, target)?;
    let mut current = init;
    let mut x = current.to_flat_vec();
    let mut loss = cooc_loss(&current, target)?;
    let mut loss_trace = Vec::with_capacity(steps + 1);
    loss_trace.push(loss);
    let mut state = AdamState::new(x.len(), AdamConfig::with_lr(lr));
    let mut scratch = current.clone();
    for _ in 0..steps {
        current.assign_flat(&x);
        let grad = cooc_loss_grad_exact(&current, target)?.to_flat_vec();
        loss = guarded_adam_step(&mut x, loss, &grad, &mut state, |trial| {
            scratch.assign_flat(trial);
            cooc_loss(&scratch, target)
        })?;
        loss_trace.push(loss);
    }
    current.assign_flat(&x);
    let params = stationary_params(&current)?;
    Ok(DirectFit { reps: current, params, loss_trace })
}

/// Writes `step,loss` CSV.
pub fn write_loss_csv<W: Write>(trace: &[f64], mut out: W) -> std::io::Result<()> {
    writeln!(out, "step,loss")?;
    for (k, l) in trace.iter().enumerate() {
        writeln!(out, "{k},{l}")?;
    }
    Ok(())
}
