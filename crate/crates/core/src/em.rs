//! EM training: classical Baum-Welch and DenseHMM EM with a gradient M-step.
//!
//! Both trainers share the E-step, which reduces every training sequence to
//! three sufficient statistics (see [`AggregateStats`]). The M-step objective
//!
//! ```text
//! Σ_ij c_ij log A_ij + Σ_ij d_ij log B_ij + Σ_i g_i log π_i
//! ```
//!
//! has a closed-form maximizer for free stochastic matrices. Under the dense
//! parameterization the normalization constraints disappear and the same
//! objective becomes the unconstrained function [`dense_lagrangian`], which
//! is climbed with guarded Adam steps.

use std::io::Write;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::corpus::SequenceDataset;
use crate::dense::{init_reps, materialize, DenseReps};
use crate::hmm::{forward_backward, HmmParams};
use crate::optim::{guarded_adam_step, AdamConfig, AdamState};
use crate::stochastic::{log_sum_exp, sample_dirichlet_rows, ProbVector, StochasticMatrix};
use crate::{Error, Result};

/// Expected counts summed over all training sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateStats {
    /// `c_ij = Σ_seq Σ_t P(X_t = i, X_{t+1} = j | o)`, `n × n`.
    pub xi_sum: Array2<f64>,
    /// `d_ij = Σ_seq Σ_{t: o_t = j} P(X_t = i | o)`, `n × m`.
    pub gamma_obs_sum: Array2<f64>,
    /// `g_i = Σ_seq P(X_1 = i | o)`.
    pub gamma1_sum: Array1<f64>,
}

impl AggregateStats {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self { xi_sum: Array2::zeros((n, n)), gamma_obs_sum: Array2::zeros((n, m)), gamma1_sum: Array1::zeros(n) }
    }

    pub fn n_states(&self) -> usize {
        self.xi_sum.nrows()
    }

    pub fn n_symbols(&self) -> usize {
        self.gamma_obs_sum.ncols()
    }

    fn check_shape(&self, reps: &DenseReps) -> Result<()> {
        let n = self.n_states();
        if self.xi_sum.ncols() != n
            || self.gamma_obs_sum.nrows() != n
            || self.gamma1_sum.len() != n
            || reps.n_states() != n
            || reps.n_symbols() != self.n_symbols()
        {
            return Err(Error::Shape(format!(
                "statistics for n={n}, m={} do not match representations with n={}, m={}",
                self.n_symbols(),
                reps.n_states(),
                reps.n_symbols()
            )));
        }
        Ok(())
    }
}

/// E-step over a dataset. Returns the summed statistics and the total
/// log-likelihood.
pub fn accumulate_stats(params: &HmmParams, train: &SequenceDataset) -> Result<(AggregateStats, f64)> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let (n, m) = (params.n_states(), params.n_symbols());
    if train.num_symbols() > m {
        return Err(Error::Shape(format!("data has {} symbols, model {m}", train.num_symbols())));
    }
    let mut stats = AggregateStats::zeros(n, m);
    let mut total = 0.0;
    for (k, seq) in train.sequences().iter().enumerate() {
        let post = forward_backward(params, seq).map_err(|e| match e {
            Error::ImpossibleSequence { position } => Error::ImpossibleDatasetSequence { sequence: k, position },
            other => other,
        })?;
        stats.xi_sum += &post.xi.sum_axis(Axis(0));
        for (t, &o) in seq.iter().enumerate() {
            let mut col = stats.gamma_obs_sum.column_mut(o as usize);
            col += &post.gamma.row(t);
        }
        stats.gamma1_sum += &post.gamma.row(0);
        total += post.log_likelihood;
    }
    Ok((stats, total))
}

fn normalize_or_uniform(counts: &Array2<f64>) -> Result<StochasticMatrix> {
    let c = counts.ncols();
    let mut out = counts.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        } else {
            row.fill(1.0 / c as f64);
        }
    }
    StochasticMatrix::new(out)
}

/// Closed-form M-step: row-normalize the expected counts. States never
/// visited get a uniform row.
pub fn m_step_standard(stats: &AggregateStats) -> Result<HmmParams> {
    let a = normalize_or_uniform(&stats.xi_sum)?;
    let b = normalize_or_uniform(&stats.gamma_obs_sum)?;
    let g = stats.gamma1_sum.clone().insert_axis(Axis(0));
    let pi = normalize_or_uniform(&g)?.into_inner().row(0).to_owned();
    HmmParams::new(a, b, ProbVector::new(pi)?)
}

/// `Σ c log A + Σ d log B + Σ g log π` evaluated on explicit parameters,
/// with `0 · log 0 = 0`.
pub fn expected_complete_log_likelihood(params: &HmmParams, stats: &AggregateStats) -> f64 {
    let term = |w: f64, p: f64| if w == 0.0 { 0.0 } else { w * p.ln() };
    let a: f64 = stats.xi_sum.iter().zip(params.a().iter()).map(|(&w, &p)| term(w, p)).sum();
    let b: f64 = stats.gamma_obs_sum.iter().zip(params.b().iter()).map(|(&w, &p)| term(w, p)).sum();
    let pi: f64 = stats.gamma1_sum.iter().zip(params.pi().iter()).map(|(&w, &p)| term(w, p)).sum();
    a + b + pi
}

/// `Σ_ij w_ij logit_ij − Σ_i (Σ_j w_ij) lse_k(logit_ik)`.
fn softmax_objective(weights: &Array2<f64>, logits: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (w, x) in weights.rows().into_iter().zip(logits.rows()) {
        let lse = log_sum_exp(&x.to_vec());
        total += w.dot(&x) - w.sum() * lse;
    }
    total
}

/// The M-step objective under the dense parameterization.
pub fn dense_lagrangian(reps: &DenseReps, stats: &AggregateStats) -> Result<f64> {
    stats.check_shape(reps)?;
    let start = reps.start_logits().insert_axis(Axis(0));
    let g = stats.gamma1_sum.clone().insert_axis(Axis(0));
    Ok(softmax_objective(&stats.xi_sum, &reps.transition_logits())
        + softmax_objective(&stats.gamma_obs_sum, &reps.emission_logits())
        + softmax_objective(&g, &start))
}

/// Gradient of [`dense_lagrangian`] with respect to every block.
///
/// With `R_A = c − diag(Σ_j c_ij) A`, `R_B = d − diag(Σ_j d_ij) B` and
/// `r_π = g − (Σ g) π`:
///
/// ```text
/// ∂Z = R_A U          ∂W = R_B V          ∂z_start = Uᵀ r_π
/// ∂U = R_Aᵀ Z + r_π z_startᵀ              ∂V = R_Bᵀ W
/// ```
pub fn dense_lagrangian_grad(reps: &DenseReps, stats: &AggregateStats) -> Result<DenseReps> {
    stats.check_shape(reps)?;
    let params = materialize(reps)?;
    let residual = |w: &Array2<f64>, p: &Array2<f64>| -> Array2<f64> {
        let totals = w.sum_axis(Axis(1)).insert_axis(Axis(1));
        w - &(p * &totals)
    };
    let r_a = residual(&stats.xi_sum, params.a());
    let r_b = residual(&stats.gamma_obs_sum, params.b());
    let r_pi = &stats.gamma1_sum - &(params.pi().as_array() * stats.gamma1_sum.sum());

    let mut u = r_a.t().dot(&reps.z);
    let r_pi_col = r_pi.view().insert_axis(Axis(1));
    let zs_row = reps.z_start.view().insert_axis(Axis(0));
    u += &r_pi_col.dot(&zs_row);
    Ok(DenseReps {
        u,
        z: r_a.dot(&reps.u),
        w: r_b.dot(&reps.v),
        v: r_b.t().dot(&reps.w),
        z_start: reps.u.t().dot(&r_pi),
    })
}

/// Result of one guarded gradient M-step.
#[derive(Debug, Clone)]
pub struct MStepOutcome {
    pub reps: DenseReps,
    /// Lagrangian at entry followed by its value after every step.
    pub values: Vec<f64>,
}

/// Climbs [`dense_lagrangian`] for `steps` guarded Adam steps from `reps`.
pub fn dense_m_step(reps: &DenseReps, stats: &AggregateStats, steps: usize, lr: f64) -> Result<MStepOutcome> {
    let mut current = reps.clone();
    let mut x = reps.to_flat_vec();
    let mut value = dense_lagrangian(reps, stats)?;
    let mut values = Vec::with_capacity(steps + 1);
    values.push(value);
    let mut state = AdamState::new(x.len(), AdamConfig::with_lr(lr));
    let mut scratch = reps.clone();
    for _ in 0..steps {
        current.assign_flat(&x);
        let grad: Vec<f64> = dense_lagrangian_grad(&current, stats)?.to_flat_vec().into_iter().map(|g| -g).collect();
        let neg = guarded_adam_step(&mut x, -value, &grad, &mut state, |trial| {
            scratch.assign_flat(trial);
            dense_lagrangian(&scratch, stats).map(|v| -v)
        })?;
        value = -neg;
        values.push(value);
    }
    current.assign_flat(&x);
    Ok(MStepOutcome { reps: current, values })
}

/// Settings shared by the EM trainers.
#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    /// Hidden-state count.
    pub n: usize,
    /// Representation length (dense trainer only).
    pub l: usize,
    pub max_em_iters: usize,
    /// Stop once the relative log-likelihood improvement drops below this.
    pub em_tol: f64,
    /// Guarded Adam steps per dense M-step.
    pub mstep_steps: usize,
    pub mstep_lr: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { n: 3, l: 3, max_em_iters: 100, em_tol: 1e-6, mstep_steps: 100, mstep_lr: 0.01, seed: 0 }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.l == 0 || self.max_em_iters == 0 {
            return Err(Error::InvalidArgument("n, l and max_em_iters must be positive".into()));
        }
        if !(self.em_tol > 0.0) || !(self.mstep_lr > 0.0) {
            return Err(Error::InvalidArgument("em_tol and mstep_lr must be positive".into()));
        }
        Ok(())
    }
}

/// One row of a convergence trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmTraceRow {
    pub iteration: usize,
    pub log_likelihood: f64,
    /// Dense Lagrangian after the M-step of this iteration.
    pub lagrangian: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StandardFit {
    pub params: HmmParams,
    pub trace: Vec<EmTraceRow>,
}

#[derive(Debug, Clone)]
pub struct DenseEmFit {
    pub reps: DenseReps,
    pub params: HmmParams,
    pub trace: Vec<EmTraceRow>,
    /// M-steps that ended at a lower Lagrangian than they started from.
    /// The guard makes this zero in exact arithmetic.
    pub non_improving_msteps: usize,
}

fn converged(prev: Option<f64>, ll: f64, tol: f64) -> bool {
    match prev {
        Some(p) => (ll - p) / p.abs().max(f64::MIN_POSITIVE) < tol,
        None => false,
    }
}

/// Baum-Welch from a random `Dirichlet(1)` initialization.
pub fn baum_welch_fit<R: Rng + ?Sized>(train: &SequenceDataset, cfg: &EmConfig, rng: &mut R) -> Result<StandardFit> {
    cfg.validate()?;
    let (n, m) = (cfg.n, train.num_symbols());
    let a = sample_dirichlet_rows(n, n, 1.0, rng)?;
    let b = sample_dirichlet_rows(n, m, 1.0, rng)?;
    let pi = sample_dirichlet_rows(1, n, 1.0, rng)?.into_inner().row(0).to_owned();
    let params = HmmParams::new(a, b, ProbVector::new(pi)?)?;
    baum_welch_from(train, params, cfg.max_em_iters, cfg.em_tol)
}

/// Baum-Welch from given initial parameters.
pub fn baum_welch_from(train: &SequenceDataset, init: HmmParams, max_iters: usize, tol: f64) -> Result<StandardFit> {
    let mut params = init;
    let mut trace = Vec::new();
    let mut prev = None;
    for iteration in 0..=max_iters {
        let (stats, ll) = accumulate_stats(&params, train)?;
        trace.push(EmTraceRow { iteration, log_likelihood: ll, lagrangian: None });
        if iteration == max_iters || converged(prev, ll, tol) {
            break;
        }
        prev = Some(ll);
        params = m_step_standard(&stats)?;
    }
    Ok(StandardFit { params, trace })
}

/// DenseHMM EM: unchanged E-step, guarded Adam ascent on the dense
/// Lagrangian as M-step, warm-started from the previous representations.
pub fn dense_em_fit<R: Rng + ?Sized>(train: &SequenceDataset, cfg: &EmConfig, rng: &mut R) -> Result<DenseEmFit> {
    cfg.validate()?;
    let reps = init_reps(cfg.n, train.num_symbols(), cfg.l, rng)?;
    dense_em_from(train, reps, cfg)
}

/// DenseHMM EM from given initial representations.
pub fn dense_em_from(train: &SequenceDataset, init: DenseReps, cfg: &EmConfig) -> Result<DenseEmFit> {
    let mut reps = init;
    let mut trace: Vec<EmTraceRow> = Vec::new();
    let mut prev = None;
    let mut non_improving = 0;
    for iteration in 0..=cfg.max_em_iters {
        let params = materialize(&reps)?;
        let (stats, ll) = accumulate_stats(&params, train)?;
        if iteration == cfg.max_em_iters || converged(prev, ll, cfg.em_tol) {
            trace.push(EmTraceRow { iteration, log_likelihood: ll, lagrangian: None });
            break;
        }
        prev = Some(ll);
        let out = dense_m_step(&reps, &stats, cfg.mstep_steps, cfg.mstep_lr)?;
        let (first, last) = (out.values[0], *out.values.last().expect("nonempty"));
        if last < first {
            non_improving += 1;
            log::warn!("dense M-step {iteration} lowered the Lagrangian from {first} to {last}");
        }
        trace.push(EmTraceRow { iteration, log_likelihood: ll, lagrangian: Some(last) });
        reps = out.reps;
    }
    let params = materialize(&reps)?;
    Ok(DenseEmFit { reps, params, trace, non_improving_msteps: non_improving })
}

/// Writes a trace as CSV with columns
/// `iteration,total_log_likelihood,lagrangian` (blank when absent).
pub fn write_trace_csv<W: Write>(trace: &[EmTraceRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "iteration,total_log_likelihood,lagrangian")?;
    for row in trace {
        match row.lagrangian {
            Some(l) => writeln!(out, "{},{},{}", row.iteration, row.log_likelihood, l)?,
            None => writeln!(out, "{},{},", row.iteration, row.log_likelihood)?,
        }
    }
    Ok(())
}
