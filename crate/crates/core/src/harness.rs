//! Evaluation metrics and the replicated four-model experiment.
//!
//! Each `(n, l)` cell is run for a number of replicas. A replica draws fresh
//! data (a new synthetic generator, or a new shuffled split of a corpus),
//! trains every selected model and records the co-occurrence MAD against the
//! ground truth and the normalized test NLL. Replica seeds are derived from
//! the base seed with [`derive_seed`], so results do not depend on the order
//! or parallelism in which replicas run.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::cooc::{analytic_cooc, direct_fit, empirical_cooc, stationary_params, CoocMatrix};
use crate::corpus::{load_sequences, merge_rare_symbols, split_train_test, truncate, SequenceDataset};
use crate::dense::dof_report;
use crate::em::{baum_welch_fit, dense_em_fit, EmConfig};
use crate::hmm::{sample, score_nll_floored, HmmParams};
use crate::stats::{quartiles, Quartiles};
use crate::stochastic::{sample_dirichlet_rows, stationary_distribution};
use crate::{derive_seed, seeded_rng, Error, Result, SeededRng};

/// Mean absolute entry-wise deviation between two co-occurrence matrices.
pub fn cooc_mad(a: &CoocMatrix, b: &CoocMatrix) -> Result<f64> {
    if a.size() != b.size() {
        return Err(Error::Shape(format!("co-occurrence sizes differ: {} vs {}", a.size(), b.size())));
    }
    let total: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / (a.size() * a.size()) as f64)
}

/// A stationary HMM with `m = n` symbols whose `A` and `B` rows are drawn
/// from `Dirichlet(alpha · 1)`.
pub fn build_synthetic_hmm<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Result<HmmParams> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    let a = sample_dirichlet_rows(n, n, alpha, rng)?;
    let b = sample_dirichlet_rows(n, n, alpha, rng)?;
    let pi = stationary_distribution(&a)?;
    HmmParams::new(a, b, pi)
}

/// Samples one sequence from `params` per test sequence, with matching
/// lengths, and counts their adjacent pairs.
pub fn estimate_model_cooc<R: Rng + ?Sized>(
    params: &HmmParams,
    test: &SequenceDataset,
    rng: &mut R,
) -> Result<CoocMatrix> {
    let sequences = sample_like(params, test, rng);
    empirical_cooc(&SequenceDataset::from_indices(sequences, params.n_symbols())?)
}

fn sample_like<R: Rng + ?Sized>(params: &HmmParams, like: &SequenceDataset, rng: &mut R) -> Vec<Vec<u32>> {
    like.sequences().iter().map(|s| sample(params, s.len(), rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    /// DenseHMM trained by EM with a gradient M-step.
    DenseEm,
    /// DenseHMM trained directly on co-occurrences.
    DenseDirect,
    /// Standard HMM trained by Baum-Welch with the same `n`.
    Stand,
    /// Standard HMM with `n_fair` states.
    StandFair,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] =
        [ModelKind::DenseEm, ModelKind::DenseDirect, ModelKind::Stand, ModelKind::StandFair];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::DenseEm => "dense_em",
            ModelKind::DenseDirect => "dense_direct",
            ModelKind::Stand => "stand",
            ModelKind::StandFair => "stand_fair",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "dense_em" => Ok(ModelKind::DenseEm),
            "dense_direct" => Ok(ModelKind::DenseDirect),
            "stand" => Ok(ModelKind::Stand),
            "stand_fair" => Ok(ModelKind::StandFair),
            _ => Err(Error::InvalidArgument(format!("unknown model {s:?}"))),
        }
    }
}

/// Where replica data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// A fresh Dirichlet generator per replica with `m = n`.
    Synthetic { alpha: f64, train_sequences: usize, test_sequences: usize, length: usize },
    /// A line-format corpus, preprocessed once and re-split per replica.
    File { path: PathBuf, limit: Option<usize>, max_len: Option<usize>, merge_threshold: Option<f64> },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic { alpha: 0.1, train_sequences: 10, test_sequences: 10, length: 200 }
    }
}

/// Target of the direct trainer on synthetic data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SyntheticCoocTarget {
    /// The analytic matrix of the generator.
    #[default]
    Analytic,
    /// Pair frequencies of the training split.
    Empirical,
}

/// Trainer hyperparameters shared by all cells.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub max_em_iters: usize,
    pub em_tol: f64,
    pub mstep_steps: usize,
    pub mstep_lr: f64,
    pub direct_steps: usize,
    pub direct_lr: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        let em = EmConfig::default();
        Self {
            max_em_iters: em.max_em_iters,
            em_tol: em.em_tol,
            mstep_steps: em.mstep_steps,
            mstep_lr: em.mstep_lr,
            direct_steps: crate::cooc::DEFAULT_STEPS,
            direct_lr: crate::cooc::DEFAULT_LR,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Label written to the `dataset` column.
    pub name: String,
    pub dataset: DatasetSource,
    /// Each `n` with the representation lengths to try.
    pub grid: Vec<(usize, Vec<usize>)>,
    pub replicas: usize,
    /// Used for file datasets only.
    pub test_fraction: f64,
    pub models: Vec<ModelKind>,
    pub trainer: TrainerConfig,
    pub synthetic_cooc_target: SyntheticCoocTarget,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            dataset: DatasetSource::default(),
            grid: vec![(3, vec![1, 2, 3]), (5, vec![1, 3, 5])],
            replicas: 10,
            test_fraction: 0.5,
            models: ModelKind::ALL.to_vec(),
            trainer: TrainerConfig::default(),
            synthetic_cooc_target: SyntheticCoocTarget::Analytic,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.into()));
        if self.replicas == 0 {
            return bad("replicas must be at least 1");
        }
        if self.grid.is_empty() || self.grid.iter().any(|(n, ls)| *n == 0 || ls.is_empty() || ls.contains(&0)) {
            return bad("grid needs positive n, each with a non-empty list of positive l");
        }
        if self.models.is_empty() {
            return bad("at least one model is required");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must lie in (0, 1)");
        }
        if let DatasetSource::Synthetic { alpha, train_sequences, test_sequences, length } = self.dataset {
            if !(alpha > 0.0) || train_sequences == 0 || test_sequences == 0 || length < 2 {
                return bad("synthetic data needs alpha > 0, at least one sequence per split and length ≥ 2");
            }
        }
        self.em_config(1, 1, 0).validate()?;
        if !(self.trainer.direct_lr > 0.0) {
            return bad("direct_lr must be positive");
        }
        Ok(())
    }

    fn em_config(&self, n: usize, l: usize, seed: u64) -> EmConfig {
        let t = &self.trainer;
        EmConfig {
            n,
            l,
            max_em_iters: t.max_em_iters,
            em_tol: t.em_tol,
            mstep_steps: t.mstep_steps,
            mstep_lr: t.mstep_lr,
            seed,
        }
    }

    /// `(n, l)` cells in grid order.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        self.grid.iter().flat_map(|(n, ls)| ls.iter().map(move |&l| (*n, l))).collect()
    }
}

/// Names of the recorded metrics.
pub mod metric {
    pub const COOC_MAD: &str = "cooc_mad";
    pub const NORMALIZED_NLL: &str = "normalized_nll";
    /// Test steps whose likelihood was floored.
    pub const FLOORED_STEPS: &str = "floored_steps";
    /// Hidden states actually used (differs from `n` for the fair model).
    pub const N_STATES: &str = "n_states";
    /// Final Frobenius loss of the direct trainer.
    pub const COOC_TRAIN_LOSS: &str = "cooc_train_loss";
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub n: usize,
    pub l: usize,
    pub model: ModelKind,
    pub replica: usize,
    pub metric: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub n: usize,
    pub l: usize,
    pub model: ModelKind,
    pub metric: &'static str,
    pub quartiles: Quartiles,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaFailure {
    pub n: usize,
    pub l: usize,
    pub model: Option<ModelKind>,
    pub replica: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub n: usize,
    pub l: usize,
    pub model: ModelKind,
    pub replica: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub dataset: String,
    /// Ordered by cell, replica, model, metric.
    pub rows: Vec<ResultRow>,
    /// Ordered by cell, model, metric.
    pub aggregates: Vec<AggregateRow>,
    pub failures: Vec<ReplicaFailure>,
    /// Wall times; not deterministic and kept apart from `rows`.
    pub timings: Vec<TimingRow>,
}

impl PartialEq for ExperimentResult {
    /// Compares everything except wall times.
    fn eq(&self, other: &Self) -> bool {
        self.dataset == other.dataset
            && self.rows == other.rows
            && self.aggregates == other.aggregates
            && self.failures == other.failures
    }
}

impl ExperimentResult {
    /// Metric values of one `(n, l, model)` across successful replicas.
    pub fn values(&self, n: usize, l: usize, model: ModelKind, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.n == n && r.l == l && r.model == model && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn aggregate(&self, n: usize, l: usize, model: ModelKind, metric: &str) -> Option<Quartiles> {
        self.aggregates
            .iter()
            .find(|a| a.n == n && a.l == l && a.model == model && a.metric == metric)
            .map(|a| a.quartiles)
    }

    pub fn write_results_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "dataset,n,l,model,replica,metric,value")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{},{},{}", self.dataset, r.n, r.l, r.model, r.replica, r.metric, r.value)?;
        }
        Ok(())
    }

    pub fn write_aggregate_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "dataset,n,l,model,metric,p25,median,p75")?;
        for a in &self.aggregates {
            let q = a.quartiles;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                self.dataset, a.n, a.l, a.model, a.metric, q.p25, q.median, q.p75
            )?;
        }
        Ok(())
    }

    pub fn write_failures_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "dataset,n,l,model,replica,message")?;
        for f in &self.failures {
            let model = f.model.map(|m| m.name()).unwrap_or("");
            let msg = f.message.replace(['"', '\n'], " ");
            writeln!(out, "{},{},{},{},{},\"{}\"", self.dataset, f.n, f.l, model, f.replica, msg)?;
        }
        Ok(())
    }

    pub fn write_timings_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "dataset,n,l,model,replica,seconds")?;
        for t in &self.timings {
            writeln!(out, "{},{},{},{},{},{}", self.dataset, t.n, t.l, t.model, t.replica, t.seconds)?;
        }
        Ok(())
    }
}

/// Loads a file dataset and applies truncation, then rare-symbol merging.
pub fn prepare_corpus(source: &DatasetSource) -> Result<SequenceDataset> {
    let DatasetSource::File { path, limit, max_len, merge_threshold } = source else {
        return Err(Error::InvalidArgument("not a file dataset".into()));
    };
    let mut ds = load_sequences(path)?;
    if let Some(k) = limit {
        ds = ds.take(*k);
    }
    if let Some(t) = max_len {
        ds = truncate(&ds, *t)?;
    }
    if let Some(th) = merge_threshold {
        ds = merge_rare_symbols(&ds, *th)?;
    }
    Ok(ds)
}

/// One replica's data: the splits, the ground-truth co-occurrences used for
/// scoring, and the target of the direct trainer.
struct ReplicaData {
    train: SequenceDataset,
    test: SequenceDataset,
    gt: CoocMatrix,
    direct_target: CoocMatrix,
}

fn replica_data(
    cfg: &ExperimentConfig,
    corpus: Option<&SequenceDataset>,
    n: usize,
    rng: &mut SeededRng,
) -> Result<ReplicaData> {
    match (&cfg.dataset, corpus) {
        (DatasetSource::Synthetic { alpha, train_sequences, test_sequences, length }, _) => {
            let generator = build_synthetic_hmm(n, *alpha, rng)?;
            let mut draw = |k: usize| -> Result<SequenceDataset> {
                let seqs = (0..k).map(|_| sample(&generator, *length, rng)).collect();
                SequenceDataset::from_indices(seqs, n)
            };
            let train = draw(*train_sequences)?;
            let test = draw(*test_sequences)?;
            let gt = analytic_cooc(&generator)?;
            let direct_target = match cfg.synthetic_cooc_target {
                SyntheticCoocTarget::Analytic => gt.clone(),
                SyntheticCoocTarget::Empirical => empirical_cooc(&train)?,
            };
            Ok(ReplicaData { train, test, gt, direct_target })
        }
        (DatasetSource::File { .. }, Some(ds)) => {
            let (train, test) = split_train_test(ds, cfg.test_fraction, rng)?;
            let gt = empirical_cooc(&test)?;
            let direct_target = empirical_cooc(&train)?;
            Ok(ReplicaData { train, test, gt, direct_target })
        }
        (DatasetSource::File { .. }, None) => unreachable!("corpus is loaded before replicas run"),
    }
}

struct ModelOutcome {
    metrics: Vec<(&'static str, f64)>,
    seconds: f64,
}

fn run_model(
    cfg: &ExperimentConfig,
    data: &ReplicaData,
    n: usize,
    l: usize,
    model: ModelKind,
    seed: u64,
) -> Result<ModelOutcome> {
    let start = Instant::now();
    let mut rng = seeded_rng(seed);
    let m = data.train.num_symbols();
    let mut extra = Vec::new();
    let (params, states) = match model {
        ModelKind::Stand => (baum_welch_fit(&data.train, &cfg.em_config(n, l, seed), &mut rng)?.params, n),
        ModelKind::StandFair => {
            let n_fair = dof_report(n, m, l)?.n_fair;
            (baum_welch_fit(&data.train, &cfg.em_config(n_fair, l, seed), &mut rng)?.params, n_fair)
        }
        ModelKind::DenseEm => (dense_em_fit(&data.train, &cfg.em_config(n, l, seed), &mut rng)?.params, n),
        ModelKind::DenseDirect => {
            let t = &cfg.trainer;
            let fit = direct_fit(&data.direct_target, n, l, t.direct_steps, t.direct_lr, rng.random())?;
            extra.push((metric::COOC_TRAIN_LOSS, fit.final_loss()));
            (stationary_params(&fit.reps)?, n)
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    let model_cooc = estimate_model_cooc(&params, &data.test, &mut rng)?;
    let mad = cooc_mad(&model_cooc, &data.gt)?;
    let (nll, floored) = score_nll_floored(&params, &data.test)?;
    if floored > 0 {
        log::warn!("{model} n={n} l={l}: {floored} test steps had zero likelihood and were floored");
    }
    let mut metrics = vec![
        (metric::COOC_MAD, mad),
        (metric::NORMALIZED_NLL, nll),
        (metric::FLOORED_STEPS, floored as f64),
        (metric::N_STATES, states as f64),
    ];
    metrics.extend(extra);
    Ok(ModelOutcome { metrics, seconds })
}

struct ReplicaOutcome {
    rows: Vec<ResultRow>,
    failures: Vec<ReplicaFailure>,
    timings: Vec<TimingRow>,
}

fn run_replica(
    cfg: &ExperimentConfig,
    corpus: Option<&SequenceDataset>,
    n: usize,
    l: usize,
    replica: usize,
) -> ReplicaOutcome {
    let mut out = ReplicaOutcome { rows: Vec::new(), failures: Vec::new(), timings: Vec::new() };
    let cell_seed = derive_seed(cfg.seed, &[n as u64, l as u64, replica as u64]);
    let data = match replica_data(cfg, corpus, n, &mut seeded_rng(derive_seed(cell_seed, &[0]))) {
        Ok(d) => d,
        Err(e) => {
            log::warn!("n={n} l={l} replica {replica}: data generation failed: {e}");
            out.failures.push(ReplicaFailure { n, l, model: None, replica, message: e.to_string() });
            return out;
        }
    };
    for &model in &cfg.models {
        let seed = derive_seed(cell_seed, &[1, model.index()]);
        match run_model(cfg, &data, n, l, model, seed) {
            Ok(o) => {
                for (metric, value) in o.metrics {
                    out.rows.push(ResultRow { n, l, model, replica, metric, value });
                }
                out.timings.push(TimingRow { n, l, model, replica, seconds: o.seconds });
            }
            Err(e) => {
                log::warn!("{model} n={n} l={l} replica {replica} failed and is excluded: {e}");
                out.failures.push(ReplicaFailure { n, l, model: Some(model), replica, message: e.to_string() });
            }
        }
    }
    out
}

/// Runs the experiment on a pool of `jobs` threads. Replicas that fail are
/// reported in `failures` and left out of the aggregates. Results other
/// than wall times do not depend on `jobs`.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentResult> {
    cfg.validate()?;
    let corpus = match &cfg.dataset {
        DatasetSource::File { .. } => {
            let ds = prepare_corpus(&cfg.dataset)?;
            log::info!("{}", crate::corpus::describe(&ds));
            Some(ds)
        }
        DatasetSource::Synthetic { .. } => None,
    };
    let cells = cfg.cells();
    let tasks: Vec<(usize, usize, usize)> =
        cells.iter().flat_map(|&(n, l)| (0..cfg.replicas).map(move |r| (n, l, r))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let outcomes: Vec<ReplicaOutcome> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(n, l, r)| {
                let o = run_replica(cfg, corpus.as_ref(), n, l, r);
                log::info!("n={n} l={l} replica {r} done");
                o
            })
            .collect()
    });

    let mut result = ExperimentResult {
        dataset: cfg.name.clone(),
        rows: Vec::new(),
        aggregates: Vec::new(),
        failures: Vec::new(),
        timings: Vec::new(),
    };
    for o in outcomes {
        result.rows.extend(o.rows);
        result.failures.extend(o.failures);
        result.timings.extend(o.timings);
    }
    const AGGREGATED: [&str; 4] =
        [metric::COOC_MAD, metric::NORMALIZED_NLL, metric::FLOORED_STEPS, metric::COOC_TRAIN_LOSS];
    for &(n, l) in &cells {
        for &model in &cfg.models {
            for metric in AGGREGATED {
                let v = result.values(n, l, model, metric);
                if !v.is_empty() {
                    result.aggregates.push(AggregateRow { n, l, model, metric, quartiles: quartiles(&v)? });
                }
            }
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic::{ProbVector, StochasticMatrix};
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn mad_cases() {
        let diag = CoocMatrix::new(array![[0.5, 0.0], [0.0, 0.5]]).unwrap();
        let uni = CoocMatrix::uniform(2);
        assert_eq!(cooc_mad(&diag, &diag).unwrap(), 0.0);
        assert_eq!(cooc_mad(&diag, &uni).unwrap(), 0.25);
        assert!(cooc_mad(&diag, &CoocMatrix::uniform(3)).is_err());
    }

    proptest! {
        #[test]
        fn mad_is_symmetric(s1 in 0u64..10_000, s2 in 0u64..10_000) {
            let a = analytic_cooc(&build_synthetic_hmm(3, 1.0, &mut seeded_rng(s1)).unwrap()).unwrap();
            let b = analytic_cooc(&build_synthetic_hmm(3, 1.0, &mut seeded_rng(s2)).unwrap()).unwrap();
            prop_assert_eq!(cooc_mad(&a, &b).unwrap(), cooc_mad(&b, &a).unwrap());
        }
    }

    #[test]
    fn synthetic_generator_properties() {
        let p = build_synthetic_hmm(1, 0.1, &mut seeded_rng(0)).unwrap();
        assert_eq!(p.a().as_array(), &array![[1.0]]);
        assert_eq!(p.b().as_array(), &array![[1.0]]);
        assert_eq!(p.pi().as_array(), &array![1.0]);

        let mut rng = seeded_rng(1);
        for _ in 0..100 {
            let p = build_synthetic_hmm(4, 0.5, &mut rng).unwrap();
            assert!(p.stationarity_residual() < 1e-10);
        }
    }

    #[test]
    fn dirichlet_point_one_rows_are_peaked() {
        let mut rng = seeded_rng(2);
        let (mut peaked, mut rows) = (0, 0);
        for _ in 0..1000 {
            let p = build_synthetic_hmm(5, 0.1, &mut rng).unwrap();
            for row in p.a().as_array().rows().into_iter().chain(p.b().as_array().rows()) {
                rows += 1;
                if row.iter().cloned().fold(0.0, f64::max) > 0.5 {
                    peaked += 1;
                }
            }
        }
        assert!(peaked * 2 > rows, "{peaked} of {rows}");
    }

    #[test]
    fn model_cooc_estimates() {
        let p = HmmParams::new(StochasticMatrix::identity(1), StochasticMatrix::identity(1), ProbVector::uniform(1))
            .unwrap();
        let test = SequenceDataset::from_indices(vec![vec![0; 5], vec![0; 3]], 1).unwrap();
        assert_eq!(estimate_model_cooc(&p, &test, &mut seeded_rng(0)).unwrap().as_array(), &array![[1.0]]);

        let p = build_synthetic_hmm(3, 1.0, &mut seeded_rng(3)).unwrap();
        let test = SequenceDataset::from_indices(vec![vec![0; 50_000], vec![0; 70_000], vec![1; 7]], 3).unwrap();
        let mut rng = seeded_rng(4);
        let lens: Vec<usize> = sample_like(&p, &test, &mut rng).iter().map(Vec::len).collect();
        assert_eq!(lens, vec![50_000, 70_000, 7]);
        let est = estimate_model_cooc(&p, &test, &mut rng).unwrap();
        let ana = analytic_cooc(&p).unwrap();
        for (x, y) in est.iter().zip(ana.iter()) {
            assert!((x - y).abs() < 0.01);
        }
    }

    fn smoke_config() -> ExperimentConfig {
        ExperimentConfig {
            grid: vec![(3, vec![3])],
            replicas: 1,
            trainer: TrainerConfig { max_em_iters: 10, mstep_steps: 20, direct_steps: 200, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn smoke_run_has_finite_metrics_per_model() {
        let res = run_experiment(&smoke_config(), 1).unwrap();
        assert!(res.failures.is_empty());
        for model in ModelKind::ALL {
            let mad = res.values(3, 3, model, metric::COOC_MAD);
            let nll = res.values(3, 3, model, metric::NORMALIZED_NLL);
            assert_eq!((mad.len(), nll.len()), (1, 1));
            assert!(mad[0].is_finite() && mad[0] >= 0.0 && nll[0].is_finite());
        }
        assert_eq!(res.values(3, 3, ModelKind::DenseDirect, metric::COOC_TRAIN_LOSS).len(), 1);
        // n = m = 3, l = 3: dof_dense = 3 · 13 = 39, n_fair = 5
        assert_eq!(res.values(3, 3, ModelKind::StandFair, metric::N_STATES), vec![5.0]);
    }

    #[test]
    fn results_do_not_depend_on_jobs() {
        let cfg = ExperimentConfig { replicas: 3, grid: vec![(2, vec![1, 2])], ..smoke_config() };
        let a = run_experiment(&cfg, 1).unwrap();
        let b = run_experiment(&cfg, 4).unwrap();
        assert_eq!(a, b);
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.write_results_csv(&mut x).unwrap();
        b.write_results_csv(&mut y).unwrap();
        assert_eq!(x, y);
        let text = String::from_utf8(x).unwrap();
        assert!(text.starts_with("dataset,n,l,model,replica,metric,value\nsynthetic,2,1,dense_em,0,cooc_mad,"));
    }

    #[test]
    fn failed_replicas_are_reported_and_excluded() {
        // single-token sequences leave one side of every split without pairs
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        std::fs::write(&path, "a\nb\na\n").unwrap();
        let file = |path: PathBuf| DatasetSource::File { path, limit: None, max_len: None, merge_threshold: None };
        let cfg = ExperimentConfig { dataset: file(path), replicas: 2, ..smoke_config() };
        let res = run_experiment(&cfg, 2).unwrap();
        assert_eq!(res.failures.len(), 2);
        assert!(res.failures.iter().all(|f| f.model.is_none()));
        assert!(res.rows.is_empty() && res.aggregates.is_empty());

        let missing = ExperimentConfig { dataset: file("/nonexistent/corpus.txt".into()), ..smoke_config() };
        assert!(matches!(run_experiment(&missing, 1), Err(Error::Io { .. })));
    }

    #[test]
    fn model_names_round_trip() {
        for m in ModelKind::ALL {
            assert_eq!(m.name().parse::<ModelKind>().unwrap(), m);
        }
        assert_eq!("dense-direct".parse::<ModelKind>().unwrap(), ModelKind::DenseDirect);
    }
}
