//! Subcommand implementations. Every command computes its results in
//! memory first and writes files only once nothing can fail anymore.

use std::path::{Path, PathBuf};

use densehmm::cooc::{analytic_cooc, direct_fit, empirical_cooc, write_loss_csv};
use densehmm::corpus::load_sequences;
use densehmm::em::{baum_welch_fit, dense_em_fit, write_trace_csv};
use densehmm::factor::run_study;
use densehmm::format::{hmm_to_string, load_model, reps_to_string, ModelFile};
use densehmm::harness::{cooc_mad, prepare_corpus, run_experiment, DatasetSource};
use densehmm::hmm::{sample as sample_sequence, score_nll_floored};
use densehmm::{corpus, seeded_rng, CoocMatrix, EmConfig, HmmParams, SequenceDataset, Vocabulary};
use log::{info, warn};

use crate::config::{read_toml, CoocFile, ExperimentFile, FactorFile, FitFile, SampleFile, ScoreFile};
use crate::{CliError, CoocArgs, ExperimentArgs, FactorArgs, FitArgs, FitModel, SampleArgs, ScoreArgs};

const DEFAULT_N: usize = 3;
const DEFAULT_COUNT: usize = 10;
const DEFAULT_LENGTH: usize = 200;

fn load_config<T: Default + serde::de::DeserializeOwned>(path: &Option<PathBuf>) -> Result<T, CliError> {
    path.as_deref().map(read_toml).transpose().map(Option::unwrap_or_default)
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Config(format!("--{flag} is required (flag or config key)")))
}

fn jobs_or_default(jobs: Option<usize>) -> Result<usize, CliError> {
    match jobs {
        Some(0) => Err(CliError::Config("--jobs must be at least 1".into())),
        Some(j) => Ok(j),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn render(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory cannot fail");
    buf
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("cannot write {}: {e}", path.display()))
}

/// Creates `dir` and writes every `(name, contents)` pair into it.
fn write_outputs(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    for (name, contents) in files {
        let path = dir.join(name);
        std::fs::write(&path, contents).map_err(|e| io_error(&path, e))?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn write_or_print(out: Option<&Path>, contents: &[u8]) -> Result<(), CliError> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
            }
            std::fs::write(path, contents).map_err(|e| io_error(path, e))
        }
        None => {
            use std::io::Write;
            std::io::stdout().write_all(contents).map_err(|e| CliError::Data(format!("standard output: {e}")))
        }
    }
}

/// The model's vocabulary, or the symbols `0..m` when the file has none.
fn model_vocab(model: &ModelFile, m: usize) -> Result<Vocabulary, CliError> {
    match model.vocab() {
        Some(v) => Ok(v.clone()),
        None => Ok(Vocabulary::from_symbols((0..m).map(|i| i.to_string()))?),
    }
}

fn load_params(path: &Path) -> Result<(HmmParams, Vocabulary), CliError> {
    let model = load_model(path)?;
    let params = model.to_params()?;
    let vocab = model_vocab(&model, params.n_symbols())?;
    Ok((params, vocab))
}

fn sample_dataset(
    params: &HmmParams,
    vocab: Vocabulary,
    count: usize,
    length: usize,
    seed: u64,
) -> Result<SequenceDataset, CliError> {
    if count == 0 || length == 0 {
        return Err(CliError::Config("--count and --length must be positive".into()));
    }
    let mut rng = seeded_rng(seed);
    let seqs = (0..count).map(|_| sample_sequence(params, length, &mut rng)).collect();
    Ok(SequenceDataset::new(seqs, vocab)?)
}

fn train_nll(params: &HmmParams, train: &SequenceDataset) -> Result<f64, CliError> {
    let (nll, floored) = score_nll_floored(params, train)?;
    if floored > 0 {
        warn!("{floored} steps had zero likelihood and were floored");
    }
    Ok(nll)
}

pub fn fit(a: FitArgs) -> Result<(), CliError> {
    let f: FitFile = load_config(&a.config)?;
    let model = match (a.model, f.model.as_deref()) {
        (Some(m), _) => m,
        (None, Some(s)) => FitModel::parse(s)?,
        (None, None) => return Err(CliError::Config("--model is required (flag or config key)".into())),
    };
    let data = required(a.data.or(f.data), "data")?;
    let out = required(a.out.or(f.out), "out")?;
    let n = a.n.or(f.n).unwrap_or(DEFAULT_N);
    let l = a.l.or(f.l).unwrap_or(n);
    let seed = a.seed.or(f.seed).unwrap_or(0);
    let d = EmConfig::default();
    let em = EmConfig {
        n,
        l,
        max_em_iters: a.max_em_iters.or(f.max_em_iters).unwrap_or(d.max_em_iters),
        em_tol: a.em_tol.or(f.em_tol).unwrap_or(d.em_tol),
        mstep_steps: a.mstep_steps.or(f.mstep_steps).unwrap_or(d.mstep_steps),
        mstep_lr: a.mstep_lr.or(f.mstep_lr).unwrap_or(d.mstep_lr),
        seed,
    };
    em.validate()?;
    let steps = a.steps.or(f.steps).unwrap_or(densehmm::cooc::DEFAULT_STEPS);
    let lr = a.lr.or(f.lr).unwrap_or(densehmm::cooc::DEFAULT_LR);

    let source = DatasetSource::File {
        path: data,
        limit: a.limit.or(f.limit),
        max_len: a.max_len.or(f.max_len),
        merge_threshold: a.merge_threshold.or(f.merge_threshold),
    };
    let train = prepare_corpus(&source)?;
    info!("{}", corpus::describe(&train));
    let vocab = Some(train.vocab());
    let mut rng = seeded_rng(seed);

    let (params, final_loss, files) = match model {
        FitModel::Stand => {
            let fit = baum_welch_fit(&train, &em, &mut rng)?;
            let ll = fit.trace.last().map_or(f64::NAN, |r| r.log_likelihood);
            info!("Baum-Welch ran {} iterations", fit.trace.len() - 1);
            let files = vec![
                ("params.txt", hmm_to_string(&fit.params, vocab).into_bytes()),
                ("trace.csv", render(|w| write_trace_csv(&fit.trace, w))),
            ];
            (fit.params, -ll, files)
        }
        FitModel::DenseEm => {
            let fit = dense_em_fit(&train, &em, &mut rng)?;
            let ll = fit.trace.last().map_or(f64::NAN, |r| r.log_likelihood);
            info!("dense EM ran {} iterations", fit.trace.len() - 1);
            let files = vec![
                ("reps.txt", reps_to_string(&fit.reps, vocab).into_bytes()),
                ("params.txt", hmm_to_string(&fit.params, vocab).into_bytes()),
                ("trace.csv", render(|w| write_trace_csv(&fit.trace, w))),
            ];
            (fit.params, -ll, files)
        }
        FitModel::DenseDirect => {
            let target = empirical_cooc(&train)?;
            let fit = direct_fit(&target, n, l, steps, lr, seed)?;
            let loss = fit.final_loss();
            let files = vec![
                ("reps.txt", reps_to_string(&fit.reps, vocab).into_bytes()),
                ("params.txt", hmm_to_string(&fit.params, vocab).into_bytes()),
                ("loss.csv", render(|w| write_loss_csv(&fit.loss_trace, w))),
            ];
            (fit.params, loss, files)
        }
    };
    let nll = train_nll(&params, &train)?;
    write_outputs(&out, &files)?;
    let name = clap::ValueEnum::to_possible_value(&model).expect("no skipped variants").get_name().to_string();
    println!("model={name} n={n} l={l} train_nll={nll:.6} final_loss={final_loss:.6e}");
    Ok(())
}

pub fn score(a: ScoreArgs) -> Result<(), CliError> {
    let f: ScoreFile = load_config(&a.config)?;
    let params_path = required(a.params.or(f.params), "params")?;
    let data = required(a.data.or(f.data), "data")?;
    let (params, vocab) = load_params(&params_path)?;
    let test = corpus::load_sequences_with_vocab(&data, &vocab)?;
    let nll = train_nll(&params, &test)?;
    let line = format!("{nll:.6}\n");
    if let Some(out) = a.out.or(f.out) {
        write_or_print(Some(&out), line.as_bytes())?;
    }
    print!("{line}");
    Ok(())
}

pub fn sample(a: SampleArgs) -> Result<(), CliError> {
    let f: SampleFile = load_config(&a.config)?;
    let params_path = required(a.params.or(f.params), "params")?;
    let count = a.count.or(f.count).unwrap_or(DEFAULT_COUNT);
    let length = a.length.or(f.length).unwrap_or(DEFAULT_LENGTH);
    let seed = a.seed.or(f.seed).unwrap_or(0);
    let (params, vocab) = load_params(&params_path)?;
    let ds = sample_dataset(&params, vocab, count, length, seed)?;
    write_or_print(a.out.or(f.out).as_deref(), ds.to_line_format().as_bytes())
}

pub fn cooc(a: CoocArgs) -> Result<(), CliError> {
    let f: CoocFile = load_config(&a.config)?;
    let analytic = a.analytic || f.analytic.unwrap_or(false);
    let matrix: CoocMatrix = match (a.data.or(f.data), a.params.or(f.params)) {
        (Some(data), None) => {
            if analytic {
                return Err(CliError::Config("--analytic needs --params".into()));
            }
            empirical_cooc(&load_sequences(&data)?)?
        }
        (None, Some(path)) => {
            let (params, vocab) = load_params(&path)?;
            if analytic {
                analytic_cooc(&params)?
            } else {
                let count = a.count.or(f.count).unwrap_or(DEFAULT_COUNT);
                let length = a.length.or(f.length).unwrap_or(DEFAULT_LENGTH);
                let seed = a.seed.or(f.seed).unwrap_or(0);
                empirical_cooc(&sample_dataset(&params, vocab, count, length, seed)?)?
            }
        }
        _ => return Err(CliError::Config("give exactly one of --data and --params".into())),
    };
    let csv = render(|w| matrix.write_csv(w));
    let out = a.out.or(f.out);
    match a.mad.or(f.mad) {
        Some(other_path) => {
            let text = std::fs::read_to_string(&other_path)
                .map_err(|e| CliError::Data(format!("cannot read {}: {e}", other_path.display())))?;
            let other = CoocMatrix::parse_csv(&text)?;
            let mad = cooc_mad(&matrix, &other)?;
            if let Some(out) = out {
                write_or_print(Some(&out), &csv)?;
            }
            println!("{mad:.6e}");
            Ok(())
        }
        None => write_or_print(out.as_deref(), &csv),
    }
}

pub fn factor_study(a: FactorArgs) -> Result<(), CliError> {
    let f: FactorFile = load_config(&a.config)?;
    let out = required(a.out.clone().or(f.out.clone()), "out")?;
    let mut cfg = f.into_config();
    cfg.replicas = a.replicas.unwrap_or(cfg.replicas);
    cfg.alpha = a.alpha.unwrap_or(cfg.alpha);
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.validate()?;
    let jobs = jobs_or_default(a.jobs)?;
    info!("factor study: {} cells × {} replicas on {jobs} threads", cfg.grid.len(), cfg.replicas);
    let res = run_study(&cfg, jobs)?;
    write_outputs(
        &out,
        &[("records.csv", render(|w| res.write_records_csv(w))), ("summary.csv", render(|w| res.write_summary_csv(w)))],
    )?;
    for s in &res.summary {
        println!("n={} l={} {:<10} median={:.4}", s.n, s.l, s.kernel.name(), s.quartiles.median);
    }
    Ok(())
}

pub fn experiment(a: ExperimentArgs) -> Result<(), CliError> {
    let f: ExperimentFile = load_config(&a.config)?;
    let out = required(a.out.clone().or(f.out.clone()), "out")?;
    let mut cfg = f.into_config()?;
    if let Some(name) = a.name {
        cfg.name = name;
    }
    cfg.replicas = a.replicas.unwrap_or(cfg.replicas);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.validate()?;
    let jobs = jobs_or_default(a.jobs)?;
    info!("experiment {}: {} cells × {} replicas on {jobs} threads", cfg.name, cfg.cells().len(), cfg.replicas);
    let res = run_experiment(&cfg, jobs)?;
    if !res.failures.is_empty() {
        warn!("{} replica failures; see failures.csv", res.failures.len());
    }
    write_outputs(
        &out,
        &[
            ("results.csv", render(|w| res.write_results_csv(w))),
            ("aggregate.csv", render(|w| res.write_aggregate_csv(w))),
            ("failures.csv", render(|w| res.write_failures_csv(w))),
            ("timings.csv", render(|w| res.write_timings_csv(w))),
        ],
    )?;
    for row in &res.aggregates {
        println!(
            "{} n={} l={} {:<12} {:<15} median={:.6}",
            res.dataset,
            row.n,
            row.l,
            row.model.name(),
            row.metric,
            row.quartiles.median
        );
    }
    Ok(())
}
