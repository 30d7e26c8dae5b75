//! TOML run configurations.
//!
//! Every subcommand accepts `--config FILE`. Flags override file values,
//! which override built-in defaults. Unknown keys are rejected. Relative
//! paths are resolved against the working directory.

use std::path::{Path, PathBuf};

use densehmm::factor::FactorStudyConfig;
use densehmm::harness::{DatasetSource, SyntheticCoocTarget, TrainerConfig};
use densehmm::{ExperimentConfig, ModelKind};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::CliError;

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Schema of `fit --config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitFile {
    pub model: Option<String>,
    pub data: Option<PathBuf>,
    pub n: Option<usize>,
    pub l: Option<usize>,
    pub limit: Option<usize>,
    pub max_len: Option<usize>,
    pub merge_threshold: Option<f64>,
    pub max_em_iters: Option<usize>,
    pub em_tol: Option<f64>,
    pub mstep_steps: Option<usize>,
    pub mstep_lr: Option<f64>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Schema of `score --config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreFile {
    pub params: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Schema of `sample --config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleFile {
    pub params: Option<PathBuf>,
    pub count: Option<usize>,
    pub length: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Schema of `cooc --config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoocFile {
    pub data: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub analytic: Option<bool>,
    pub count: Option<usize>,
    pub length: Option<usize>,
    pub seed: Option<u64>,
    pub mad: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Schema of `factor-study --config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorFile {
    /// `[[n, l], ...]`
    pub grid: Option<Vec<[usize; 2]>>,
    pub replicas: Option<usize>,
    pub alpha: Option<f64>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl FactorFile {
    pub fn into_config(self) -> FactorStudyConfig {
        let d = FactorStudyConfig::default();
        FactorStudyConfig {
            grid: self.grid.map(|g| g.into_iter().map(|[n, l]| (n, l)).collect()).unwrap_or(d.grid),
            replicas: self.replicas.unwrap_or(d.replicas),
            alpha: self.alpha.unwrap_or(d.alpha),
            steps: self.steps.unwrap_or(d.steps),
            lr: self.lr.unwrap_or(d.lr),
            seed: self.seed.unwrap_or(d.seed),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRow {
    pub n: usize,
    pub l: Vec<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DatasetFile {
    Synthetic {
        alpha: Option<f64>,
        train_sequences: Option<usize>,
        test_sequences: Option<usize>,
        length: Option<usize>,
    },
    File {
        path: PathBuf,
        limit: Option<usize>,
        max_len: Option<usize>,
        merge_threshold: Option<f64>,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerFile {
    pub max_em_iters: Option<usize>,
    pub em_tol: Option<f64>,
    pub mstep_steps: Option<usize>,
    pub mstep_lr: Option<f64>,
    pub direct_steps: Option<usize>,
    pub direct_lr: Option<f64>,
}

/// Schema of `experiment --config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub name: Option<String>,
    pub seed: Option<u64>,
    pub replicas: Option<usize>,
    pub test_fraction: Option<f64>,
    pub models: Option<Vec<String>>,
    /// `analytic` or `empirical`; synthetic datasets only.
    pub cooc_target: Option<String>,
    pub out: Option<PathBuf>,
    pub grid: Option<Vec<GridRow>>,
    pub dataset: Option<DatasetFile>,
    #[serde(default)]
    pub trainer: TrainerFile,
}

impl ExperimentFile {
    pub fn into_config(self) -> Result<ExperimentConfig, CliError> {
        let d = ExperimentConfig::default();
        let models = match self.models {
            Some(names) => names
                .iter()
                .map(|s| s.parse::<ModelKind>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Config(e.to_string()))?,
            None => d.models,
        };
        let synthetic_cooc_target = match self.cooc_target.as_deref() {
            None | Some("analytic") => SyntheticCoocTarget::Analytic,
            Some("empirical") => SyntheticCoocTarget::Empirical,
            Some(other) => {
                return Err(CliError::Config(format!("cooc_target must be analytic or empirical, got {other:?}")))
            }
        };
        let dataset = match self.dataset {
            None => d.dataset,
            Some(DatasetFile::Synthetic { alpha, train_sequences, test_sequences, length }) => {
                let DatasetSource::Synthetic { alpha: a0, train_sequences: tr0, test_sequences: te0, length: l0 } =
                    DatasetSource::default()
                else {
                    unreachable!("default dataset is synthetic")
                };
                DatasetSource::Synthetic {
                    alpha: alpha.unwrap_or(a0),
                    train_sequences: train_sequences.unwrap_or(tr0),
                    test_sequences: test_sequences.unwrap_or(te0),
                    length: length.unwrap_or(l0),
                }
            }
            Some(DatasetFile::File { path, limit, max_len, merge_threshold }) => {
                DatasetSource::File { path, limit, max_len, merge_threshold }
            }
        };
        let t0 = TrainerConfig::default();
        let t = self.trainer;
        let trainer = TrainerConfig {
            max_em_iters: t.max_em_iters.unwrap_or(t0.max_em_iters),
            em_tol: t.em_tol.unwrap_or(t0.em_tol),
            mstep_steps: t.mstep_steps.unwrap_or(t0.mstep_steps),
            mstep_lr: t.mstep_lr.unwrap_or(t0.mstep_lr),
            direct_steps: t.direct_steps.unwrap_or(t0.direct_steps),
            direct_lr: t.direct_lr.unwrap_or(t0.direct_lr),
        };
        Ok(ExperimentConfig {
            name: self.name.unwrap_or(d.name),
            dataset,
            grid: self.grid.map(|g| g.into_iter().map(|r| (r.n, r.l)).collect()).unwrap_or(d.grid),
            replicas: self.replicas.unwrap_or(d.replicas),
            test_fraction: self.test_fraction.unwrap_or(d.test_fraction),
            models,
            trainer,
            synthetic_cooc_target,
            seed: self.seed.unwrap_or(d.seed),
        })
    }
}
