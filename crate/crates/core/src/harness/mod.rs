//! Run configuration, the synthetic classification task, experiment
//! orchestration and the verification suites.

mod data;
mod experiment;
mod verify;

pub use data::{generate_dataset, DatasetSpec, SyntheticDataset, Tier, HARD_MIX};
pub use experiment::{
    analyze_checkpoint, evaluate_checkpoint, evaluate_quantiles, run_experiment, sketch_bench, AnalysisSummary,
    EvalSummary, QuantileRow, RunSummary, SketchBenchRow, StreamKind, TrendChecks,
};
pub use verify::{gradient_check, verify, GradientCheckReport, SuiteReport, VerifyOptions, VerifyOutcome};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::ModelConfig;
use crate::error::{FrostError, Result};
use crate::sketch::DEFAULT_K;
use crate::training::TrainingConfig;

pub const DEFAULT_SEED: u64 = 42;

/// The eight quantiles `1/8, 2/8, …, 1`.
pub fn default_q_grid() -> Vec<f64> {
    (1..=8).map(|i| i as f64 / 8.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HaltingConfig {
    /// Quantile used for the halting trace.
    pub q: f64,
    pub q_grid: Vec<f64>,
    pub t_min: usize,
    pub sketch_k: usize,
}

impl Default for HaltingConfig {
    fn default() -> Self {
        HaltingConfig {
            q: 0.5,
            q_grid: default_q_grid(),
            t_min: 1,
            sketch_k: DEFAULT_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    /// Fraction of each class placed near a class-pair midpoint.
    pub boundary_fraction: f64,
    /// Distance of each class mean from the origin.
    pub separation: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: 4,
            train_per_class: 500,
            eval_per_class: 250,
            boundary_fraction: 0.3,
            separation: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub halting: HaltingConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    /// Master seed; model init, data, shuffling and the sketch derive from it.
    pub seed: u64,
    /// Also train the task-only, relative-only and absolute-only arms.
    pub ablation: bool,
    /// Number of evaluation inputs used by the contraction analyses.
    pub analysis_inputs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            halting: HaltingConfig::default(),
            data: DataConfig::default(),
            output_dir: PathBuf::from("frost-run"),
            seed: DEFAULT_SEED,
            ablation: false,
            analysis_inputs: 8,
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Training settings with the run seed and the model depth applied.
    pub fn effective_training(&self) -> TrainingConfig {
        TrainingConfig {
            seed: self.seed,
            ..self.training.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        let h = &self.halting;
        if !(h.q > 0.0 && h.q < 1.0) {
            return Err(FrostError::Config(format!("halting.q must be in (0, 1), got {}", h.q)));
        }
        if h.q_grid.is_empty() || h.q_grid.iter().any(|&q| !(q > 0.0 && q <= 1.0)) {
            return Err(FrostError::Config("q_grid entries must be in (0, 1]".into()));
        }
        if h.t_min == 0 || h.t_min > self.model.t_max {
            return Err(FrostError::Config("need 1 <= t_min <= t_max".into()));
        }
        if self.training.steps > self.model.t_max {
            return Err(FrostError::Config(format!(
                "training.steps {} exceeds model.t_max {}",
                self.training.steps, self.model.t_max
            )));
        }
        let d = &self.data;
        if d.classes < 2 || d.train_per_class == 0 || d.eval_per_class == 0 {
            return Err(FrostError::Config("need >= 2 classes and >= 1 sample per class".into()));
        }
        if d.classes > self.model.dims.d_out {
            return Err(FrostError::Config(format!(
                "{} classes do not fit in d_out = {}",
                d.classes, self.model.dims.d_out
            )));
        }
        if self.analysis_inputs == 0 {
            return Err(FrostError::Config("analysis_inputs must be >= 1".into()));
        }
        if d.classes * d.train_per_class < self.training.batch_size {
            return Err(FrostError::Config("training set is smaller than one batch".into()));
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            classes: self.data.classes,
            per_class: self.data.train_per_class + self.data.eval_per_class,
            d_in: self.model.dims.d_in,
            boundary_fraction: self.data.boundary_fraction,
            separation: self.data.separation,
        }
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

/// Sub-seed for a named component of a run.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
