use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use shallowpi_core::analysis::{EvalSpec, DEFAULT_TAU_GRID};
use shallowpi_core::bench::BenchConfig;
use shallowpi_core::distill::DistillConfig;
use shallowpi_core::sim::{GenConfig, LinearStaleness};
use shallowpi_core::train::TrainConfig;
use shallowpi_core::PolicyConfig;

use crate::UsageError;

/// Reads a JSON run config, or the defaults when no file is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, UsageError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))
}

pub fn require<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, UsageError> {
    value
        .as_deref()
        .ok_or_else(|| UsageError(format!("missing {what}; pass it as a flag or in the config file")))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataRun {
    pub out: Option<PathBuf>,
    pub gen: GenConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainTeacherRun {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillRun {
    pub teacher: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub distill: DistillConfig,
}

/// Observation age used during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Staleness {
    /// Fixed number of frames.
    Frames(usize),
    /// Derived from the effective depth of the evaluated policy.
    Auto,
}

impl std::str::FromStr for Staleness {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" {
            return Ok(Staleness::Auto);
        }
        s.parse()
            .map(Staleness::Frames)
            .map_err(|_| format!("expected `auto` or a frame count, got `{s}`"))
    }
}

/// How `auto` staleness is derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatencyModel {
    /// Frames as a linear function of depth; hardware independent.
    Synthetic(LinearStaleness),
    /// Frames from timing the policy on this machine.
    Measured { control_period_ms: f64 },
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel::Synthetic(LinearStaleness::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRun {
    pub ckpt: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub eval: EvalSpec,
    pub staleness: Staleness,
    pub latency_model: LatencyModel,
    /// Layers bypassed at inference.
    pub skip: Vec<usize>,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            ckpt: None,
            out: None,
            eval: EvalSpec::default(),
            staleness: Staleness::Frames(0),
            latency_model: LatencyModel::default(),
            skip: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityRun {
    pub ckpt: Option<PathBuf>,
    /// Dataset whose leading records form the eval set.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub n_examples: usize,
    pub taus: Vec<f64>,
    pub seed: u64,
}

impl Default for SimilarityRun {
    fn default() -> Self {
        Self {
            ckpt: None,
            data: None,
            out: None,
            n_examples: 256,
            taus: DEFAULT_TAU_GRID.to_vec(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityRun {
    pub ckpt: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub eval: EvalSpec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProgressiveRun {
    pub ckpt: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub eval: EvalSpec,
    /// Defaults to one less than the depth.
    pub max_removed: Option<usize>,
    /// Removal order; computed with a sensitivity sweep when absent.
    pub order: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchRun {
    pub out: Option<PathBuf>,
    pub bench: BenchConfig,
    pub json: bool,
}
