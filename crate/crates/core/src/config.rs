//! The JSON run configuration read by the command line.
//!
//! Every field is optional; missing sections and keys take their defaults
//! and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::generation::{ExpansionPlan, ExpansionTarget, InterpolationSpec};
use crate::reid::{ReidConfig, SweepConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TseConfig {
    pub interpolation: InterpolationSpec,
    pub multiple: f64,
    pub target: ExpansionTarget,
    pub seed: u64,
}

impl Default for TseConfig {
    fn default() -> Self {
        Self {
            interpolation: InterpolationSpec::default(),
            multiple: 1.0,
            target: ExpansionTarget::Both,
            seed: 0,
        }
    }
}

impl TseConfig {
    pub fn plan(&self) -> Result<ExpansionPlan> {
        ExpansionPlan::new(self.multiple, self.target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Seed of the train/query/gallery split and of retrieval training.
    pub seed: u64,
    pub multiples: Vec<f64>,
    pub modes: Vec<ExpansionTarget>,
    pub reid: ReidConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let sweep = SweepConfig::default();
        Self {
            seed: 0,
            multiples: sweep.multiples,
            modes: sweep.modes,
            reid: sweep.reid,
        }
    }
}

impl EvalConfig {
    pub fn sweep(&self, interpolation: InterpolationSpec) -> SweepConfig {
        SweepConfig {
            multiples: self.multiples.clone(),
            modes: self.modes.clone(),
            reid: self.reid,
            interpolation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory.
    pub data: PathBuf,
    /// Directory for checkpoints and metrics.
    pub run: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            run: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub tse: TseConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl Config {
    /// Parse and validate.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let c: Config = serde_json::from_slice(bytes).map_err(|e| {
            Error::Config(format!(
                "config line {} column {}: {e}",
                e.line(),
                e.column()
            ))
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        self.tse.plan()?;
        self.eval.reid.validate()?;
        for &m in &self.eval.multiples {
            ExpansionPlan::new(m, ExpansionTarget::Both)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
