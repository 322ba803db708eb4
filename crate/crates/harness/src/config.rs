//! The run configuration file.
//!
//! A TOML document with a top-level `seed` and the tables `[arch]`,
//! `[training]`, `[data]` (with `[data.split]` and `[data.generator]`),
//! `[sweep]`, `[eval]` and `[output]`. Every key is optional; a missing key
//! takes its default. Unknown keys are rejected.

use std::path::Path;

use mil_core::bagio::Encoding;
use mil_core::mil::TrainConfig;
use mil_core::synth::{volume_seed, GenConfig, SplitSizes};
use mil_core::ArchConfig;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub arch: ArchConfig,
    pub training: TrainConfig,
    pub data: DataConfig,
    pub sweep: SweepConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub encoding: Encoding,
    /// Shuffle slice order inside every stored bag.
    pub shuffle_instances: bool,
    pub split: SplitSizes,
    pub generator: GenConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Training-set sizes, reported in this order.
    pub sizes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub folds: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Record measured wall time in logs; when off those columns hold 0 and
    /// every output file is a pure function of the configuration.
    pub wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            arch: ArchConfig::default(),
            training: TrainConfig::default(),
            data: DataConfig::default(),
            sweep: SweepConfig::default(),
            eval: EvalConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            encoding: Encoding::F32,
            shuffle_instances: false,
            split: SplitSizes::default(),
            generator: GenConfig::default(),
        }
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sizes: vec![400, 300, 200, 100, 50, 25],
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: 0.5, folds: 5 }
    }
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { wall_clock: true }
    }
}

/// Independent random streams derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 0,
    Init = 1,
    Shuffle = 2,
    Folds = 3,
    Subsets = 4,
    Instances = 5,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration always serializes")
    }

    pub fn stream_seed(&self, stream: Stream) -> u64 {
        volume_seed(self.seed, u64::MAX - 1 - stream as u64)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.training.validate()?;
        self.data.generator.validate()?;
        self.data.split.validate()?;
        if self.data.generator.in_plane != self.arch.input_height
            || self.data.generator.in_plane != self.arch.input_width
        {
            return Err(HarnessError::Config(format!(
                "generator slices are {0}x{0} but the network expects {1}x{2}",
                self.data.generator.in_plane, self.arch.input_height, self.arch.input_width
            )));
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(HarnessError::Config("eval.threshold must lie in (0, 1)".into()));
        }
        if self.eval.folds < 2 {
            return Err(HarnessError::Config("eval.folds must be at least 2".into()));
        }
        if self.sweep.sizes.is_empty() {
            return Err(HarnessError::Config("sweep.sizes is empty".into()));
        }
        if let Some(&n) = self.sweep.sizes.iter().find(|&&n| n < 2) {
            return Err(HarnessError::Config(format!(
                "sweep size {n} cannot hold one bag of each class"
            )));
        }
        Ok(())
    }
}
