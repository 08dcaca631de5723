//! The single run configuration shared by every command.

use std::fs;
use std::path::{Path, PathBuf};

use amod_core::augment::AugmentConfig;
use amod_core::eval::ThresholdRule;
use amod_core::modality::ModalityConfig;
use amod_core::net::TrainConfig;
use amod_core::trackio::{SynthConfig, TestShift};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Protocol list files of one evaluation protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolPaths {
    pub id: u32,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub protocols: Vec<ProtocolPaths>,
}

/// A synthetic protocol: shared track parameters plus its own test shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthProtocol {
    pub id: u32,
    #[serde(default)]
    pub shift: TestShift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthPlan {
    /// Track parameters; `test_shift` is replaced by each protocol's shift.
    pub tracks: SynthConfig,
    pub protocols: Vec<SynthProtocol>,
}

impl Default for SynthPlan {
    fn default() -> Self {
        SynthPlan {
            tracks: SynthConfig::default(),
            protocols: vec![
                SynthProtocol {
                    id: 1,
                    shift: TestShift::default(),
                },
                SynthProtocol {
                    id: 2,
                    shift: TestShift {
                        motion_scale: 0.6,
                        tone_shift: 0.15,
                        unseen_print_style: false,
                    },
                },
                SynthProtocol {
                    id: 3,
                    shift: TestShift {
                        motion_scale: 1.8,
                        tone_shift: 0.0,
                        unseen_print_style: true,
                    },
                },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold_rule: ThresholdRule,
    /// Tracks per inference batch.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold_rule: ThresholdRule::MinAcer,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthPlan,
    pub augment: AugmentConfig,
    pub modality: ModalityConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            data: DataConfig::default(),
            synth: SynthPlan::default(),
            augment: AugmentConfig::default(),
            modality: ModalityConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a config file; protocol paths are taken relative to its folder.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in &mut cfg.data.protocols {
            for f in [&mut p.train, &mut p.dev, &mut p.test] {
                if f.is_relative() {
                    *f = base.join(&*f);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the serialized effective configuration.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> CliResult<()> {
        self.augment.validate()?;
        self.modality.validate()?;
        self.train.validate()?;
        if self.augment.target_size != self.modality.size {
            return Err(CliError::Config(format!(
                "augment.target_size ({}) must equal modality.size ({})",
                self.augment.target_size, self.modality.size
            )));
        }
        if self.eval.batch_size == 0 {
            return Err(CliError::Config("eval.batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Protocols to run, optionally restricted to one id. Every list file
    /// must exist.
    pub fn protocols(&self, only: Option<u32>) -> CliResult<Vec<ProtocolPaths>> {
        if self.data.protocols.is_empty() {
            return Err(CliError::Config("no [[data.protocols]] configured".into()));
        }
        let chosen: Vec<_> = self
            .data
            .protocols
            .iter()
            .filter(|p| only.is_none_or(|id| p.id == id))
            .cloned()
            .collect();
        if chosen.is_empty() {
            return Err(CliError::Config(format!("protocol {} is not configured", only.unwrap_or(0))));
        }
        for p in &chosen {
            for f in [&p.train, &p.dev, &p.test] {
                if !f.is_file() {
                    return Err(CliError::Config(format!("protocol list {} does not exist", f.display())));
                }
            }
        }
        Ok(chosen)
    }
}
