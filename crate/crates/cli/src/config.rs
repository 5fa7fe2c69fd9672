//! The TOML run configuration: `[data]`, `[model]`, `[train]` and `[protocol]`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use voxatn::cloudio::ClassLabel;
use voxatn::padeval::{ProtocolMode, ProtocolSpec};
use voxatn::synthface::DatasetSpec;
use voxatn::voxatnnet::{ModelConfig, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    pub mode: ProtocolMode,
    /// Defaults per mode when omitted: intra uses the silicone mask,
    /// inter trains on masks and tests on wraps, both uses both.
    pub train_pai: Option<Vec<ClassLabel>>,
    pub test_pai: Option<Vec<ClassLabel>>,
    /// Seed of the identity shuffle that assigns train and test.
    pub seed: u64,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            mode: ProtocolMode::Intra,
            train_pai: None,
            test_pai: None,
            seed: 0,
        }
    }
}

impl ProtocolSection {
    pub fn spec(&self) -> Result<ProtocolSpec, CliError> {
        let defaults = match self.mode {
            ProtocolMode::Intra => {
                let pai = self
                    .train_pai
                    .as_ref()
                    .or(self.test_pai.as_ref())
                    .and_then(|v| v.first().copied())
                    .unwrap_or(ClassLabel::SiliconeMask);
                ProtocolSpec::intra(pai)
            }
            ProtocolMode::Inter => ProtocolSpec::inter(ClassLabel::SiliconeMask, ClassLabel::WrapPhoto),
            ProtocolMode::Both => ProtocolSpec::both(),
        };
        let spec = ProtocolSpec {
            mode: self.mode,
            train_pai: self.train_pai.clone().unwrap_or(defaults.train_pai),
            test_pai: self.test_pai.clone().unwrap_or(defaults.test_pai),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolSection,
}

/// Command-line settings applied on top of the file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub resolution: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::User(format!("config: {}", e.message().trim())))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::User(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(seed) = o.seed {
            self.data.seed = seed;
            self.model.init_seed = seed;
            self.train.rng_seed = seed;
            self.train.augment.rng_seed = seed;
            self.protocol.seed = seed;
        }
        if let Some(r) = o.resolution {
            self.model.input_resolution = r;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.protocol.spec()?;
        Ok(())
    }

    /// The fully resolved configuration, suitable for re-running.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("[train]\nepcohs = 3\n").unwrap_err();
        assert!(err.to_string().contains("epcohs"), "{err}");
        let err = RunConfig::parse("[modle]\n").unwrap_err();
        assert!(err.to_string().contains("modle"), "{err}");
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::parse(
            "[model]\nattention_enabled = false\n[train]\nepochs = 3\n[train.augment]\nrotation_copies = 2\n[protocol]\nmode = \"both\"\n",
        )
        .unwrap();
        cfg.apply(Overrides {
            seed: Some(9),
            resolution: Some(16),
        });
        assert_eq!(cfg.model.input_resolution, 16);
        assert_eq!(cfg.train.augment.rotation_copies, 2);
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn protocol_defaults() {
        let p = |s: &str| RunConfig::parse(s).unwrap().protocol.spec().unwrap();
        assert_eq!(p(""), ProtocolSpec::intra(ClassLabel::SiliconeMask));
        assert_eq!(
            p("[protocol]\nmode = \"intra\"\ntrain_pai = [\"wrap_photo\"]\n"),
            ProtocolSpec::intra(ClassLabel::WrapPhoto)
        );
        assert_eq!(
            p("[protocol]\nmode = \"inter\"\ntrain_pai = [\"wrap_photo\"]\ntest_pai = [\"silicone_mask\"]\n"),
            ProtocolSpec::inter(ClassLabel::WrapPhoto, ClassLabel::SiliconeMask)
        );
        let bad = RunConfig::parse("[protocol]\nmode = \"inter\"\ntrain_pai = [\"wrap_photo\"]\ntest_pai = [\"wrap_photo\"]\n").unwrap();
        assert!(bad.protocol.spec().is_err());
    }
}
