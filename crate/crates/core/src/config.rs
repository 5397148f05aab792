//! Run configuration: one TOML file with a section per component.
//!
//! ```toml
//! [corpus]      # synthetic corpus sizes, SNR grids, symbol inventory
//! [features]
//! [arch]        # recognizer layout
//! [train]       # criterion, LF-MMI options, optimizer schedule
//! [separation]  # mask estimator for pipelined systems
//! [experiment]  # grid schedule
//! [seeds]
//! [paths]
//! ```
//!
//! Every section and key is optional; missing values take their defaults.
//! Checkpoints embed [`RunConfig::to_toml`] so they can be decoded without
//! the original file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::separation::MaskNetConfig;
use crate::seqtrain::TrainConfig;
use crate::synthdata::{CorpusConfig, Snr};
use crate::tdnn::ArchConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Mean/variance normalization with statistics from the clean training
    /// utterances.
    pub normalize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { normalize: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Epochs of visual-only frame classification used to initialise the
    /// visual front-end of every system that reads `v`; 0 disables it.
    pub pretrain_epochs: usize,
    /// Epochs for systems trained on clean data. Systems trained on the
    /// much larger mult* set use `mult_epochs` instead.
    pub clean_epochs: usize,
    pub mult_epochs: usize,
    /// Overlapped test conditions of the Table 2/3 grid; `AVE` is their
    /// unweighted mean. The Table 1 grid always scores clean test data.
    pub test_snrs: Vec<Snr>,
    /// Cap on dev utterances decoded after each epoch (0 = all).
    pub dev_limit: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 4,
            clean_epochs: 20,
            mult_epochs: 4,
            test_snrs: Snr::test_grid(),
            dev_limit: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    /// Every random draw in a run is derived from this value.
    pub root: u64,
    /// Seed of the synthetic corpus when it should stay fixed while `root`
    /// varies; defaults to `root`.
    pub corpus: Option<u64>,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { root: 1, corpus: None }
    }
}

impl SeedConfig {
    pub fn corpus_seed(&self) -> u64 {
        self.corpus.unwrap_or(self.root)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    /// Output directory of `train` and `experiment`.
    pub out: PathBuf,
    /// Corpus directory; relative paths are resolved against `out`.
    pub corpus: PathBuf,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("run"),
            corpus: PathBuf::from("corpus"),
        }
    }
}

impl PathConfig {
    pub fn corpus_dir(&self) -> PathBuf {
        if self.corpus.is_absolute() {
            self.corpus.clone()
        } else {
            self.out.join(&self.corpus)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub features: FeatureConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub separation: MaskNetConfig,
    pub experiment: ExperimentConfig,
    pub seeds: SeedConfig,
    pub paths: PathConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.arch.validate()?;
        let t = &self.train;
        if !(0.0..1.0).contains(&t.leaky) {
            return Err(Error::Config(format!("leaky must be in [0, 1), got {}", t.leaky)));
        }
        if t.lambda_ce < 0.0 {
            return Err(Error::Config("lambda_ce must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&t.p_self) || t.p_self == 0.0 {
            return Err(Error::Config(format!("p_self must be in (0, 1), got {}", t.p_self)));
        }
        if t.batch_size == 0 || self.separation.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(t.lr > 0.0 && t.lr_final > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if t.lm_scale <= 0.0 {
            return Err(Error::Config("lm_scale must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialization, optionally salted with
    /// extra text (e.g. a grid cell label).
    pub fn hash(&self, salt: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        h.update([0u8]);
        h.update(salt.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tdnn::FusionMode;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.arch.fusion = FusionMode::Avgate;
        c.arch.plus_concat = true;
        c.corpus.test_snrs = vec![Snr::Db(-5.0), Snr::Clean];
        c.seeds.root = 42;
        c.seeds.corpus = Some(7);
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash("x"), c.hash("x"));
        assert_ne!(c.hash("x"), c.hash("y"));
    }

    #[test]
    fn partial_sections_and_errors() {
        let c = RunConfig::from_toml("[train]\ncriterion = \"ce\"\nepochs = 3\n[seeds]\nroot = 9\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.seeds.root, 9);
        assert_eq!(c.arch, ArchConfig::default());
        assert!(RunConfig::from_toml("[train]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[train]\nleaky = 1.5\n").is_err());
        assert!(RunConfig::from_toml("[arch]\nfusion = \"concat\"\nplus_concat = true\n").is_err());
    }

    #[test]
    fn relative_corpus_dir_hangs_off_out() {
        let mut p = PathConfig::default();
        p.out = PathBuf::from("/tmp/x");
        assert_eq!(p.corpus_dir(), PathBuf::from("/tmp/x/corpus"));
        p.corpus = PathBuf::from("/data/c");
        assert_eq!(p.corpus_dir(), PathBuf::from("/data/c"));
    }
}
