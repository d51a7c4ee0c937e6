//! TOML run configuration shared by the command-line tools.
//!
//! ```toml
//! [synth]
//! shape = [32, 32, 32]
//! amplitude = 0.3
//!
//! [train]
//! lr = 0.002
//! steps = 300
//!
//! [train.net]
//! channels = [8, 16, 16]
//!
//! [eval]
//! threads = 2
//! ```
//!
//! Every section is optional and unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::SynthSpec;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Sliding-window size for inference; whole volumes when unset.
    pub patch: Option<[usize; 3]>,
    pub stride: Option<[usize; 3]>,
    /// Worker threads for per-case evaluation; 0 picks the CPU count.
    pub threads: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::Similarity;

    #[test]
    fn nested_sections_parse() {
        let cfg = RunConfig::from_toml(
            "[synth]\nshape = [16, 16, 16]\n[train]\nlr = 0.002\nsimilarity = \"ncc\"\n[train.net]\nchannels = [8, 16, 16]\n",
        )
        .unwrap();
        assert_eq!(cfg.synth.shape, [16, 16, 16]);
        assert_eq!(cfg.train.lr, 0.002);
        assert_eq!(cfg.train.similarity, Similarity::Ncc);
        assert_eq!(cfg.train.net.channels, vec![8, 16, 16]);
        assert_eq!(cfg.train.batch_size, 1);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("[synth]\nwobble = 3\n").unwrap_err();
        assert!(err.to_string().contains("wobble"), "{err}");
    }

    #[test]
    fn shipped_desk_config_parses() {
        let cfg = RunConfig::from_toml(include_str!("../../../configs/desk.toml")).unwrap();
        cfg.train.validate().unwrap();
        cfg.synth.validate().unwrap();
        assert_eq!(cfg.train.net.channels, vec![8, 16, 16]);
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }
}
