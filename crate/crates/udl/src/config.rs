//! TOML run configuration for `udl train`.
//!
//! ```toml
//! checkpoint_every = 1000
//!
//! [network]
//! preset = "reduced"        # or "standard"
//! fc_hidden = [512, 512]    # any architecture field may be overridden
//!
//! [train]
//! batch_size = 16
//! learning_rate = 5e-4
//! ```
//!
//! Unknown keys are rejected. Input dimensions come from the dataset unless
//! `height`/`width` are given.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use udl_core::network::{InputRepr, NetworkConfig};
use udl_core::udl::TrainConfig;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Standard,
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(default)]
    pub preset: Preset,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub mask_channels: Option<[usize; 4]>,
    pub extractor_channels: Option<[usize; 4]>,
    pub post_match_channels: Option<[usize; 2]>,
    pub fc_hidden: Option<[usize; 2]>,
    pub input_repr: Option<InputRepr>,
    pub output_scale: Option<f64>,
}

impl NetworkSection {
    /// Resolves the section for data of size `height`×`width`.
    pub fn build(&self, height: usize, width: usize) -> NetworkConfig {
        let (h, w) = (self.height.unwrap_or(height), self.width.unwrap_or(width));
        let mut cfg = match self.preset {
            Preset::Standard => NetworkConfig::standard(h, w),
            Preset::Reduced => NetworkConfig::reduced(h, w),
        };
        if let Some(v) = self.mask_channels {
            cfg.mask_channels = v;
        }
        if let Some(v) = self.extractor_channels {
            cfg.extractor_channels = v;
        }
        if let Some(v) = self.post_match_channels {
            cfg.post_match_channels = v;
        }
        if let Some(v) = self.fc_hidden {
            cfg.fc_hidden = v;
        }
        if let Some(v) = self.input_repr {
            cfg.input_repr = v;
        }
        if let Some(v) = self.output_scale {
            cfg.output_scale = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub train: TrainConfig,
    /// Write a checkpoint every this many iterations (0 = only at the end).
    #[serde(default)]
    pub checkpoint_every: u64,
}

pub fn parse_run_config(text: &str, path: &Path) -> Result<RunConfig> {
    toml::from_str(text).map_err(|e| Error::Config { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    parse_run_config(&text, path)
}
