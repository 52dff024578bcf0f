//! Files, checkpoints and the `udl` command line around [`udl_core`].
//!
//! * [`dataset`]: the binary pair-record format and its JSON manifest;
//! * [`generate`]: dataset generation from image directories;
//! * [`checkpoint`]: safetensors weights with a JSON metadata sidecar;
//! * [`config`]: TOML run configuration;
//! * [`cli`]: the subcommands.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod generate;
pub mod images;
pub mod report;

pub use error::{Error, Result};
pub use udl_core;
