//! Layered settings: built-in defaults, then a JSON config file, then the
//! environment, then command-line flags.
//!
//! Clap already orders defaults < env < flags. A file value replaces an
//! argument only when clap reports that argument's value as a default (or
//! absent), which slots the file in between.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::{Deserialize, Serialize};

/// Contents of `--config`. Every field is optional; unknown keys are errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub workdir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub gated_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub beta: Option<f64>,
    pub lambda_purity: Option<f64>,
    pub lambda_focus: Option<f64>,
    pub expert_vq: Option<bool>,
    pub freeze_codebook: Option<bool>,
    pub recon_full_stack: Option<bool>,
    pub loss_log: Option<PathBuf>,
    pub d_model: Option<usize>,
    pub num_heads: Option<usize>,
    pub num_layers: Option<usize>,
    pub codebook_size: Option<usize>,
    pub ffn_hidden: Option<usize>,
    pub intuition: Option<bool>,
    pub data: Option<PathBuf>,
    pub samples: Option<usize>,
    pub train_fraction: Option<f64>,
    pub min_gate: Option<f64>,
    pub theta: Option<f64>,
    pub sample_size: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Resolves one argument. `matches` must be the matches of the subcommand
/// that owns (or inherits, for globals) the argument `id`.
pub fn pick<T>(matches: &ArgMatches, id: &str, parsed: T, file: Option<T>) -> T {
    let overridable = matches!(matches.value_source(id), None | Some(ValueSource::DefaultValue));
    match file {
        Some(v) if overridable => v,
        _ => parsed,
    }
}

/// Like [`pick`] for arguments with no default, where absence is `None`.
pub fn pick_opt<T>(matches: &ArgMatches, id: &str, parsed: Option<T>, file: Option<T>) -> Option<T> {
    pick(matches, id, parsed, file.map(Some))
}
