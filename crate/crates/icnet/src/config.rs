//! `key = value` training configuration files.

use std::fs;
use std::path::Path;

use icnet_core::trainer::TrainConfig;

use crate::error::{io_err, IoError, Result};

/// Applies every assignment in `text` on top of the defaults.
///
/// `#` starts a comment; unknown keys and malformed lines are errors.
pub fn parse_config(path: &Path, text: &str) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| IoError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected `key = value`, got `{line}`")))?;
        config.set(key.trim(), value.trim()).map_err(|e| bad(e.to_string()))?;
    }
    config.validate().map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: 0,
        reason: e.to_string(),
    })?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(path, &text)
}

/// Inverse of [`parse_config`].
pub fn format_config(config: &TrainConfig) -> String {
    config
        .entries()
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}
