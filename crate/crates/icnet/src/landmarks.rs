//! Landmark files: one whitespace-separated `x y z` triple per line.

use std::fs;
use std::path::Path;

use icnet_core::LandmarkSet;

use crate::error::{io_err, IoError, Result};

pub fn format_landmarks(set: &LandmarkSet) -> String {
    set.points
        .iter()
        .map(|[x, y, z]| format!("{x} {y} {z}\n"))
        .collect()
}

/// Blank lines and lines starting with `#` are skipped.
pub fn parse_landmarks(path: &Path, text: &str) -> Result<LandmarkSet> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |reason: String| IoError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let coords = line
            .split_whitespace()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| parse_err(format!("`{line}` is not three finite numbers")))?;
        let [x, y, z] = coords[..] else {
            return Err(parse_err(format!("expected 3 coordinates, got {}", coords.len())));
        };
        points.push([x, y, z]);
    }
    Ok(LandmarkSet::new(points))
}

pub fn save_landmarks(set: &LandmarkSet, path: &Path) -> Result<()> {
    fs::write(path, format_landmarks(set)).map_err(io_err(path))
}

pub fn load_landmarks(path: &Path) -> Result<LandmarkSet> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_landmarks(path, &text)
}
