//! Binary PGM/PPM output for volume and flow slices.

use std::fs;
use std::path::{Path, PathBuf};

use icnet_core::volume::{Axis, SliceImage};
use icnet_core::Volume;

use crate::error::{io_err, Result};

/// `P5` for grey images, `P6` for RGB.
pub fn encode_netpbm(img: &SliceImage) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// One `bounds` line listing the per-channel `min max` used for scaling.
pub fn bounds_line(img: &SliceImage) -> String {
    let mut line = String::from("bounds");
    for (lo, hi) in &img.bounds {
        line.push_str(&format!(" {lo} {hi}"));
    }
    line.push('\n');
    line
}

/// Sidecar path: `<path>.bounds.txt`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".bounds.txt");
    PathBuf::from(s)
}

/// Writes the slice image and its bounds sidecar.
pub fn export_slice(vol: &Volume, axis: Axis, index: usize, path: &Path) -> Result<SliceImage> {
    let img = vol.slice(axis, index)?;
    fs::write(path, encode_netpbm(&img)).map_err(io_err(path))?;
    let side = sidecar_path(path);
    fs::write(&side, bounds_line(&img)).map_err(io_err(&side))?;
    Ok(img)
}
