//! Dataset directories: `manifest.txt` plus per-subject files.
//!
//! Each subject `<name>` has `<name>.icvol` and optionally
//! `<name>.labels.icvol`, `<name>.landmarks.txt` and `<name>.flow.icvol`
//! (the ground-truth deformation of synthetic subjects).

use std::fs;
use std::path::{Path, PathBuf};

use icnet_core::synth::make_population;
use icnet_core::{GridShape, LabelMap, LandmarkSet, Volume};

use crate::error::{io_err, IoError, Result};
use crate::icvol;
use crate::landmarks::{load_landmarks, save_landmarks};

pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub name: String,
    pub volume: Volume,
    pub labels: Option<LabelMap>,
    pub landmarks: Option<LandmarkSet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dir: PathBuf,
    pub subjects: Vec<Subject>,
}

impl Dataset {
    pub fn volumes(&self) -> Vec<Volume> {
        self.subjects.iter().map(|s| s.volume.clone()).collect()
    }
}

/// Parameters of a synthetic population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub shape: GridShape,
    /// The population holds `2 * pairs` subjects.
    pub pairs: usize,
    pub max_disp: f64,
    pub blobs: usize,
}

pub fn subject_name(i: usize) -> String {
    format!("subject_{i:03}")
}

/// Generates a population deformed from one blob template and writes it.
pub fn write_synthetic(spec: &SynthSpec, dir: &Path) -> Result<Dataset> {
    let population = make_population(spec.seed, spec.shape, 2 * spec.pairs, spec.max_disp, spec.blobs)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let [dx, dy, dz] = spec.shape.extents();
    let mut manifest = format!(
        "icnet-dataset {DATASET_VERSION}\nseed {}\nshape {dx} {dy} {dz}\npairs {}\nmax_disp {}\nblobs {}\n",
        spec.seed, spec.pairs, spec.max_disp, spec.blobs
    );
    let mut subjects = Vec::with_capacity(population.len());
    for (i, s) in population.into_iter().enumerate() {
        let name = subject_name(i);
        icvol::save_volume(&s.volume, &dir.join(format!("{name}.icvol")))?;
        icvol::save_labels(&s.labels, &dir.join(format!("{name}.labels.icvol")))?;
        save_landmarks(&s.landmarks, &dir.join(format!("{name}.landmarks.txt")))?;
        icvol::save_flow(&s.flow, &dir.join(format!("{name}.flow.icvol")))?;
        manifest.push_str(&format!("subject {name}\n"));
        subjects.push(Subject {
            name,
            volume: s.volume,
            labels: Some(s.labels),
            landmarks: Some(s.landmarks),
        });
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(io_err(&path))?;
    Ok(Dataset {
        dir: dir.to_path_buf(),
        subjects,
    })
}

/// Subject names listed in a manifest, in order.
pub fn read_manifest(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut names = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let bad = |reason: String| IoError::Parse {
            path: path.clone(),
            line: i + 1,
            reason,
        };
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "icnet-dataset" if value.trim() == DATASET_VERSION.to_string() => {}
            "icnet-dataset" => return Err(bad(format!("unsupported dataset version `{value}`"))),
            "seed" | "shape" | "pairs" | "max_disp" | "blobs" => {}
            "subject" if !value.trim().is_empty() && !value.contains(['/', '\\']) => names.push(value.trim().to_string()),
            "subject" => return Err(bad(format!("invalid subject name `{value}`"))),
            _ => return Err(bad(format!("unknown manifest key `{key}`"))),
        }
    }
    if !text.starts_with("icnet-dataset ") {
        return Err(IoError::Parse {
            path,
            line: 1,
            reason: "missing `icnet-dataset` version line".into(),
        });
    }
    Ok(names)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mut subjects = Vec::new();
    for name in read_manifest(dir)? {
        let volume = icvol::load_volume(&dir.join(format!("{name}.icvol")))?;
        let labels_path = dir.join(format!("{name}.labels.icvol"));
        let labels = labels_path.exists().then(|| icvol::load_labels(&labels_path)).transpose()?;
        let lm_path = dir.join(format!("{name}.landmarks.txt"));
        let landmarks = lm_path.exists().then(|| load_landmarks(&lm_path)).transpose()?;
        subjects.push(Subject {
            name,
            volume,
            labels,
            landmarks,
        });
    }
    Ok(Dataset {
        dir: dir.to_path_buf(),
        subjects,
    })
}
