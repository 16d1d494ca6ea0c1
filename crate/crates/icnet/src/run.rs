//! Run directories: exclusive lock, run manifest and process setup.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use icnet_core::trainer::{DatasetSplit, TrainConfig, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON, CURVE_HEADER};

use crate::checkpoint::CHECKPOINT_VERSION;
use crate::dataset::DATASET_VERSION;
use crate::error::{io_err, IoError, Result};

pub const RUN_MANIFEST: &str = "run.txt";
pub const LOCK_FILE: &str = ".lock";

/// Exclusive ownership of a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    /// Creates `dir` if needed and claims it; fails if already claimed.
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(io_err(&path))?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(IoError::Locked { path }),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Everything needed to reproduce a training run, one `key value` per line.
pub fn run_manifest(config: &TrainConfig, data: &Path, volumes: usize, split: &DatasetSplit) -> String {
    let list = |ix: &[usize]| ix.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
    let mut text = format!(
        "icnet-run 1\ncheckpoint_version {CHECKPOINT_VERSION}\ndataset_version {DATASET_VERSION}\nicvol_version 1\n\
         curve_columns {CURVE_HEADER}\nadam_beta1 {ADAM_BETA1}\nadam_beta2 {ADAM_BETA2}\nadam_epsilon {ADAM_EPSILON}\n"
    );
    for (k, v) in config.entries() {
        text.push_str(&format!("{k} {v}\n"));
    }
    text.push_str(&format!(
        "data {}\nvolumes {volumes}\ntrain {}\nvalidation {}\n",
        data.display(),
        list(&split.train),
        list(&split.validation)
    ));
    text
}

/// Keeps large training buffers on the heap instead of fresh `mmap`s, which
/// otherwise page-fault on every step.
pub fn configure_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 256 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}
