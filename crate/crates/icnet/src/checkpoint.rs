//! Parameter checkpoints: a directory holding `manifest.txt` and one `f64`
//! ICVOL file per kernel and bias tensor.

use std::fs;
use std::path::Path;

use icnet_core::network::{FcnConfig, FcnParams};

use crate::error::{io_err, IoError, Result};
use crate::icvol::{self, Dtype, Header, Payload};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";

fn tensor_file(layer: &str, part: &str) -> String {
    format!("{layer}.{part}.icvol")
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn manifest_text(params: &FcnParams) -> String {
    let c = &params.config;
    let mut text = format!(
        "icnet-checkpoint {CHECKPOINT_VERSION}\nn {}\ndepth {}\ntau {}\n",
        c.n, c.depth, c.tau
    );
    for layer in &params.layers {
        text.push_str(&format!(
            "layer {} kernel {} bias {}\n",
            layer.name,
            shape_str(layer.kernel.shape()),
            shape_str(layer.bias.shape())
        ));
    }
    text
}

pub fn save_checkpoint(params: &FcnParams, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for layer in &params.layers {
        for (part, tensor) in [("kernel", &layer.kernel), ("bias", &layer.bias)] {
            let header = Header {
                dims: [tensor.len(), 1, 1],
                channels: 1,
                dtype: Dtype::F64,
            };
            icvol::write(
                &dir.join(tensor_file(&layer.name, part)),
                &header,
                &Payload::Real(tensor.data().to_vec()),
            )?;
        }
    }
    let manifest = dir.join(MANIFEST);
    fs::write(&manifest, manifest_text(params)).map_err(io_err(&manifest))
}

pub fn load_checkpoint(dir: &Path) -> Result<FcnParams> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut lines = text.lines().enumerate();
    let mut field = |key: &str| -> Result<String> {
        let (i, line) = lines.next().ok_or_else(|| IoError::Parse {
            path: path.clone(),
            line: 0,
            reason: format!("missing `{key}` line"),
        })?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.to_string()),
            _ => Err(IoError::Parse {
                path: path.clone(),
                line: i + 1,
                reason: format!("expected `{key} <value>`, got `{line}`"),
            }),
        }
    };
    let bad = |line: usize, reason: String| IoError::Parse {
        path: path.clone(),
        line,
        reason,
    };
    let version = field("icnet-checkpoint")?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(bad(1, format!("unsupported checkpoint version {version}")));
    }
    let n = field("n")?.parse().map_err(|_| bad(2, "n is not an integer".into()))?;
    let depth = field("depth")?.parse().map_err(|_| bad(3, "depth is not an integer".into()))?;
    let tau = field("tau")?.parse().map_err(|_| bad(4, "tau is not a number".into()))?;
    let mut params = FcnParams::zeros(FcnConfig { n, depth, tau })?;

    let manifest_layers: Vec<&str> = text.lines().skip(4).filter(|l| !l.trim().is_empty()).collect();
    if manifest_layers.len() != params.layers.len() {
        return Err(bad(
            5,
            format!(
                "{} layers listed but the configuration has {}",
                manifest_layers.len(),
                params.layers.len()
            ),
        ));
    }
    for (i, (line, layer)) in manifest_layers.iter().zip(params.layers.iter_mut()).enumerate() {
        let expected = format!(
            "layer {} kernel {} bias {}",
            layer.name,
            shape_str(layer.kernel.shape()),
            shape_str(layer.bias.shape())
        );
        if *line != expected {
            return Err(bad(i + 5, format!("expected `{expected}`, got `{line}`")));
        }
        for (part, tensor) in [("kernel", &mut layer.kernel), ("bias", &mut layer.bias)] {
            let file = dir.join(tensor_file(&layer.name, part));
            let (header, payload) = icvol::read(&file)?;
            match payload {
                Payload::Real(values) if values.len() == tensor.len() && header.channels == 1 => {
                    tensor.data_mut().copy_from_slice(&values)
                }
                _ => {
                    return Err(IoError::Kind {
                        path: file,
                        expected: format!("{} real values", tensor.len()),
                        actual: format!("{:?} x{} {}", header.dims, header.channels, header.dtype.as_str()),
                    })
                }
            }
        }
    }
    params.validate()?;
    Ok(params)
}
