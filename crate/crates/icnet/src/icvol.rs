//! The ICVOL container: a short text header followed by a little-endian
//! payload in channel-major, x-fastest order.
//!
//! ```text
//! ICVOL1
//! dims <dx> <dy> <dz>
//! channels <c>
//! dtype f32|f64|u16
//! data
//! ```
//!
//! Volumes and flows are written as `f32`, so a round trip is exact only for
//! values representable in single precision. Checkpoints use `f64`.

use std::fs;
use std::path::Path;

use icnet_core::{Flow, GridShape, LabelMap, Volume};

use crate::error::{io_err, IoError, Result};

pub const MAGIC: &str = "ICVOL1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U16,
}

impl Dtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
            Dtype::U16 => "u16",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U16 => 2,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            "u16" => Some(Dtype::U16),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub dims: [usize; 3],
    pub channels: usize,
    pub dtype: Dtype,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Real(Vec<f64>),
    Labels(Vec<u16>),
}

/// # Panics
///
/// If the payload variant does not match `header.dtype`.
pub fn encode(header: &Header, payload: &Payload) -> Vec<u8> {
    let [dx, dy, dz] = header.dims;
    let mut out = format!(
        "{MAGIC}\ndims {dx} {dy} {dz}\nchannels {}\ndtype {}\ndata\n",
        header.channels,
        header.dtype.as_str()
    )
    .into_bytes();
    match (header.dtype, payload) {
        (Dtype::F32, Payload::Real(v)) => v.iter().for_each(|&x| out.extend((x as f32).to_le_bytes())),
        (Dtype::F64, Payload::Real(v)) => v.iter().for_each(|&x| out.extend(x.to_le_bytes())),
        (Dtype::U16, Payload::Labels(v)) => v.iter().for_each(|&x| out.extend(x.to_le_bytes())),
        (d, _) => panic!("payload does not match dtype {}", d.as_str()),
    }
    out
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<(Header, Payload)> {
    let header_err = |reason: String| IoError::Header {
        path: path.to_path_buf(),
        reason,
    };
    let dim_err = |reason: String| IoError::Dimension {
        path: path.to_path_buf(),
        reason,
    };

    let mut rest = bytes;
    let mut line = |what: &str| -> Result<&str> {
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| header_err(format!("missing `{what}` line")))?;
        let text = std::str::from_utf8(&rest[..end]).map_err(|_| header_err(format!("`{what}` line is not text")))?;
        rest = &rest[end + 1..];
        Ok(text)
    };

    if line("ICVOL1")? != MAGIC {
        return Err(header_err("missing ICVOL1 magic".into()));
    }
    let dims_line = line("dims")?;
    let fields: Vec<&str> = dims_line.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "dims" {
        return Err(header_err(format!("expected `dims <dx> <dy> <dz>`, got `{dims_line}`")));
    }
    let mut dims = [0usize; 3];
    for (d, f) in dims.iter_mut().zip(&fields[1..]) {
        *d = f.parse().map_err(|_| dim_err(format!("`{f}` is not a non-negative integer")))?;
    }
    let channels_line = line("channels")?;
    let channels: usize = match channels_line.split_whitespace().collect::<Vec<_>>()[..] {
        ["channels", c] => c.parse().map_err(|_| dim_err(format!("`{c}` is not a non-negative integer")))?,
        _ => return Err(header_err(format!("expected `channels <c>`, got `{channels_line}`"))),
    };
    let dtype_line = line("dtype")?;
    let dtype = match dtype_line.split_whitespace().collect::<Vec<_>>()[..] {
        ["dtype", t] => Dtype::parse(t).ok_or_else(|| header_err(format!("unknown dtype `{t}`")))?,
        _ => return Err(header_err(format!("expected `dtype <t>`, got `{dtype_line}`"))),
    };
    if line("data")? != "data" {
        return Err(header_err("missing `data` line".into()));
    }

    if dims.contains(&0) || channels == 0 {
        return Err(dim_err(format!("dims {dims:?} x {channels} channel(s) hold no voxels")));
    }
    let expected = dims
        .iter()
        .try_fold(channels, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| dim_err(format!("dims {dims:?} x {channels} channel(s) overflow")))?;
    if rest.len() < expected {
        return Err(IoError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: rest.len(),
        });
    }
    if rest.len() > expected {
        return Err(IoError::Trailing {
            path: path.to_path_buf(),
            extra: rest.len() - expected,
        });
    }

    let payload = match dtype {
        Dtype::F32 => Payload::Real(
            rest.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        ),
        Dtype::F64 => Payload::Real(rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        Dtype::U16 => Payload::Labels(rest.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap())).collect()),
    };
    Ok((Header { dims, channels, dtype }, payload))
}

pub fn read(path: &Path) -> Result<(Header, Payload)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(path, &bytes)
}

pub fn write(path: &Path, header: &Header, payload: &Payload) -> Result<()> {
    fs::write(path, encode(header, payload)).map_err(io_err(path))
}

fn volume_header(vol: &Volume, dtype: Dtype) -> Header {
    Header {
        dims: vol.shape().extents(),
        channels: vol.channels(),
        dtype,
    }
}

pub fn save_volume(vol: &Volume, path: &Path) -> Result<()> {
    write(path, &volume_header(vol, Dtype::F32), &Payload::Real(vol.data().to_vec()))
}

/// Double-precision variant used where bit-exact round trips matter.
pub fn save_volume_f64(vol: &Volume, path: &Path) -> Result<()> {
    write(path, &volume_header(vol, Dtype::F64), &Payload::Real(vol.data().to_vec()))
}

/// Loads an `f32` or `f64` file of any channel count.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let (h, payload) = read(path)?;
    let Payload::Real(data) = payload else {
        return Err(IoError::Kind {
            path: path.to_path_buf(),
            expected: "real-valued volume".into(),
            actual: "u16 label map".into(),
        });
    };
    let [dx, dy, dz] = h.dims;
    Ok(Volume::new(GridShape::new(dx, dy, dz)?, h.channels, data)?)
}

pub fn save_flow(flow: &Flow, path: &Path) -> Result<()> {
    save_volume(flow.volume(), path)
}

pub fn load_flow(path: &Path) -> Result<Flow> {
    let vol = load_volume(path)?;
    if vol.channels() != 3 {
        return Err(IoError::Kind {
            path: path.to_path_buf(),
            expected: "3-channel flow".into(),
            actual: format!("{} channel(s)", vol.channels()),
        });
    }
    Ok(Flow::new(vol)?)
}

pub fn save_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    let header = Header {
        dims: labels.shape().extents(),
        channels: 1,
        dtype: Dtype::U16,
    };
    write(path, &header, &Payload::Labels(labels.labels().to_vec()))
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let (h, payload) = read(path)?;
    let kind = |actual: String| IoError::Kind {
        path: path.to_path_buf(),
        expected: "single-channel u16 label map".into(),
        actual,
    };
    let Payload::Labels(labels) = payload else {
        return Err(kind(format!("dtype {}", h.dtype.as_str())));
    };
    if h.channels != 1 {
        return Err(kind(format!("{} channels", h.channels)));
    }
    let [dx, dy, dz] = h.dims;
    Ok(LabelMap::new(GridShape::new(dx, dy, dz)?, labels)?)
}
