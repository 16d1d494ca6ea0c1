//! Dense 3D grids: scalar/vector volumes, label maps and landmark sets.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use crate::error::{Error, Result};

/// Continuous voxel coordinate `[x, y, z]`.
pub type Point3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Axis> {
        Axis::ALL.get(i).copied()
    }
}

/// Voxel extents along x, y and z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridShape {
    dx: usize,
    dy: usize,
    dz: usize,
}

impl GridShape {
    pub fn new(dx: usize, dy: usize, dz: usize) -> Result<Self> {
        if dx < 2 || dy < 2 || dz < 2 {
            return Err(Error::InvalidShape(dx, dy, dz));
        }
        Ok(Self { dx, dy, dz })
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::new(n, n, n)
    }

    pub fn dx(&self) -> usize {
        self.dx
    }

    pub fn dy(&self) -> usize {
        self.dy
    }

    pub fn dz(&self) -> usize {
        self.dz
    }

    /// Extents as `[dx, dy, dz]`.
    pub fn extents(&self) -> [usize; 3] {
        [self.dx, self.dy, self.dz]
    }

    pub fn extent(&self, axis: Axis) -> usize {
        self.extents()[axis.index()]
    }

    pub fn voxels(&self) -> usize {
        self.dx * self.dy * self.dz
    }

    pub fn min_extent(&self) -> usize {
        self.dx.min(self.dy).min(self.dz)
    }

    /// Linear offset of voxel `(x, y, z)` within one channel.
    #[inline]
    pub fn offset(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dy + y) * self.dx + x
    }

    /// Inverse of [`GridShape::offset`].
    #[inline]
    pub fn coords(&self, offset: usize) -> [usize; 3] {
        let x = offset % self.dx;
        let y = (offset / self.dx) % self.dy;
        let z = offset / (self.dx * self.dy);
        [x, y, z]
    }

    pub fn contains(&self, p: &Point3) -> bool {
        p.iter()
            .zip(self.extents())
            .all(|(&c, e)| c >= 0.0 && c <= (e - 1) as f64)
    }

    /// Tensor shape `[channels, dz, dy, dx]` used on the autodiff tape.
    pub fn tensor_shape(&self, channels: usize) -> Vec<usize> {
        vec![channels, self.dz, self.dy, self.dx]
    }

    /// Recovers a grid shape from a `[channels, dz, dy, dx]` tensor shape.
    pub fn from_tensor_shape(shape: &[usize]) -> Result<(usize, Self)> {
        match *shape {
            [c, dz, dy, dx] => Ok((c, GridShape::new(dx, dy, dz)?)),
            _ => Err(Error::ShapeMismatch {
                op: "grid",
                lhs: shape.to_vec(),
                rhs: vec![0; 4],
            }),
        }
    }
}

/// Multi-channel scalar grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: GridShape,
    channels: usize,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(shape: GridShape, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Channels {
                op: "volume",
                expected: 1,
                actual: 0,
            });
        }
        let expected = channels
            .checked_mul(shape.voxels())
            .ok_or(Error::InvalidShape(shape.dx, shape.dy, shape.dz))?;
        if data.len() != expected {
            return Err(Error::DataLength {
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            shape,
            channels,
            data,
        })
    }

    pub fn zeros(shape: GridShape, channels: usize) -> Self {
        Self {
            shape,
            channels,
            data: vec![0.0; channels * shape.voxels()],
        }
    }

    /// Builds a volume by evaluating `f(channel, [x, y, z])` at every voxel.
    pub fn from_fn(shape: GridShape, channels: usize, mut f: impl FnMut(usize, [usize; 3]) -> f64) -> Self {
        let n = shape.voxels();
        let mut data = Vec::with_capacity(channels * n);
        for c in 0..channels {
            for off in 0..n {
                data.push(f(c, shape.coords(off)));
            }
        }
        Self {
            shape,
            channels,
            data,
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.shape.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.shape.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f64 {
        self.data[c * self.shape.voxels() + self.shape.offset(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, z: usize, v: f64) {
        let i = c * self.shape.voxels() + self.shape.offset(x, y, z);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Extracts a 2D slice perpendicular to `axis` and scales it to bytes.
    ///
    /// Single-channel volumes produce one grey plane; three-channel volumes
    /// produce an RGB plane with every channel min-max scaled on its own.
    /// A constant channel maps to mid-grey (128).
    pub fn slice(&self, axis: Axis, index: usize) -> Result<SliceImage> {
        let extent = self.shape.extent(axis);
        if index >= extent {
            return Err(Error::IndexOutOfRange { index, extent });
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Channels {
                op: "slice",
                expected: 3,
                actual: self.channels,
            });
        }
        let [dx, dy, dz] = self.shape.extents();
        // (width, height) and the voxel for pixel (u, v)
        let (width, height) = match axis {
            Axis::X => (dy, dz),
            Axis::Y => (dx, dz),
            Axis::Z => (dx, dy),
        };
        let voxel = |u: usize, v: usize| match axis {
            Axis::X => (index, u, v),
            Axis::Y => (u, index, v),
            Axis::Z => (u, v, index),
        };

        let mut planes = Vec::with_capacity(self.channels);
        let mut bounds = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let mut plane = Vec::with_capacity(width * height);
            for v in 0..height {
                for u in 0..width {
                    let (x, y, z) = voxel(u, v);
                    plane.push(self.get(c, x, y, z));
                }
            }
            let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            bounds.push((lo, hi));
            planes.push(plane);
        }

        let mut pixels = Vec::with_capacity(width * height * self.channels);
        for i in 0..width * height {
            for (plane, &(lo, hi)) in planes.iter().zip(&bounds) {
                pixels.push(scale_to_byte(plane[i], lo, hi));
            }
        }
        Ok(SliceImage {
            width,
            height,
            channels: self.channels,
            pixels,
            bounds,
        })
    }
}

fn scale_to_byte(v: f64, lo: f64, hi: f64) -> u8 {
    if hi <= lo {
        return 128;
    }
    let t = (v - lo) / (hi - lo);
    libm::round(t * 255.0).clamp(0.0, 255.0) as u8
}

/// An 8-bit slice ready to be written as a portable graymap/pixmap.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    pub width: usize,
    pub height: usize,
    /// 1 (grey) or 3 (RGB), interleaved in `pixels`.
    pub channels: usize,
    pub pixels: Vec<u8>,
    /// Per-channel `(min, max)` used for scaling.
    pub bounds: Vec<(f64, f64)>,
}

/// A three-channel volume of voxel displacements.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow(Volume);

impl Flow {
    pub fn new(volume: Volume) -> Result<Self> {
        if volume.channels != 3 {
            return Err(Error::Channels {
                op: "flow",
                expected: 3,
                actual: volume.channels,
            });
        }
        Ok(Self(volume))
    }

    pub fn zeros(shape: GridShape) -> Self {
        Self(Volume::zeros(shape, 3))
    }

    /// Same displacement `t` at every voxel.
    pub fn constant(shape: GridShape, t: Point3) -> Self {
        Self(Volume::from_fn(shape, 3, |c, _| t[c]))
    }

    pub fn from_fn(shape: GridShape, mut f: impl FnMut([usize; 3]) -> Point3) -> Self {
        let n = shape.voxels();
        let mut data = vec![0.0; 3 * n];
        for off in 0..n {
            let d = f(shape.coords(off));
            for c in 0..3 {
                data[c * n + off] = d[c];
            }
        }
        Self(Volume {
            shape,
            channels: 3,
            data,
        })
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.0.data_mut()
    }

    /// Displacement vector at voxel `(x, y, z)`.
    pub fn at(&self, x: usize, y: usize, z: usize) -> Point3 {
        [
            self.0.get(0, x, y, z),
            self.0.get(1, x, y, z),
            self.0.get(2, x, y, z),
        ]
    }

    pub fn max_abs(&self) -> f64 {
        self.0.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0.map(|v| v * s))
    }
}

impl Deref for Flow {
    type Target = Volume;

    fn deref(&self) -> &Volume {
        &self.0
    }
}

/// One integer label per voxel, `0` is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    shape: GridShape,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(shape: GridShape, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != shape.voxels() {
            return Err(Error::DataLength {
                expected: shape.voxels(),
                actual: labels.len(),
            });
        }
        Ok(Self { shape, labels })
    }

    pub fn filled(shape: GridShape, label: u16) -> Self {
        Self {
            shape,
            labels: vec![label; shape.voxels()],
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u16] {
        &mut self.labels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.labels[self.shape.offset(x, y, z)]
    }

    /// Sorted distinct non-background labels.
    pub fn foreground_labels(&self) -> Vec<u16> {
        let mut seen: Vec<u16> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }

    pub fn mask(&self, label: u16) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            shape: self.shape,
            channels: 1,
            data: self.labels.iter().map(|&l| f64::from(l)).collect(),
        }
    }
}

/// Ordered landmark positions in continuous voxel coordinates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkSet {
    pub points: Vec<Point3>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks that every point lies inside `[0, extent - 1]` on each axis.
    pub fn validate(&self, shape: GridShape) -> Result<()> {
        for p in &self.points {
            if !shape.contains(p) {
                return Err(Error::Dataset(alloc::format!(
                    "landmark ({}, {}, {}) outside grid",
                    p[0], p[1], p[2]
                )));
            }
        }
        Ok(())
    }
}

/// Z-score normalization: zero mean, unit population standard deviation.
/// A constant input yields all zeros.
pub fn zscore_normalize(vol: &Volume) -> Result<Volume> {
    if vol.channels != 1 {
        return Err(Error::Channels {
            op: "zscore_normalize",
            expected: 1,
            actual: vol.channels,
        });
    }
    let n = vol.data.len() as f64;
    let mean = vol.data.iter().sum::<f64>() / n;
    let var = vol.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    if std <= f64::EPSILON * mean.abs().max(1.0) {
        return Ok(vol.map(|_| 0.0));
    }
    Ok(vol.map(|v| (v - mean) / std))
}
