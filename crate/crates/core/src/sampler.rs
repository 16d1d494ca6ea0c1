//! Backward warping with trilinear interpolation (a 3D spatial transformer).
//!
//! Sample coordinates outside `[0, extent - 1]` are clamped to the border, so
//! every lookup is defined. On a clamped axis the derivative of the sample with
//! respect to the coordinate is zero.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::volume::{Flow, GridShape, LabelMap, Point3, Volume};

/// Lower lattice index, fractional offset and whether the coordinate was
/// strictly inside the sampling range (not clamped).
#[derive(Debug, Clone, Copy)]
struct AxisCell {
    base: usize,
    frac: f64,
    free: bool,
}

#[inline]
fn locate(q: f64, extent: usize) -> AxisCell {
    let last = (extent - 1) as f64;
    if q <= 0.0 {
        AxisCell { base: 0, frac: 0.0, free: false }
    } else if q >= last {
        AxisCell { base: extent - 2, frac: 1.0, free: false }
    } else {
        let base = (libm::floor(q) as usize).min(extent - 2);
        AxisCell { base, frac: q - base as f64, free: true }
    }
}

/// Precomputed trilinear stencil for one sample point.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    /// Offsets of the 8 corners within a channel, index bits = (dz, dy, dx).
    offsets: [usize; 8],
    weights: [f64; 8],
    cells: [AxisCell; 3],
}

impl Stencil {
    #[inline]
    fn new(shape: GridShape, q: Point3) -> Self {
        let [dx, dy, dz] = shape.extents();
        let cx = locate(q[0], dx);
        let cy = locate(q[1], dy);
        let cz = locate(q[2], dz);
        let base = (cz.base * dy + cy.base) * dx + cx.base;
        let wx = [1.0 - cx.frac, cx.frac];
        let wy = [1.0 - cy.frac, cy.frac];
        let wz = [1.0 - cz.frac, cz.frac];
        let mut offsets = [0; 8];
        let mut weights = [0.0; 8];
        for k in 0..8 {
            let (a, b, c) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            offsets[k] = base + (c * dy + b) * dx + a;
            weights[k] = wx[a] * wy[b] * wz[c];
        }
        Self { offsets, weights, cells: [cx, cy, cz] }
    }

    #[inline]
    fn value(&self, channel: &[f64]) -> f64 {
        let mut v = 0.0;
        for k in 0..8 {
            v += self.weights[k] * channel[self.offsets[k]];
        }
        v
    }

    /// Partial derivatives of the interpolated value along x, y and z.
    #[inline]
    fn coord_gradient(&self, channel: &[f64]) -> [f64; 3] {
        let f = [self.cells[0].frac, self.cells[1].frac, self.cells[2].frac];
        let w = |axis: usize, bit: usize| if bit == 1 { f[axis] } else { 1.0 - f[axis] };
        let mut g = [0.0; 3];
        for k in 0..8 {
            let bits = [k & 1, (k >> 1) & 1, (k >> 2) & 1];
            let v = channel[self.offsets[k]];
            for axis in 0..3 {
                if !self.cells[axis].free {
                    continue;
                }
                let sign = if bits[axis] == 1 { 1.0 } else { -1.0 };
                let mut prod = sign * v;
                for other in 0..3 {
                    if other != axis {
                        prod *= w(other, bits[other]);
                    }
                }
                g[axis] += prod;
            }
        }
        g
    }
}

#[inline]
fn sample_point(flow: &[f64], n: usize, shape: GridShape, off: usize) -> Point3 {
    let [x, y, z] = shape.coords(off);
    [
        x as f64 + flow[off],
        y as f64 + flow[n + off],
        z as f64 + flow[2 * n + off],
    ]
}

/// Forward warp on raw channel-major buffers. `flow` holds 3 channels.
pub(crate) fn warp_raw(image: &[f64], channels: usize, shape: GridShape, flow: &[f64]) -> Vec<f64> {
    let n = shape.voxels();
    let mut out = vec![0.0; channels * n];
    for off in 0..n {
        let st = Stencil::new(shape, sample_point(flow, n, shape, off));
        for c in 0..channels {
            out[c * n + off] = st.value(&image[c * n..(c + 1) * n]);
        }
    }
    out
}

/// Adjoint of [`warp_raw`]: accumulates into `grad_image` and/or `grad_flow`.
pub(crate) fn warp_raw_backward(
    image: &[f64],
    channels: usize,
    shape: GridShape,
    flow: &[f64],
    grad_out: &[f64],
    mut grad_image: Option<&mut [f64]>,
    mut grad_flow: Option<&mut [f64]>,
) {
    let n = shape.voxels();
    for off in 0..n {
        let st = Stencil::new(shape, sample_point(flow, n, shape, off));
        for c in 0..channels {
            let go = grad_out[c * n + off];
            if go == 0.0 {
                continue;
            }
            if let Some(gi) = grad_image.as_deref_mut() {
                let gc = &mut gi[c * n..(c + 1) * n];
                for k in 0..8 {
                    gc[st.offsets[k]] += go * st.weights[k];
                }
            }
            if let Some(gf) = grad_flow.as_deref_mut() {
                let g = st.coord_gradient(&image[c * n..(c + 1) * n]);
                for axis in 0..3 {
                    gf[axis * n + off] += go * g[axis];
                }
            }
        }
    }
}

/// Trilinear interpolation of every channel at a continuous point.
pub fn trilinear_sample(vol: &Volume, point: Point3) -> Vec<f64> {
    let shape = vol.shape();
    let st = Stencil::new(shape, point);
    (0..vol.channels()).map(|c| st.value(vol.channel(c))).collect()
}

fn check_same_grid(op: &'static str, a: GridShape, b: GridShape) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.extents().to_vec(),
            rhs: b.extents().to_vec(),
        });
    }
    Ok(())
}

/// Backward warp: `out(p) = vol(p + flow(p))`, all channels.
pub fn warp(vol: &Volume, flow: &Flow) -> Result<Volume> {
    check_same_grid("warp", vol.shape(), flow.shape())?;
    let data = warp_raw(vol.data(), vol.channels(), vol.shape(), flow.data());
    Volume::new(vol.shape(), vol.channels(), data)
}

/// Nearest-neighbour backward warp for label maps. Half-way coordinates round
/// toward the lower index.
pub fn warp_nearest(labels: &LabelMap, flow: &Flow) -> Result<LabelMap> {
    let shape = labels.shape();
    check_same_grid("warp_nearest", shape, flow.shape())?;
    let n = shape.voxels();
    let ext = shape.extents();
    let src = labels.labels();
    let mut out = Vec::with_capacity(n);
    for off in 0..n {
        let q = sample_point(flow.data(), n, shape, off);
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let r = libm::ceil(q[a] - 0.5).clamp(0.0, (ext[a] - 1) as f64);
            idx[a] = r as usize;
        }
        out.push(src[shape.offset(idx[0], idx[1], idx[2])]);
    }
    LabelMap::new(shape, out)
}

/// Grid-sampled inverse of a flow: `-flow` resampled under `flow` itself,
/// i.e. `out(p) = -flow(p + flow(p))`.
pub fn estimate_inverse(flow: &Flow) -> Flow {
    let neg = flow.volume().map(|v| -v);
    let data = warp_raw(neg.data(), 3, flow.shape(), flow.data());
    Flow::new(Volume::new(flow.shape(), 3, data).expect("finite by construction"))
        .expect("three channels")
}

/// Moves a point by the (interpolated) displacement at that point.
pub fn map_point(flow: &Flow, point: Point3) -> Point3 {
    let d = trilinear_sample(flow.volume(), point);
    [point[0] + d[0], point[1] + d[1], point[2] + d[2]]
}
