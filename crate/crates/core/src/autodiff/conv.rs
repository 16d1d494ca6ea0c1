//! Dense 3D convolution kernels and their adjoints.
//!
//! Tensors are `[channels, z, y, x]`. Convolutions use a 3x3x3 kernel with
//! zero padding 1 and stride 1 or 2, so output extents are
//! `(extent - 1) / stride + 1`. Transposed convolutions use a 2x2x2 kernel
//! with stride 2 and exactly double every extent.

use alloc::vec;
use alloc::vec::Vec;

pub(crate) type Dims = [usize; 4];

pub(crate) fn conv_out_extent(extent: usize, stride: usize) -> usize {
    (extent - 1) / stride + 1
}

pub(crate) fn conv_out_dims(input: Dims, out_channels: usize, stride: usize) -> Dims {
    [
        out_channels,
        conv_out_extent(input[1], stride),
        conv_out_extent(input[2], stride),
        conv_out_extent(input[3], stride),
    ]
}

/// Output indices `o` in `[lo, hi)` whose input `o * stride + k - 1` is inside `[0, extent)`.
#[inline]
fn valid_range(k: usize, stride: usize, extent: usize, out_extent: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if extent + 1 > k {
        ((extent + 1 - k - 1) / stride + 1).min(out_extent)
    } else {
        0
    };
    (lo, hi.max(lo))
}

struct Geometry {
    cin: usize,
    i: Dims,
    o: Dims,
    stride: usize,
}

impl Geometry {
    fn new(input: Dims, cout: usize, stride: usize) -> Self {
        Self {
            cin: input[0],
            i: input,
            o: conv_out_dims(input, cout, stride),
            stride,
        }
    }

    fn in_plane(&self) -> usize {
        self.i[1] * self.i[2] * self.i[3]
    }

    fn out_plane(&self) -> usize {
        self.o[1] * self.o[2] * self.o[3]
    }

    /// Visits every (output row, input row) pair touched by kernel tap `(kz, ky)`.
    #[inline]
    fn rows(&self, kz: usize, ky: usize, mut f: impl FnMut(usize, usize)) {
        let s = self.stride;
        let (zlo, zhi) = valid_range(kz, s, self.i[1], self.o[1]);
        let (ylo, yhi) = valid_range(ky, s, self.i[2], self.o[2]);
        for oz in zlo..zhi {
            let iz = oz * s + kz - 1;
            for oy in ylo..yhi {
                let iy = oy * s + ky - 1;
                f(
                    (oz * self.o[2] + oy) * self.o[3],
                    (iz * self.i[2] + iy) * self.i[3],
                );
            }
        }
    }
}

/// Lanes per output chunk of the stride-1 kernels.
const LANES: usize = 8;
/// Output channels accumulated together.
const BLOCK: usize = 4;
/// Output positions per cache tile of the weight adjoint.
const TILE: usize = 256;
/// Lanes per chunk of the weight adjoint.
const WLANES: usize = 4;

/// Stride-1 geometry on a zero-padded grid. Outputs are computed at flat
/// padded positions `q = (z * py + y) * px + x`, so kernel tap `t` reads the
/// padded input at `q + taps[t]` for every output; columns with `x >= dx`
/// are scratch.
struct Padded {
    d: [usize; 3],
    py: usize,
    px: usize,
    plane: usize,
    /// Last output position plus one, rounded up to whole chunks.
    span: usize,
    taps: [usize; 27],
}

impl Padded {
    fn new(dims: Dims) -> Self {
        let d = [dims[1], dims[2], dims[3]];
        let (py, px) = (d[1] + 2, d[2] + 2);
        let last = ((d[0] - 1) * py + d[1] - 1) * px + d[2] - 1;
        let mut taps = [0; 27];
        for (t, tap) in taps.iter_mut().enumerate() {
            *tap = ((t / 9) * py + (t / 3) % 3) * px + t % 3;
        }
        Self {
            d,
            py,
            px,
            plane: (d[0] + 2) * py * px,
            span: (last + 1).div_ceil(LANES) * LANES,
            taps,
        }
    }

    /// Channel-strided padded copy with a zero tail for whole-chunk reads.
    fn pad(&self, data: &[f64], channels: usize) -> Vec<f64> {
        let [dz, dy, dx] = self.d;
        let mut out = vec![0.0; channels * self.plane + self.span + LANES];
        for c in 0..channels {
            for z in 0..dz {
                for y in 0..dy {
                    let src = &data[((c * dz + z) * dy + y) * dx..][..dx];
                    let at = c * self.plane + ((z + 1) * self.py + y + 1) * self.px + 1;
                    out[at..at + dx].copy_from_slice(src);
                }
            }
        }
        out
    }

    /// Output-layout copy (`span` per channel), scratch columns zeroed.
    fn spread(&self, data: &[f64], channels: usize) -> Vec<f64> {
        let [dz, dy, dx] = self.d;
        let mut out = vec![0.0; channels * self.span];
        for c in 0..channels {
            for z in 0..dz {
                for y in 0..dy {
                    let src = &data[((c * dz + z) * dy + y) * dx..][..dx];
                    let at = c * self.span + (z * self.py + y) * self.px;
                    out[at..at + dx].copy_from_slice(src);
                }
            }
        }
        out
    }

    /// Adds output-layout rows back into a dense tensor.
    fn gather_add(&self, src: &[f64], channels: usize, dst: &mut [f64]) {
        let [dz, dy, dx] = self.d;
        for c in 0..channels {
            for z in 0..dz {
                for y in 0..dy {
                    let from = &src[c * self.span + (z * self.py + y) * self.px..][..dx];
                    let to = &mut dst[((c * dz + z) * dy + y) * dx..][..dx];
                    for (t, f) in to.iter_mut().zip(from) {
                        *t += f;
                    }
                }
            }
        }
    }
}

/// Weights regrouped as `[cout / BLOCK][cin][27][BLOCK]`, zero-filled past `cout`.
fn block_weights(weight: &[f64], cout: usize, cin: usize, flip_transpose: bool) -> Vec<f64> {
    let blocks = cout.div_ceil(BLOCK);
    let mut out = vec![0.0; blocks * cin * 27 * BLOCK];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..27 {
                let w = if flip_transpose {
                    weight[(ci * cout + co) * 27 + 26 - t]
                } else {
                    weight[(co * cin + ci) * 27 + t]
                };
                out[(((co / BLOCK) * cin + ci) * 27 + t) * BLOCK + co % BLOCK] = w;
            }
        }
    }
    out
}

/// Stride-1 convolution added into `out` (dense layout). With
/// `flip_transpose` the kernel is `weight[ci][co]` mirrored, which is the
/// input adjoint of a forward convolution.
fn conv_s1_add(input: &[f64], dims: Dims, weight: &[f64], cout: usize, flip_transpose: bool, out: &mut [f64]) {
    let cin = dims[0];
    let g = Padded::new(dims);
    let padded = g.pad(input, cin);
    let wb = block_weights(weight, cout, cin, flip_transpose);
    let blocks = cout.div_ceil(BLOCK);
    let mut res = vec![0.0; blocks * BLOCK * g.span];
    for b in 0..blocks {
        for q0 in (0..g.span).step_by(LANES) {
            let mut acc = [[0.0; LANES]; BLOCK];
            for ci in 0..cin {
                let src = &padded[ci * g.plane + q0..];
                let wc = &wb[(b * cin + ci) * 27 * BLOCK..][..27 * BLOCK];
                for (&tap, w) in g.taps.iter().zip(wc.chunks_exact(BLOCK)) {
                    let x: &[f64; LANES] = src[tap..tap + LANES].try_into().unwrap();
                    for (a, &wv) in acc.iter_mut().zip(w) {
                        for (al, &xl) in a.iter_mut().zip(x) {
                            *al += wv * xl;
                        }
                    }
                }
            }
            for (c, a) in acc.iter().enumerate() {
                res[(b * BLOCK + c) * g.span + q0..][..LANES].copy_from_slice(a);
            }
        }
    }
    g.gather_add(&res, cout, out);
}

/// Per-lane sums of `rows[c][q] * src[q + kx]` over `q < len`.
#[inline(never)]
fn weight_tile(src: &[f64], rows: &[&[f64]; BLOCK], len: usize) -> [[[f64; WLANES]; 3]; BLOCK] {
    let mut acc = [[[0.0; WLANES]; 3]; BLOCK];
    for q0 in (0..len).step_by(WLANES) {
        let x = &src[q0..q0 + WLANES + 2];
        for (ac, r) in acc.iter_mut().zip(rows) {
            let go: &[f64; WLANES] = r[q0..q0 + WLANES].try_into().unwrap();
            for (kx, a) in ac.iter_mut().enumerate() {
                let xa: &[f64; WLANES] = x[kx..kx + WLANES].try_into().unwrap();
                for l in 0..WLANES {
                    a[l] += go[l] * xa[l];
                }
            }
        }
    }
    acc
}

/// Weight adjoint of a stride-1 convolution added into `gw`.
fn conv_s1_weight_grad(input: &[f64], dims: Dims, cout: usize, grad_out: &[f64], gw: &mut [f64]) {
    let cin = dims[0];
    let g = Padded::new(dims);
    let padded = g.pad(input, cin);
    let blocks = cout.div_ceil(BLOCK);
    let mut spread = g.spread(grad_out, cout);
    spread.resize(blocks * BLOCK * g.span, 0.0);
    for b in 0..blocks {
        for t0 in (0..g.span).step_by(TILE) {
            let len = (t0 + TILE).min(g.span) - t0;
            let rows: [&[f64]; BLOCK] = core::array::from_fn(|c| &spread[(b * BLOCK + c) * g.span + t0..][..len]);
            for ci in 0..cin {
                for row in 0..9 {
                    let src = &padded[ci * g.plane + g.taps[row * 3] + t0..][..len + 2];
                    let acc = weight_tile(src, &rows, len);
                    for (c, ac) in acc.iter().enumerate() {
                        let co = b * BLOCK + c;
                        if co < cout {
                            for (kx, a) in ac.iter().enumerate() {
                                gw[(co * cin + ci) * 27 + row * 3 + kx] += a.iter().sum::<f64>();
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `weight` is `[cout, cin, 3, 3, 3]`, `bias` is `[cout]`.
pub(crate) fn conv3d(input: &[f64], dims: Dims, weight: &[f64], bias: &[f64], stride: usize) -> (Vec<f64>, Dims) {
    let cout = bias.len();
    let g = Geometry::new(dims, cout, stride);
    let (ip, op) = (g.in_plane(), g.out_plane());
    let ox = g.o[3];
    let mut out = vec![0.0; cout * op];
    for co in 0..cout {
        out[co * op..(co + 1) * op].fill(bias[co]);
    }
    if stride == 1 {
        conv_s1_add(input, dims, weight, cout, false, &mut out);
        return (out, g.o);
    }
    for co in 0..cout {
        let oc = &mut out[co * op..(co + 1) * op];
        for ci in 0..g.cin {
            let ic = &input[ci * ip..(ci + 1) * ip];
            let wbase = (co * g.cin + ci) * 27;
            for kz in 0..3 {
                for ky in 0..3 {
                    let taps = &weight[wbase + kz * 9 + ky * 3..wbase + kz * 9 + ky * 3 + 3];
                    g.rows(kz, ky, |orow, irow| {
                        let o = &mut oc[orow..orow + ox];
                        let i = &ic[irow..irow + g.i[3]];
                        for (kx, &w) in taps.iter().enumerate() {
                            let (lo, hi) = valid_range(kx, stride, g.i[3], ox);
                            if stride == 1 {
                                let src = &i[lo + kx - 1..hi + kx - 1];
                                for (a, b) in o[lo..hi].iter_mut().zip(src) {
                                    *a += w * b;
                                }
                            } else {
                                for x in lo..hi {
                                    o[x] += w * i[x * stride + kx - 1];
                                }
                            }
                        }
                    });
                }
            }
        }
    }
    (out, g.o)
}

/// Accumulates the adjoints of [`conv3d`] for the requested operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward(
    input: &[f64],
    dims: Dims,
    weight: &[f64],
    cout: usize,
    stride: usize,
    grad_out: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_weight: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let g = Geometry::new(dims, cout, stride);
    let (ip, op) = (g.in_plane(), g.out_plane());
    let ox = g.o[3];

    if let Some(gb) = grad_bias {
        for co in 0..cout {
            gb[co] += grad_out[co * op..(co + 1) * op].iter().sum::<f64>();
        }
    }

    if stride == 1 {
        if let Some(gw) = grad_weight {
            conv_s1_weight_grad(input, dims, cout, grad_out, gw);
        }
        if let Some(gi) = grad_input {
            conv_s1_add(grad_out, [cout, dims[1], dims[2], dims[3]], weight, g.cin, true, gi);
        }
        return;
    }

    if let Some(gw) = grad_weight {
        for co in 0..cout {
            let goc = &grad_out[co * op..(co + 1) * op];
            for ci in 0..g.cin {
                let ic = &input[ci * ip..(ci + 1) * ip];
                let wbase = (co * g.cin + ci) * 27;
                for kz in 0..3 {
                    for ky in 0..3 {
                        let mut acc = [0.0; 3];
                        g.rows(kz, ky, |orow, irow| {
                            let o = &goc[orow..orow + ox];
                            let i = &ic[irow..irow + g.i[3]];
                            for (kx, a) in acc.iter_mut().enumerate() {
                                let (lo, hi) = valid_range(kx, stride, g.i[3], ox);
                                if stride == 1 {
                                    let src = &i[lo + kx - 1..hi + kx - 1];
                                    *a += o[lo..hi].iter().zip(src).map(|(p, q)| p * q).sum::<f64>();
                                } else {
                                    for x in lo..hi {
                                        *a += o[x] * i[x * stride + kx - 1];
                                    }
                                }
                            }
                        });
                        for kx in 0..3 {
                            gw[wbase + kz * 9 + ky * 3 + kx] += acc[kx];
                        }
                    }
                }
            }
        }
    }

    if let Some(gi) = grad_input {
        for co in 0..cout {
            let goc = &grad_out[co * op..(co + 1) * op];
            for ci in 0..g.cin {
                let gic = &mut gi[ci * ip..(ci + 1) * ip];
                let wbase = (co * g.cin + ci) * 27;
                for kz in 0..3 {
                    for ky in 0..3 {
                        let taps = &weight[wbase + kz * 9 + ky * 3..wbase + kz * 9 + ky * 3 + 3];
                        g.rows(kz, ky, |orow, irow| {
                            let o = &goc[orow..orow + ox];
                            let i = &mut gic[irow..irow + g.i[3]];
                            for (kx, &w) in taps.iter().enumerate() {
                                let (lo, hi) = valid_range(kx, stride, g.i[3], ox);
                                if stride == 1 {
                                    let dst = &mut i[lo + kx - 1..hi + kx - 1];
                                    for (a, b) in dst.iter_mut().zip(&o[lo..hi]) {
                                        *a += w * b;
                                    }
                                } else {
                                    for x in lo..hi {
                                        i[x * stride + kx - 1] += w * o[x];
                                    }
                                }
                            }
                        });
                    }
                }
            }
        }
    }
}

pub(crate) fn deconv_out_dims(input: Dims, out_channels: usize) -> Dims {
    [out_channels, 2 * input[1], 2 * input[2], 2 * input[3]]
}

/// Transposed convolution, kernel 2x2x2, stride 2. `weight` is
/// `[cin, cout, 2, 2, 2]`, `bias` is `[cout]`.
pub(crate) fn deconv3d(input: &[f64], dims: Dims, weight: &[f64], bias: &[f64]) -> (Vec<f64>, Dims) {
    let cin = dims[0];
    let cout = bias.len();
    let o = deconv_out_dims(dims, cout);
    let ip = dims[1] * dims[2] * dims[3];
    let op = o[1] * o[2] * o[3];
    let mut out = vec![0.0; cout * op];
    for co in 0..cout {
        out[co * op..(co + 1) * op].fill(bias[co]);
    }
    for ci in 0..cin {
        let ic = &input[ci * ip..(ci + 1) * ip];
        for co in 0..cout {
            let w = &weight[(ci * cout + co) * 8..(ci * cout + co) * 8 + 8];
            let oc = &mut out[co * op..(co + 1) * op];
            for z in 0..dims[1] {
                for y in 0..dims[2] {
                    let irow = &ic[(z * dims[2] + y) * dims[3]..][..dims[3]];
                    for kz in 0..2 {
                        for ky in 0..2 {
                            let orow = ((2 * z + kz) * o[2] + 2 * y + ky) * o[3];
                            let (w0, w1) = (w[kz * 4 + ky * 2], w[kz * 4 + ky * 2 + 1]);
                            let dst = &mut oc[orow..orow + o[3]];
                            for (pair, &v) in dst.chunks_exact_mut(2).zip(irow) {
                                pair[0] += w0 * v;
                                pair[1] += w1 * v;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, o)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deconv3d_backward(
    input: &[f64],
    dims: Dims,
    weight: &[f64],
    cout: usize,
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_weight: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let cin = dims[0];
    let o = deconv_out_dims(dims, cout);
    let ip = dims[1] * dims[2] * dims[3];
    let op = o[1] * o[2] * o[3];
    if let Some(gb) = grad_bias {
        for co in 0..cout {
            gb[co] += grad_out[co * op..(co + 1) * op].iter().sum::<f64>();
        }
    }
    for ci in 0..cin {
        let ic = &input[ci * ip..(ci + 1) * ip];
        for co in 0..cout {
            let wo = (ci * cout + co) * 8;
            let goc = &grad_out[co * op..(co + 1) * op];
            let mut acc = [0.0; 8];
            for z in 0..dims[1] {
                for y in 0..dims[2] {
                    let ioff = (z * dims[2] + y) * dims[3];
                    for kz in 0..2 {
                        for ky in 0..2 {
                            let orow = ((2 * z + kz) * o[2] + 2 * y + ky) * o[3];
                            let src = &goc[orow..orow + o[3]];
                            let k = kz * 4 + ky * 2;
                            if grad_weight.is_some() {
                                let irow = &ic[ioff..ioff + dims[3]];
                                for (pair, &v) in src.chunks_exact(2).zip(irow) {
                                    acc[k] += pair[0] * v;
                                    acc[k + 1] += pair[1] * v;
                                }
                            }
                            if let Some(gi) = grad_input.as_deref_mut() {
                                let (w0, w1) = (weight[wo + k], weight[wo + k + 1]);
                                let dst = &mut gi[ci * ip + ioff..ci * ip + ioff + dims[3]];
                                for (d, pair) in dst.iter_mut().zip(src.chunks_exact(2)) {
                                    *d += w0 * pair[0] + w1 * pair[1];
                                }
                            }
                        }
                    }
                }
            }
            if let Some(gw) = grad_weight.as_deref_mut() {
                for k in 0..8 {
                    gw[wo + k] += acc[k];
                }
            }
        }
    }
}
