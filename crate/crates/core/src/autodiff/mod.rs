//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation in execution order, so the node list is
//! topologically sorted by construction. [`Tape::backward`] walks it once in
//! reverse, accumulating adjoints into operands in a fixed order, which makes
//! gradients bit-reproducible.
//!
//! ```
//! use icnet_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.square(x);
//! let s = tape.sum(y);
//! let grads = tape.backward(s).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```

mod conv;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::sampler;
use crate::volume::{Axis, GridShape, Volume};

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DataLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    /// `[channels, dz, dy, dx]` view of a volume.
    pub fn from_volume(vol: &Volume) -> Self {
        Self {
            shape: vol.shape().tensor_shape(vol.channels()),
            data: vol.data().to_vec(),
        }
    }

    pub fn to_volume(&self) -> Result<Volume> {
        let (c, grid) = GridShape::from_tensor_shape(&self.shape)?;
        Volume::new(grid, c, self.data.clone())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn dims4(&self) -> [usize; 4] {
        [self.shape[0], self.shape[1], self.shape[2], self.shape[3]]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Square(Var),
    Sum(Var),
    Relu(Var),
    Tanh(Var),
    Concat(Var, Var),
    SelectChannel(Var, usize),
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    },
    Deconv {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Warp {
        image: Var,
        flow: Var,
    },
    ForwardDiff(Var, Axis),
    MaskedWeightedSum(Var, Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    /// Whether any leaf is reachable through this node.
    tracked: bool,
}

/// Append-only operation record.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of the tape's leaves after a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the node is not a leaf or the root does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.adjoints.get(var.0).and_then(|a| a.as_deref())
    }

    /// Gradient of `var`, zeros when the root does not depend on it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// The single value of a scalar node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives an adjoint.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, record: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, record, tracked))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, record: Op) -> Var {
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().map(|&x| f(x)).collect(),
        };
        let tracked = self.tracked(a);
        self.push(value, record, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("subtract", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("multiply", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| s * x, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::Offset(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, libm::tanh, Op::Tanh(a))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    /// `sum_i weights[i] * a[i]` with constant weights.
    pub fn masked_weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.data(a).len() {
            return Err(mismatch("masked_weighted_sum", self.shape(a), &[weights.len()]));
        }
        let s = self.data(a).iter().zip(&weights).map(|(x, w)| x * w).sum();
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::scalar(s), Op::MaskedWeightedSum(a, weights), tracked))
    }

    fn check_grid(&self, op: &'static str, a: Var) -> Result<[usize; 4]> {
        let s = self.shape(a);
        if s.len() != 4 {
            return Err(mismatch(op, s, &[0, 0, 0, 0]));
        }
        Ok(self.nodes[a.0].value.dims4())
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let da = self.check_grid("concat_channels", a)?;
        let db = self.check_grid("concat_channels", b)?;
        if da[1..] != db[1..] {
            return Err(mismatch("concat_channels", &da, &db));
        }
        let mut data = Vec::with_capacity(self.data(a).len() + self.data(b).len());
        data.extend_from_slice(self.data(a));
        data.extend_from_slice(self.data(b));
        let value = Tensor {
            shape: vec![da[0] + db[0], da[1], da[2], da[3]],
            data,
        };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Concat(a, b), tracked))
    }

    /// One channel of a `[c, z, y, x]` tensor, kept 4-dimensional.
    pub fn select_channel(&mut self, a: Var, channel: usize) -> Result<Var> {
        let d = self.check_grid("select_channel", a)?;
        if channel >= d[0] {
            return Err(Error::IndexOutOfRange {
                index: channel,
                extent: d[0],
            });
        }
        let plane = d[1] * d[2] * d[3];
        let data = self.data(a)[channel * plane..(channel + 1) * plane].to_vec();
        let value = Tensor {
            shape: vec![1, d[1], d[2], d[3]],
            data,
        };
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::SelectChannel(a, channel), tracked))
    }

    /// 3x3x3 convolution, zero padding 1, stride 1 or 2.
    /// `weight` is `[cout, cin, 3, 3, 3]` and `bias` is `[cout]`.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let d = self.check_grid("conv3d", input)?;
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if !(stride == 1 || stride == 2) {
            return Err(Error::Config(alloc::format!("conv3d stride {stride} not supported")));
        }
        if ws.len() != 5 || ws[1] != d[0] || ws[2..] != [3, 3, 3] || bs != [ws[0]] {
            return Err(mismatch("conv3d", &d, &ws));
        }
        let (out, o) = conv::conv3d(self.data(input), d, self.data(weight), self.data(bias), stride);
        let tracked = self.tracked(input) || self.tracked(weight) || self.tracked(bias);
        Ok(self.push(
            Tensor {
                shape: o.to_vec(),
                data: out,
            },
            Op::Conv {
                input,
                weight,
                bias,
                stride,
            },
            tracked,
        ))
    }

    /// 2x2x2 transposed convolution with stride 2; every extent doubles.
    /// `weight` is `[cin, cout, 2, 2, 2]` and `bias` is `[cout]`.
    pub fn deconv3d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let d = self.check_grid("deconv3d", input)?;
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if ws.len() != 5 || ws[0] != d[0] || ws[2..] != [2, 2, 2] || bs != [ws[1]] {
            return Err(mismatch("deconv3d", &d, &ws));
        }
        let (out, o) = conv::deconv3d(self.data(input), d, self.data(weight), self.data(bias));
        let tracked = self.tracked(input) || self.tracked(weight) || self.tracked(bias);
        Ok(self.push(
            Tensor {
                shape: o.to_vec(),
                data: out,
            },
            Op::Deconv {
                input,
                weight,
                bias,
            },
            tracked,
        ))
    }

    /// Backward warp of `image` (`[c, z, y, x]`) by `flow` (`[3, z, y, x]`),
    /// differentiable in both.
    pub fn warp(&mut self, image: Var, flow: Var) -> Result<Var> {
        let di = self.check_grid("warp", image)?;
        let df = self.check_grid("warp", flow)?;
        if df[0] != 3 {
            return Err(Error::Channels {
                op: "warp",
                expected: 3,
                actual: df[0],
            });
        }
        if di[1..] != df[1..] {
            return Err(mismatch("warp", &di, &df));
        }
        let (_, grid) = GridShape::from_tensor_shape(&di)?;
        let out = sampler::warp_raw(self.data(image), di[0], grid, self.data(flow));
        let tracked = self.tracked(image) || self.tracked(flow);
        Ok(self.push(
            Tensor {
                shape: di.to_vec(),
                data: out,
            },
            Op::Warp { image, flow },
            tracked,
        ))
    }

    /// `out(p) = a(p + e_axis) - a(p)`, zero where `p` has no forward neighbour.
    pub fn forward_difference(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let d = self.check_grid("forward_difference", a)?;
        let mut out = vec![0.0; self.data(a).len()];
        forward_difference(self.data(a), d, axis, &mut out);
        let tracked = self.tracked(a);
        Ok(self.push(
            Tensor {
                shape: d.to_vec(),
                data: out,
            },
            Op::ForwardDiff(a, axis),
            tracked,
        ))
    }

    /// Adjoints of every leaf with respect to the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.nodes[root.0].value.data.len() != 1 {
            return Err(Error::NonScalarRoot(self.nodes[root.0].value.shape.clone()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match adj[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(node, &g, &mut adj);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        // Buffer for operand `v`, allocated on first touch; `None` if untracked.
        fn slot<'a>(tape: &Tape, adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
            if !tape.tracked(v) {
                return None;
            }
            let len = tape.data(v).len();
            Some(adj[v.0].get_or_insert_with(|| vec![0.0; len]))
        }

        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if let Some(ga) = slot(self, adj, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot(self, adj, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(self, adj, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot(self, adj, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                if let Some(ga) = slot(self, adj, *a) {
                    for ((x, y), w) in ga.iter_mut().zip(g).zip(vb) {
                        *x += y * w;
                    }
                }
                if let Some(gb) = slot(self, adj, *b) {
                    for ((x, y), w) in gb.iter_mut().zip(g).zip(va) {
                        *x += y * w;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot(self, adj, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Offset(a) => {
                if let Some(ga) = slot(self, adj, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Square(a) => {
                let va = self.data(*a);
                if let Some(ga) = slot(self, adj, *a) {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(va) {
                        *x += 2.0 * v * y;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(self, adj, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::MaskedWeightedSum(a, w) => {
                if let Some(ga) = slot(self, adj, *a) {
                    ga.iter_mut().zip(w).for_each(|(x, w)| *x += g[0] * w);
                }
            }
            Op::Relu(a) => {
                let va = self.data(*a);
                if let Some(ga) = slot(self, adj, *a) {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(va) {
                        if *v > 0.0 {
                            *x += y;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                let out = &node.value.data;
                if let Some(ga) = slot(self, adj, *a) {
                    for ((x, y), t) in ga.iter_mut().zip(g).zip(out) {
                        *x += y * (1.0 - t * t);
                    }
                }
            }
            Op::Concat(a, b) => {
                let na = self.data(*a).len();
                if let Some(ga) = slot(self, adj, *a) {
                    ga.iter_mut().zip(&g[..na]).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot(self, adj, *b) {
                    gb.iter_mut().zip(&g[na..]).for_each(|(x, y)| *x += y);
                }
            }
            Op::SelectChannel(a, c) => {
                let plane = g.len();
                if let Some(ga) = slot(self, adj, *a) {
                    ga[c * plane..(c + 1) * plane]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, y)| *x += y);
                }
            }
            Op::Conv {
                input,
                weight,
                bias,
                stride,
            } => {
                let d = self.nodes[input.0].value.dims4();
                let cout = self.shape(*weight)[0];
                let mut gi = slot(self, adj, *input).map(core::mem::take);
                let mut gw = slot(self, adj, *weight).map(core::mem::take);
                let mut gb = slot(self, adj, *bias).map(core::mem::take);
                conv::conv3d_backward(
                    self.data(*input),
                    d,
                    self.data(*weight),
                    cout,
                    *stride,
                    g,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                restore(adj, *input, gi);
                restore(adj, *weight, gw);
                restore(adj, *bias, gb);
            }
            Op::Deconv {
                input,
                weight,
                bias,
            } => {
                let d = self.nodes[input.0].value.dims4();
                let cout = self.shape(*weight)[1];
                let mut gi = slot(self, adj, *input).map(core::mem::take);
                let mut gw = slot(self, adj, *weight).map(core::mem::take);
                let mut gb = slot(self, adj, *bias).map(core::mem::take);
                conv::deconv3d_backward(
                    self.data(*input),
                    d,
                    self.data(*weight),
                    cout,
                    g,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                restore(adj, *input, gi);
                restore(adj, *weight, gw);
                restore(adj, *bias, gb);
            }
            Op::Warp { image, flow } => {
                let d = self.nodes[image.0].value.dims4();
                let (_, grid) = GridShape::from_tensor_shape(&d).expect("checked in forward");
                let mut gi = slot(self, adj, *image).map(core::mem::take);
                let mut gf = slot(self, adj, *flow).map(core::mem::take);
                sampler::warp_raw_backward(
                    self.data(*image),
                    d[0],
                    grid,
                    self.data(*flow),
                    g,
                    gi.as_deref_mut(),
                    gf.as_deref_mut(),
                );
                restore(adj, *image, gi);
                restore(adj, *flow, gf);
            }
            Op::ForwardDiff(a, axis) => {
                let d = self.nodes[a.0].value.dims4();
                if let Some(ga) = slot(self, adj, *a) {
                    forward_difference_adjoint(g, d, *axis, ga);
                }
            }
        }
    }
}

fn restore(adj: &mut [Option<Vec<f64>>], v: Var, buf: Option<Vec<f64>>) {
    if let Some(b) = buf {
        adj[v.0] = Some(b);
    }
}

fn axis_stride(d: [usize; 4], axis: Axis) -> (usize, usize) {
    match axis {
        Axis::X => (1, d[3]),
        Axis::Y => (d[3], d[2]),
        Axis::Z => (d[3] * d[2], d[1]),
    }
}

fn forward_difference(src: &[f64], d: [usize; 4], axis: Axis, out: &mut [f64]) {
    let (stride, extent) = axis_stride(d, axis);
    for (i, o) in out.iter_mut().enumerate() {
        let coord = (i / stride) % extent;
        if coord + 1 < extent {
            *o = src[i + stride] - src[i];
        }
    }
}

/// Negative-transpose stencil of [`forward_difference`], accumulated into `acc`.
fn forward_difference_adjoint(g: &[f64], d: [usize; 4], axis: Axis, acc: &mut [f64]) {
    let (stride, extent) = axis_stride(d, axis);
    for (i, &gi) in g.iter().enumerate() {
        let coord = (i / stride) % extent;
        if coord + 1 < extent {
            acc[i + stride] += gi;
            acc[i] -= gi;
        }
    }
}

#[cfg(test)]
mod tests;
