//! U-Net flow predictor shared by both registration directions.
//!
//! Contracting level `d` (width `n * 2^d`): 3x3x3 conv stride 1, then 3x3x3
//! conv stride 2. Expanding level `d`, deepest first: 2x2x2 transposed conv
//! stride 2, concatenation with the stride-1 feature map of the same level,
//! 3x3x3 conv stride 1. Every layer is followed by a ReLU except the
//! three-channel head, which is squashed with `tau * tanh(.)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::volume::{Flow, GridShape, Volume};

/// Default bound on each displacement component, in voxels.
pub const DEFAULT_TAU: f64 = 7.0;
/// Default filter count of the first level.
pub const DEFAULT_WIDTH: usize = 8;
pub const DEFAULT_DEPTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FcnConfig {
    /// Filter count of the first level; level `d` uses `n * 2^d`.
    pub n: usize,
    /// Number of stride-2 down-sampling steps.
    pub depth: usize,
    /// Bound on every displacement component.
    pub tau: f64,
}

impl Default for FcnConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_WIDTH,
            depth: DEFAULT_DEPTH,
            tau: DEFAULT_TAU,
        }
    }
}

impl FcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if self.depth == 0 || self.depth > 16 {
            return Err(Error::Config(format!("depth {} outside 1..=16", self.depth)));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    /// Input extents must be divisible by `2^depth`.
    pub fn check_input(&self, shape: GridShape) -> Result<()> {
        let m = 1usize << self.depth;
        if shape.extents().iter().any(|e| e % m != 0) {
            return Err(Error::Config(format!(
                "extents {:?} not divisible by 2^{} = {m}",
                shape.extents(),
                self.depth
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.n << level
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// 3x3x3 convolution with the given stride, followed by ReLU.
    Conv { stride: usize },
    /// 2x2x2 stride-2 transposed convolution, followed by ReLU.
    Deconv,
    /// 3x3x3 stride-1 convolution to three channels, then `tau * tanh`.
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl Layer {
    fn fan_in(&self) -> usize {
        let s = self.kernel.shape();
        match self.kind {
            LayerKind::Deconv => s[0] * 8,
            _ => s[1] * 27,
        }
    }
}

/// Weights and biases of every layer, in forward order.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnParams {
    pub config: FcnConfig,
    pub layers: Vec<Layer>,
}

/// Name, kind, input channels and output channels of each layer.
pub fn architecture(config: &FcnConfig) -> Vec<(String, LayerKind, usize, usize)> {
    let mut specs = Vec::new();
    let mut ch = 2;
    for d in 0..config.depth {
        let w = config.width(d);
        specs.push((format!("enc{d}.conv"), LayerKind::Conv { stride: 1 }, ch, w));
        specs.push((format!("enc{d}.down"), LayerKind::Conv { stride: 2 }, w, w));
        ch = w;
    }
    for d in (0..config.depth).rev() {
        let w = config.width(d);
        specs.push((format!("dec{d}.up"), LayerKind::Deconv, ch, w));
        specs.push((format!("dec{d}.conv"), LayerKind::Conv { stride: 1 }, 2 * w, w));
        ch = w;
    }
    specs.push(("head".into(), LayerKind::Head, ch, 3));
    specs
}

fn kernel_shape(kind: LayerKind, cin: usize, cout: usize) -> Vec<usize> {
    match kind {
        LayerKind::Deconv => vec![cin, cout, 2, 2, 2],
        _ => vec![cout, cin, 3, 3, 3],
    }
}

impl FcnParams {
    /// Hidden kernels uniform in `+-sqrt(6 / fan_in)`, biases zero. The head
    /// kernel starts at zero so an untrained network predicts the identity.
    pub fn init(config: FcnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = architecture(&config)
            .into_iter()
            .map(|(name, kind, cin, cout)| {
                let mut layer = Layer {
                    name,
                    kind,
                    kernel: Tensor::zeros(kernel_shape(kind, cin, cout)),
                    bias: Tensor::zeros(vec![cout]),
                };
                if kind != LayerKind::Head {
                    let bound = libm::sqrt(6.0 / layer.fan_in() as f64);
                    for w in layer.kernel.data_mut() {
                        *w = rng.gen_range(-bound..=bound);
                    }
                }
                layer
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// Every parameter set to zero; the network then predicts zero flow.
    pub fn zeros(config: FcnConfig) -> Result<Self> {
        config.validate()?;
        let layers = architecture(&config)
            .into_iter()
            .map(|(name, kind, cin, cout)| Layer {
                name,
                kind,
                kernel: Tensor::zeros(kernel_shape(kind, cin, cout)),
                bias: Tensor::zeros(vec![cout]),
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// Kernel and bias tensors, alternating, in layer order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.kernel, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.kernel, &mut l.bias])
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Checks every layer against the architecture implied by `config`.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let arch = architecture(&self.config);
        if arch.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "expected {} layers, found {}",
                arch.len(),
                self.layers.len()
            )));
        }
        for ((name, kind, cin, cout), layer) in arch.into_iter().zip(&self.layers) {
            if layer.name != name || layer.kind != kind {
                return Err(Error::Config(format!("layer {} does not match {name}", layer.name)));
            }
            if layer.kernel.shape() != kernel_shape(kind, cin, cout).as_slice() || layer.bias.shape() != [cout] {
                return Err(Error::Config(format!("layer {name} has wrong tensor shapes")));
            }
            if layer.kernel.data().iter().chain(layer.bias.data()).any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("layer {name} has non-finite values")));
            }
        }
        Ok(())
    }

    /// Records the parameters on `tape` as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        self.bind_with(tape, true)
    }

    /// Records the parameters as constants (inference only).
    pub fn bind_constant(&self, tape: &mut Tape) -> BoundParams {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.leaf(l.kernel.clone()), tape.leaf(l.bias.clone()))
                } else {
                    (tape.constant(l.kernel.clone()), tape.constant(l.bias.clone()))
                }
            })
            .collect();
        BoundParams {
            config: self.config,
            kinds: self.layers.iter().map(|l| l.kind).collect(),
            vars,
        }
    }

    /// Predicts both flows for an image pair without recording gradients.
    pub fn predict(&self, a: &Volume, b: &Volume) -> Result<(Flow, Flow)> {
        let mut tape = Tape::new();
        let bound = self.bind_constant(&mut tape);
        let va = tape.constant(Tensor::from_volume(a));
        let vb = tape.constant(Tensor::from_volume(b));
        let (fab, fba) = fcn_bidirectional(&mut tape, &bound, va, vb)?;
        Ok((
            Flow::new(tape.value(fab).to_volume()?)?,
            Flow::new(tape.value(fba).to_volume()?)?,
        ))
    }
}

/// Parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    config: FcnConfig,
    kinds: Vec<LayerKind>,
    vars: Vec<(Var, Var)>,
}

impl BoundParams {
    /// Parameter adjoints in the order of [`FcnParams::tensors`].
    pub fn gradients(&self, grads: &Gradients, params: &FcnParams) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(&params.layers)
            .flat_map(|(&(k, b), l)| [grads.get_or_zeros(k, l.kernel.len()), grads.get_or_zeros(b, l.bias.len())])
            .collect()
    }

    pub fn config(&self) -> &FcnConfig {
        &self.config
    }
}

/// Flow that warps `a` toward `b`. Inputs are single-channel `[1, z, y, x]`
/// tensors of equal shape.
pub fn fcn_forward(tape: &mut Tape, params: &BoundParams, a: Var, b: Var) -> Result<Var> {
    let config = params.config;
    for v in [a, b] {
        let s = tape.value(v).shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::Channels {
                op: "fcn_forward",
                expected: 1,
                actual: s.first().copied().unwrap_or(0),
            });
        }
    }
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::ShapeMismatch {
            op: "fcn_forward",
            lhs: tape.value(a).shape().to_vec(),
            rhs: tape.value(b).shape().to_vec(),
        });
    }
    let (_, grid) = GridShape::from_tensor_shape(tape.value(a).shape())?;
    config.check_input(grid)?;

    let mut x = tape.concat_channels(a, b)?;
    let mut layers = params.vars.iter().zip(&params.kinds);
    let mut next = || layers.next().expect("layer count checked by architecture");

    let mut skips = Vec::with_capacity(config.depth);
    for _ in 0..config.depth {
        let (&(w, bias), _) = next();
        let c = tape.conv3d(x, w, bias, 1)?;
        let c = tape.relu(c);
        skips.push(c);
        let (&(w, bias), _) = next();
        let d = tape.conv3d(c, w, bias, 2)?;
        x = tape.relu(d);
    }
    for skip in skips.into_iter().rev() {
        let (&(w, bias), _) = next();
        let u = tape.deconv3d(x, w, bias)?;
        let u = tape.relu(u);
        let cat = tape.concat_channels(u, skip)?;
        let (&(w, bias), _) = next();
        let c = tape.conv3d(cat, w, bias, 1)?;
        x = tape.relu(c);
    }
    let (&(w, bias), kind) = next();
    debug_assert_eq!(*kind, LayerKind::Head);
    let h = tape.conv3d(x, w, bias, 1)?;
    let t = tape.tanh(h);
    Ok(tape.scale(t, config.tau))
}

/// `(F_AB, F_BA)` from one shared parameter set.
pub fn fcn_bidirectional(tape: &mut Tape, params: &BoundParams, a: Var, b: Var) -> Result<(Var, Var)> {
    let fab = fcn_forward(tape, params, a, b)?;
    let fba = fcn_forward(tape, params, b, a)?;
    Ok((fab, fba))
}
