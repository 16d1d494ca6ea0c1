//! Training objective: symmetric similarity plus smoothness,
//! inverse-consistency and anti-folding regularizers.
//!
//! All terms are sums over voxels by default. [`Reduction::Mean`] divides
//! each term by the voxel count instead, which makes the weights
//! resolution-independent.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::volume::{Axis, Flow, Volume};

/// Weights of the regularizers in `sim + alpha*smo + beta*inv + gamma*ant`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    /// `alpha = 1`, `beta = 0.1`, `gamma = 1e5`.
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            gamma: 1e5,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = Self { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(alloc::format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Ablation without the inverse-consistency term.
    pub fn without_inverse_consistency(self) -> Self {
        Self { beta: 0.0, ..self }
    }

    /// Ablation without the anti-folding term.
    pub fn without_anti_folding(self) -> Self {
        Self { gamma: 0.0, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Scalar values of every term of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub sim: f64,
    pub smo: f64,
    pub inv: f64,
    pub ant: f64,
    pub total: f64,
    /// Folded `(voxel, axis)` pairs summed over both flows.
    pub folding_count: usize,
}

impl LossReport {
    /// Mean of the loss terms; `folding_count` is the total over all reports
    /// so that a single fold stays visible.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        if reports.is_empty() {
            return LossReport::default();
        }
        let n = reports.len() as f64;
        let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        LossReport {
            sim: sum(|r| r.sim),
            smo: sum(|r| r.smo),
            inv: sum(|r| r.inv),
            ant: sum(|r| r.ant),
            total: sum(|r| r.total),
            folding_count: reports.iter().map(|r| r.folding_count).sum(),
        }
    }
}

/// Tape handles of every term.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub sim: Var,
    pub smo: Var,
    pub inv: Var,
    pub ant: Var,
    pub total: Var,
}

fn voxels(tape: &Tape, v: Var) -> usize {
    tape.value(v).shape()[1..].iter().product()
}

fn reduce(tape: &mut Tape, sum: Var, n: usize, reduction: Reduction) -> Var {
    match reduction {
        Reduction::Sum => sum,
        Reduction::Mean => tape.scale(sum, 1.0 / n as f64),
    }
}

fn squared_norm(tape: &mut Tape, v: Var) -> Var {
    let q = tape.square(v);
    tape.sum(q)
}

fn check_flow(tape: &Tape, f: Var) -> Result<()> {
    let s = tape.value(f).shape();
    if s.len() != 4 || s[0] != 3 {
        return Err(Error::Channels {
            op: "flow",
            expected: 3,
            actual: s.first().copied().unwrap_or(0),
        });
    }
    Ok(())
}

fn check_pair(tape: &Tape, fab: Var, fba: Var) -> Result<()> {
    check_flow(tape, fab)?;
    check_flow(tape, fba)?;
    if tape.value(fab).shape() != tape.value(fba).shape() {
        return Err(Error::ShapeMismatch {
            op: "flow pair",
            lhs: tape.value(fab).shape().to_vec(),
            rhs: tape.value(fba).shape().to_vec(),
        });
    }
    Ok(())
}

/// `||B - warp(A, F_AB)||^2 + ||A - warp(B, F_BA)||^2`.
pub fn loss_sim(tape: &mut Tape, a: Var, b: Var, fab: Var, fba: Var) -> Result<Var> {
    check_pair(tape, fab, fba)?;
    let warped_a = tape.warp(a, fab)?;
    let warped_b = tape.warp(b, fba)?;
    let ra = tape.sub(b, warped_a)?;
    let rb = tape.sub(a, warped_b)?;
    let sa = squared_norm(tape, ra);
    let sb = squared_norm(tape, rb);
    tape.add(sa, sb)
}

/// Forward differences of a flow along x, y and z.
fn flow_differences(tape: &mut Tape, f: Var) -> Result<[Var; 3]> {
    Ok([
        tape.forward_difference(f, Axis::X)?,
        tape.forward_difference(f, Axis::Y)?,
        tape.forward_difference(f, Axis::Z)?,
    ])
}

fn smoothness(tape: &mut Tape, diffs: &[Var; 3]) -> Result<Var> {
    let parts: Vec<Var> = diffs.iter().map(|&d| squared_norm(tape, d)).collect();
    let s = tape.add(parts[0], parts[1])?;
    tape.add(s, parts[2])
}

/// `sum delta(g + 1) * g^2` over the diagonal differences `g` (component `i`
/// along axis `i`), where `delta(q) = |q|` for `q <= 0` and `0` otherwise,
/// i.e. `delta(q) = relu(-q)`.
fn anti_folding(tape: &mut Tape, diffs: &[Var; 3]) -> Result<Var> {
    let mut parts = Vec::with_capacity(3);
    for (i, &d) in diffs.iter().enumerate() {
        let g = tape.select_channel(d, i)?;
        let q = tape.offset(g, 1.0);
        let nq = tape.neg(q);
        let gate = tape.relu(nq);
        let g2 = tape.square(g);
        let m = tape.mul(gate, g2)?;
        parts.push(tape.sum(m));
    }
    let s = tape.add(parts[0], parts[1])?;
    tape.add(s, parts[2])
}

/// Squared forward differences of both flows, all components, all axes.
pub fn loss_smo(tape: &mut Tape, fab: Var, fba: Var) -> Result<Var> {
    check_pair(tape, fab, fba)?;
    let dab = flow_differences(tape, fab)?;
    let dba = flow_differences(tape, fba)?;
    let s1 = smoothness(tape, &dab)?;
    let s2 = smoothness(tape, &dba)?;
    tape.add(s1, s2)
}

/// Anti-folding penalty of both flows.
pub fn loss_ant(tape: &mut Tape, fab: Var, fba: Var) -> Result<Var> {
    check_pair(tape, fab, fba)?;
    let dab = flow_differences(tape, fab)?;
    let dba = flow_differences(tape, fba)?;
    let s1 = anti_folding(tape, &dab)?;
    let s2 = anti_folding(tape, &dba)?;
    tape.add(s1, s2)
}

/// Grid-sampled inverse `-flow(p + flow(p))`, differentiable in `flow`.
pub fn estimate_inverse(tape: &mut Tape, flow: Var) -> Result<Var> {
    check_flow(tape, flow)?;
    let neg = tape.neg(flow);
    tape.warp(neg, flow)
}

/// Per-voxel residuals `F_AB - inv(F_BA)` and `F_BA - inv(F_AB)`.
pub fn inverse_residuals(tape: &mut Tape, fab: Var, fba: Var) -> Result<(Var, Var)> {
    check_pair(tape, fab, fba)?;
    let inv_ba = estimate_inverse(tape, fba)?;
    let inv_ab = estimate_inverse(tape, fab)?;
    let r1 = tape.sub(fab, inv_ba)?;
    let r2 = tape.sub(fba, inv_ab)?;
    Ok((r1, r2))
}

/// `||F_AB - inv(F_BA)||^2 + ||F_BA - inv(F_AB)||^2`.
pub fn loss_inv(tape: &mut Tape, fab: Var, fba: Var) -> Result<Var> {
    let (r1, r2) = inverse_residuals(tape, fab, fba)?;
    let s1 = squared_norm(tape, r1);
    let s2 = squared_norm(tape, r2);
    tape.add(s1, s2)
}

/// Full objective on the tape plus a value report.
pub fn loss_total(
    tape: &mut Tape,
    a: Var,
    b: Var,
    fab: Var,
    fba: Var,
    weights: &LossWeights,
    reduction: Reduction,
) -> Result<(LossTerms, LossReport)> {
    weights.validate()?;
    check_pair(tape, fab, fba)?;
    let n = voxels(tape, fab);

    let sim = loss_sim(tape, a, b, fab, fba)?;
    let dab = flow_differences(tape, fab)?;
    let dba = flow_differences(tape, fba)?;
    let smo_ab = smoothness(tape, &dab)?;
    let smo_ba = smoothness(tape, &dba)?;
    let smo = tape.add(smo_ab, smo_ba)?;
    let ant_ab = anti_folding(tape, &dab)?;
    let ant_ba = anti_folding(tape, &dba)?;
    let ant = tape.add(ant_ab, ant_ba)?;
    let inv = loss_inv(tape, fab, fba)?;

    let sim = reduce(tape, sim, n, reduction);
    let smo = reduce(tape, smo, n, reduction);
    let inv = reduce(tape, inv, n, reduction);
    let ant = reduce(tape, ant, n, reduction);

    let ws = tape.scale(smo, weights.alpha);
    let wi = tape.scale(inv, weights.beta);
    let wa = tape.scale(ant, weights.gamma);
    let t = tape.add(sim, ws)?;
    let t = tape.add(t, wi)?;
    let total = tape.add(t, wa)?;

    let folds = folding_count_raw(tape.value(fab)) + folding_count_raw(tape.value(fba));
    let report = LossReport {
        sim: tape.item(sim),
        smo: tape.item(smo),
        inv: tape.item(inv),
        ant: tape.item(ant),
        total: tape.item(total),
        folding_count: folds,
    };
    Ok((
        LossTerms {
            sim,
            smo,
            inv,
            ant,
            total,
        },
        report,
    ))
}

/// Loss report for fixed images and flows (no gradients).
pub fn evaluate(
    a: &Volume,
    b: &Volume,
    fab: &Flow,
    fba: &Flow,
    weights: &LossWeights,
    reduction: Reduction,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let va = tape.constant(Tensor::from_volume(a));
    let vb = tape.constant(Tensor::from_volume(b));
    let fa = tape.constant(Tensor::from_volume(fab));
    let fb = tape.constant(Tensor::from_volume(fba));
    loss_total(&mut tape, va, vb, fa, fb, weights, reduction).map(|(_, r)| r)
}

fn diagonal_folds(data: &[f64], dims: [usize; 3]) -> [usize; 3] {
    let [dx, dy, dz] = dims;
    let n = dx * dy * dz;
    let strides = [1, dx, dx * dy];
    let mut counts = [0; 3];
    for (axis, count) in counts.iter_mut().enumerate() {
        let comp = &data[axis * n..(axis + 1) * n];
        for z in 0..dz {
            for y in 0..dy {
                for x in 0..dx {
                    let c = [x, y, z][axis];
                    if c + 1 >= dims[axis] {
                        continue;
                    }
                    let i = (z * dy + y) * dx + x;
                    let g = comp[i + strides[axis]] - comp[i];
                    if g + 1.0 <= 0.0 {
                        *count += 1;
                    }
                }
            }
        }
    }
    counts
}

fn folding_count_raw(t: &Tensor) -> usize {
    let s = t.shape();
    diagonal_folds(t.data(), [s[3], s[2], s[1]]).iter().sum()
}

/// Folded locations per axis: forward difference `g` of component `i`
/// along axis `i` with `g + 1 <= 0`.
pub fn folding_count_per_axis(flow: &Flow) -> [usize; 3] {
    diagonal_folds(flow.data(), flow.shape().extents())
}

/// Total number of folded `(voxel, axis)` pairs.
pub fn folding_count(flow: &Flow) -> usize {
    folding_count_per_axis(flow).iter().sum()
}
