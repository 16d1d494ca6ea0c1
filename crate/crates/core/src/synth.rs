//! Synthetic volumes with known ground truth.
//!
//! A subject is a blob template warped by a smooth, fold-free flow `G`. Labels
//! follow `G` by nearest-neighbour resampling and landmarks by inverting the
//! backward map `p -> p + G(p)` with a fixed-point iteration.

use alloc::vec::Vec;

use libm::exp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::folding_count;
use crate::sampler::{map_point, warp, warp_nearest};
use crate::volume::{zscore_normalize, Flow, GridShape, LabelMap, LandmarkSet, Point3, Volume};

pub const DEFAULT_BLOBS: usize = 6;

/// Largest allowed forward difference magnitude of a generated flow.
pub const MAX_FLOW_DIFFERENCE: f64 = 0.5;

const LABEL_THRESHOLD: f64 = 0.1;
const SMOOTHING_ATTEMPTS: usize = 8;
const INVERSION_TOLERANCE: f64 = 1e-3;
const INVERSION_ITERATIONS: usize = 500;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dist2(p: [usize; 3], c: Point3) -> f64 {
    (0..3).map(|a| (p[a] as f64 - c[a]) * (p[a] as f64 - c[a])).sum()
}

/// Sum of Gaussian blobs at integer centres, z-scored.
///
/// Label `k + 1` marks voxels where blob `k` contributes most, `0` marks
/// voxels whose raw intensity is below a tenth of the peak. Landmarks are the
/// blob centres in blob order.
pub fn make_blob_volume(seed: u64, shape: GridShape, num_blobs: usize) -> Result<(Volume, LabelMap, LandmarkSet)> {
    if num_blobs > u16::MAX as usize {
        return Err(Error::Config(alloc::format!("too many blobs: {num_blobs}")));
    }
    let mut rng = rng(seed);
    let ext = shape.extents();
    let min_ext = shape.min_extent() as f64;
    let blobs: Vec<(Point3, f64, f64)> = (0..num_blobs)
        .map(|_| {
            let mut c = [0.0; 3];
            for a in 0..3 {
                let margin = (ext[a] / 5).min((ext[a] - 1) / 2);
                c[a] = rng.gen_range(margin..=ext[a] - 1 - margin) as f64;
            }
            let sigma = (rng.gen_range(0.08..0.14) * min_ext).max(0.75);
            let amp = rng.gen_range(0.6..1.0);
            (c, sigma, amp)
        })
        .collect();

    let n = shape.voxels();
    let mut raw = Vec::with_capacity(n);
    let mut owner = Vec::with_capacity(n);
    for off in 0..n {
        let p = shape.coords(off);
        let mut total = 0.0;
        let mut best = (0u16, f64::NEG_INFINITY);
        for (k, (c, sigma, amp)) in blobs.iter().enumerate() {
            let v = amp * exp(-dist2(p, *c) / (2.0 * sigma * sigma));
            total += v;
            if v > best.1 {
                best = (k as u16 + 1, v);
            }
        }
        raw.push(total);
        owner.push(best.0);
    }
    let peak = raw.iter().cloned().fold(0.0, f64::max);
    let labels = raw
        .iter()
        .zip(owner)
        .map(|(&v, k)| if peak > 0.0 && v >= LABEL_THRESHOLD * peak { k } else { 0 })
        .collect();

    let volume = zscore_normalize(&Volume::new(shape, 1, raw)?)?;
    let labels = LabelMap::new(shape, labels)?;
    let landmarks = LandmarkSet::new(blobs.iter().map(|b| b.0).collect());
    Ok((volume, labels, landmarks))
}

fn max_forward_difference(flow: &Flow) -> f64 {
    let [dx, dy, dz] = flow.shape().extents();
    let strides = [1, dx, dx * dy];
    let mut worst = 0.0f64;
    for c in 0..3 {
        let comp = flow.channel(c);
        for z in 0..dz {
            for y in 0..dy {
                for x in 0..dx {
                    let i = (z * dy + y) * dx + x;
                    for (a, &inside) in [x + 1 < dx, y + 1 < dy, z + 1 < dz].iter().enumerate() {
                        if inside {
                            worst = worst.max((comp[i + strides[a]] - comp[i]).abs());
                        }
                    }
                }
            }
        }
    }
    worst
}

/// Smooth displacement field with `max|flow| = max_disp` and every forward
/// difference (any component, any axis) at most [`MAX_FLOW_DIFFERENCE`] in
/// magnitude, so it never folds.
///
/// The field is a sum of Gaussian bumps with random vector amplitudes. If the
/// difference bound fails at full amplitude the bumps are widened and redrawn.
pub fn make_smooth_flow(seed: u64, shape: GridShape, max_disp: f64) -> Result<Flow> {
    let min_ext = shape.min_extent() as f64;
    if !max_disp.is_finite() || max_disp < 0.0 || max_disp >= 0.4 * min_ext {
        return Err(Error::Config(alloc::format!(
            "max_disp must lie in [0, {}), got {max_disp}",
            0.4 * min_ext
        )));
    }
    if max_disp == 0.0 {
        return Ok(Flow::zeros(shape));
    }
    let mut rng = rng(seed);
    let ext = shape.extents();
    let mut widen = 1.0;
    for _ in 0..SMOOTHING_ATTEMPTS {
        let count = rng.gen_range(3..=6);
        let bumps: Vec<(Point3, f64, Point3)> = (0..count)
            .map(|_| {
                let c = [0, 1, 2].map(|a| rng.gen_range(0.0..(ext[a] - 1) as f64));
                let sigma = rng.gen_range(0.18..0.3) * min_ext * widen;
                let v = [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0));
                (c, sigma, v)
            })
            .collect();
        let mut flow = Flow::from_fn(shape, |p| {
            let mut d = [0.0; 3];
            for (c, sigma, v) in &bumps {
                let w = exp(-dist2(p, *c) / (2.0 * sigma * sigma));
                for a in 0..3 {
                    d[a] += w * v[a];
                }
            }
            d
        });
        let peak = flow.max_abs();
        if peak == 0.0 {
            continue;
        }
        let s = max_disp / peak;
        flow.data_mut().iter_mut().for_each(|v| *v *= s);
        if max_forward_difference(&flow) <= MAX_FLOW_DIFFERENCE && folding_count(&flow) == 0 {
            return Ok(flow);
        }
        widen *= 1.25;
    }
    Err(Error::Unsatisfiable(alloc::format!(
        "no fold-free flow with amplitude {max_disp} on a {:?} grid",
        ext
    )))
}

/// Solves `p + flow(p) = target` by iterating `p <- target - flow(p)`.
pub fn invert_point(flow: &Flow, target: Point3) -> Result<Point3> {
    let mut p = target;
    let mut residual = f64::INFINITY;
    for _ in 0..INVERSION_ITERATIONS {
        let q = map_point(flow, p);
        let r = [target[0] - q[0], target[1] - q[1], target[2] - q[2]];
        residual = libm::sqrt(r.iter().map(|v| v * v).sum());
        if residual < 1e-10 {
            return Ok(p);
        }
        p = [p[0] + r[0], p[1] + r[1], p[2] + r[2]];
    }
    if residual <= INVERSION_TOLERANCE {
        Ok(p)
    } else {
        Err(Error::NoConvergence {
            residual,
            iterations: INVERSION_ITERATIONS,
        })
    }
}

/// A volume with its labels, landmarks and the flow that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub volume: Volume,
    pub labels: LabelMap,
    pub landmarks: LandmarkSet,
    /// Backward map from this subject's grid into the template.
    pub flow: Flow,
}

/// Warps a labelled template by `flow` and transports its annotations.
pub fn deform_subject(volume: &Volume, labels: &LabelMap, landmarks: &LandmarkSet, flow: &Flow) -> Result<Subject> {
    let points = landmarks
        .points
        .iter()
        .map(|&l| invert_point(flow, l))
        .collect::<Result<Vec<_>>>()?;
    Ok(Subject {
        volume: warp(volume, flow)?,
        labels: warp_nearest(labels, flow)?,
        landmarks: LandmarkSet::new(points),
        flow: flow.clone(),
    })
}

/// Two images related by a known deformation: `b = warp(a, flow)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub a: Volume,
    pub b: Volume,
    pub flow: Flow,
    pub labels_a: LabelMap,
    pub labels_b: LabelMap,
    pub landmarks_a: LandmarkSet,
    pub landmarks_b: LandmarkSet,
}

pub fn make_pair(seed: u64, shape: GridShape, max_disp: f64) -> Result<SyntheticPair> {
    let mut rng = rng(seed);
    let (a, labels_a, landmarks_a) = make_blob_volume(rng.gen(), shape, DEFAULT_BLOBS)?;
    let flow = make_smooth_flow(rng.gen(), shape, max_disp)?;
    let b = deform_subject(&a, &labels_a, &landmarks_a, &flow)?;
    Ok(SyntheticPair {
        a,
        b: b.volume,
        flow,
        labels_a,
        labels_b: b.labels,
        landmarks_a,
        landmarks_b: b.landmarks,
    })
}

/// `count` deformed copies of one blob template.
pub fn make_population(seed: u64, shape: GridShape, count: usize, max_disp: f64, num_blobs: usize) -> Result<Vec<Subject>> {
    let mut rng = rng(seed);
    let (template, labels, landmarks) = make_blob_volume(rng.gen(), shape, num_blobs)?;
    (0..count)
        .map(|_| {
            let flow = make_smooth_flow(rng.gen(), shape, max_disp)?;
            deform_subject(&template, &labels, &landmarks, &flow)
        })
        .collect()
}
