//! Segmentation and landmark evaluation.
//!
//! Distances are in voxel units. Surface voxels are mask voxels with at least
//! one of their six face neighbours outside the mask; positions beyond the
//! grid count as outside.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::sampler::map_point;
use crate::volume::{Flow, GridShape, LabelMap, LandmarkSet, Point3};

fn same_shape(op: &'static str, a: GridShape, b: GridShape) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.extents().to_vec(),
            rhs: b.extents().to_vec(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    /// Dice similarity coefficient.
    pub dsc: f64,
    /// Sensitivity (recall).
    pub sen: f64,
    /// Positive predictive value (precision), `0` when nothing is predicted.
    pub ppv: f64,
}

pub fn overlap_metrics(pred: &LabelMap, truth: &LabelMap, label: u16) -> Result<Overlap> {
    same_shape("overlap_metrics", pred.shape(), truth.shape())?;
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        match (p == label, t == label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => {}
        }
    }
    if tp + fne == 0 {
        return Err(Error::LabelAbsent(label));
    }
    let (tp, fp, fne) = (tp as f64, fp as f64, fne as f64);
    Ok(Overlap {
        dsc: 2.0 * tp / (2.0 * tp + fp + fne),
        sen: tp / (tp + fne),
        ppv: if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) },
    })
}

/// Coordinates of the surface voxels of `mask`, in memory order.
pub fn surface_voxels(mask: &[bool], shape: GridShape) -> Vec<[usize; 3]> {
    let [dx, dy, dz] = shape.extents();
    let inside = |x: usize, y: usize, z: usize| mask[shape.offset(x, y, z)];
    let mut out = Vec::new();
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                if !inside(x, y, z) {
                    continue;
                }
                let border = x == 0 || y == 0 || z == 0 || x + 1 == dx || y + 1 == dy || z + 1 == dz;
                if border
                    || !inside(x - 1, y, z)
                    || !inside(x + 1, y, z)
                    || !inside(x, y - 1, z)
                    || !inside(x, y + 1, z)
                    || !inside(x, y, z - 1)
                    || !inside(x, y, z + 1)
                {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceDistances {
    /// Average symmetric surface distance.
    pub asd: f64,
    /// Hausdorff distance.
    pub hd: f64,
}

/// Squared distance from each point of `from` to its nearest point in `to`.
fn nearest_sq(from: &[[usize; 3]], to: &[[usize; 3]]) -> Vec<usize> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| (0..3).map(|a| p[a].abs_diff(q[a]).pow(2)).sum::<usize>())
                .min()
                .unwrap_or(usize::MAX)
        })
        .collect()
}

/// Exhaustive nearest-neighbour surface distances for one label.
pub fn surface_distances(pred: &LabelMap, truth: &LabelMap, label: u16) -> Result<SurfaceDistances> {
    same_shape("surface_distances", pred.shape(), truth.shape())?;
    let sp = surface_voxels(&pred.mask(label), pred.shape());
    let st = surface_voxels(&truth.mask(label), truth.shape());
    if sp.is_empty() || st.is_empty() {
        return Err(Error::EmptyMask(label));
    }
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        let d: Vec<f64> = nearest_sq(from, to).into_iter().map(|s| libm::sqrt(s as f64)).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let max = d.iter().cloned().fold(0.0, f64::max);
        (mean, max)
    };
    let (m1, h1) = directed(&sp, &st);
    let (m2, h2) = directed(&st, &sp);
    Ok(SurfaceDistances {
        asd: (m1 + m2) / 2.0,
        hd: h1.max(h2),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkErrors {
    pub per_landmark: Vec<f64>,
    pub mean: f64,
}

/// Euclidean distance between index-aligned landmarks.
pub fn landmark_error(predicted: &LandmarkSet, truth: &LandmarkSet) -> Result<LandmarkErrors> {
    if predicted.len() != truth.len() {
        return Err(Error::LandmarkCount(predicted.len(), truth.len()));
    }
    let per_landmark: Vec<f64> = predicted
        .points
        .iter()
        .zip(&truth.points)
        .map(|(p, t)| libm::sqrt((0..3).map(|a| (p[a] - t[a]) * (p[a] - t[a])).sum()))
        .collect();
    let mean = if per_landmark.is_empty() {
        0.0
    } else {
        per_landmark.iter().sum::<f64>() / per_landmark.len() as f64
    };
    Ok(LandmarkErrors { per_landmark, mean })
}

/// Per-voxel majority vote; ties go to the smallest label.
pub fn multi_atlas_segment(maps: &[LabelMap]) -> Result<LabelMap> {
    let first = maps.first().ok_or_else(|| Error::Dataset("no label maps to fuse".into()))?;
    for m in maps {
        same_shape("multi_atlas_segment", first.shape(), m.shape())?;
    }
    let n = first.shape().voxels();
    let mut out = vec![0u16; n];
    let mut votes: Vec<(u16, usize)> = Vec::with_capacity(maps.len());
    for (i, slot) in out.iter_mut().enumerate() {
        votes.clear();
        for m in maps {
            let l = m.labels()[i];
            match votes.iter_mut().find(|(v, _)| *v == l) {
                Some((_, c)) => *c += 1,
                None => votes.push((l, 1)),
            }
        }
        *slot = votes
            .iter()
            .fold((u16::MAX, 0usize), |best, &(l, c)| {
                if c > best.1 || (c == best.1 && l < best.0) {
                    (l, c)
                } else {
                    best
                }
            })
            .0;
    }
    LabelMap::new(first.shape(), out)
}

/// Maps each atlas's landmarks with `x + flow(x)` and averages across atlases.
///
/// Each flow must be the one that warps the test image toward its atlas, so
/// that it lives on the atlas grid.
pub fn propagate_landmarks(per_atlas: &[(Flow, LandmarkSet)]) -> Result<LandmarkSet> {
    let (_, first) = per_atlas.first().ok_or_else(|| Error::Dataset("no atlases".into()))?;
    let count = first.len();
    let mut sums = vec![[0.0; 3]; count];
    for (flow, set) in per_atlas {
        if set.len() != count {
            return Err(Error::LandmarkCount(set.len(), count));
        }
        for (s, &p) in sums.iter_mut().zip(&set.points) {
            let q = map_point(flow, p);
            for a in 0..3 {
                s[a] += q[a];
            }
        }
    }
    let k = per_atlas.len() as f64;
    Ok(LandmarkSet::new(sums.into_iter().map(|s| s.map(|v| v / k)).collect::<Vec<Point3>>()))
}

/// Overlap and surface metrics of one label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelScores {
    pub label: u16,
    pub overlap: Overlap,
    /// `None` when the prediction has no voxel of this label.
    pub surface: Option<SurfaceDistances>,
}

/// Scores every foreground label present in `truth`.
pub fn segmentation_scores(pred: &LabelMap, truth: &LabelMap) -> Result<Vec<LabelScores>> {
    truth
        .foreground_labels()
        .into_iter()
        .map(|label| {
            let overlap = overlap_metrics(pred, truth, label)?;
            let surface = match surface_distances(pred, truth, label) {
                Ok(s) => Some(s),
                Err(Error::EmptyMask(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(LabelScores { label, overlap, surface })
        })
        .collect()
}
