//! Unsupervised inverse-consistent deformable registration of 3D volumes.
//!
//! A small U-Net predicts a dense displacement field for each direction of an
//! image pair (`A -> B` and `B -> A`, shared weights). Training minimizes a
//! symmetric squared-difference similarity plus three regularizers:
//!
//! * smoothness of both flows (squared forward differences),
//! * inverse consistency (each flow against the grid-sampled inverse of the other),
//! * anti-folding (a penalty that switches on only where a forward difference
//!   of a displacement component along its own axis reaches `-1`).
//!
//! Everything here is pure computation and runs without `std`. File formats,
//! checkpoints and the command-line front end live in the `icnet` crate.
//!
//! Memory layout is channel-major with `x` fastest: voxel `(x, y, z)` of
//! channel `c` lives at `((c * dz + z) * dy + y) * dx + x`. Flow channel `i`
//! holds the displacement along axis `i` (0 = x, 1 = y, 2 = z) in voxels, and
//! warping is backward: `out(p) = src(p + flow(p))`.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod losses;
pub mod network;
pub mod sampler;
pub mod synth;
pub mod trainer;
pub mod volume;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use volume::{Flow, GridShape, LabelMap, LandmarkSet, Point3, Volume};
