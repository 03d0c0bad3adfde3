//! Point clouds, exact neighbor search, sampling, and augmentation.

mod cloud;
mod fps;
mod knn;

pub use cloud::{augment_anisotropic_scale, augment_translate, normalize_unit_ball, PointCloud};
pub use fps::{farthest_point_sample, farthest_point_sample_brute};
pub use knn::{knn, knn_brute, knn_self, KdTree, NeighborIndex};

use crate::error::Result;
use crate::tensor::{Tape, Var};

pub type Point = [f64; 3];

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Gathers neighbor feature rows: `N×d` features become `M×k×d`.
pub fn group_features(tape: &mut Tape, features: Var, nbr: &NeighborIndex) -> Result<Var> {
    let d = tape.shape(features).last().copied().unwrap_or(1);
    let g = tape.gather_rows(features, nbr.indices())?;
    tape.reshape(g, alloc::vec![nbr.queries(), nbr.k(), d])
}
