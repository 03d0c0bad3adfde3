use alloc::vec::Vec;

use rand::Rng;

use super::Point;
use crate::error::{Error, Result};
use crate::math;

/// `N` positions with optional per-point features and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Point>,
    /// Row-major `N × feature_dim`.
    pub features: Option<Vec<f64>>,
    pub feature_dim: usize,
    pub point_labels: Option<Vec<usize>>,
    pub cloud_label: Option<usize>,
}

impl PointCloud {
    pub fn new(positions: Vec<Point>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::config("a point cloud needs at least one point"));
        }
        Ok(PointCloud {
            positions,
            features: None,
            feature_dim: 0,
            point_labels: None,
            cloud_label: None,
        })
    }

    pub fn with_features(mut self, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() != dim * self.len() {
            return Err(Error::dims("features", &[self.len(), dim], &[data.len()]));
        }
        self.features = Some(data);
        self.feature_dim = dim;
        Ok(self)
    }

    pub fn with_point_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::dims("point_labels", &[self.len()], &[labels.len()]));
        }
        self.point_labels = Some(labels);
        Ok(self)
    }

    pub fn with_cloud_label(mut self, label: usize) -> Self {
        self.cloud_label = Some(label);
        self
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Positions flattened row-major (`N × 3`).
    pub fn flat_positions(&self) -> Vec<f64> {
        self.positions
            .iter()
            .flat_map(|p| p.iter().copied())
            .collect()
    }

    pub fn max_norm(&self) -> f64 {
        self.positions
            .iter()
            .map(|p| math::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]))
            .fold(0.0, f64::max)
    }

    /// Reorders every per-point attribute: point `i` of the result is point
    /// `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> PointCloud {
        let d = self.feature_dim;
        PointCloud {
            positions: perm.iter().map(|&i| self.positions[i]).collect(),
            features: self.features.as_ref().map(|f| {
                perm.iter()
                    .flat_map(|&i| f[i * d..(i + 1) * d].iter().copied())
                    .collect()
            }),
            feature_dim: d,
            point_labels: self
                .point_labels
                .as_ref()
                .map(|l| perm.iter().map(|&i| l[i]).collect()),
            cloud_label: self.cloud_label,
        }
    }
}

/// Centers on the centroid and scales so the farthest point has norm 1.
/// A cloud whose points all coincide is only centered.
pub fn normalize_unit_ball(pc: &PointCloud) -> PointCloud {
    let n = pc.len() as f64;
    let mut c = [0.0; 3];
    for p in &pc.positions {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    c.iter_mut().for_each(|v| *v /= n);
    let mut out = pc.clone();
    for p in &mut out.positions {
        for a in 0..3 {
            p[a] -= c[a];
        }
    }
    let r = out.max_norm();
    let scale = if r > 0.0 { 1.0 / r } else { 1.0 };
    for p in &mut out.positions {
        p.iter_mut().for_each(|v| *v *= scale);
    }
    out
}

/// Multiplies each axis by its own factor drawn from `U[lo, hi]`.
pub fn augment_anisotropic_scale<R: Rng + ?Sized>(
    pc: &PointCloud,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Result<PointCloud> {
    if lo > hi || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::config(alloc::format!(
            "scale range [{lo}, {hi}] is empty"
        )));
    }
    let s: [f64; 3] = core::array::from_fn(|_| if lo == hi { lo } else { rng.gen_range(lo..=hi) });
    let mut out = pc.clone();
    for p in &mut out.positions {
        for a in 0..3 {
            p[a] *= s[a];
        }
    }
    Ok(out)
}

/// Shifts the whole cloud by a vector drawn from `U[-range, range]^3`.
pub fn augment_translate<R: Rng + ?Sized>(
    pc: &PointCloud,
    range: f64,
    rng: &mut R,
) -> Result<PointCloud> {
    if range < 0.0 || !range.is_finite() {
        return Err(Error::config(alloc::format!(
            "translation range {range} is negative"
        )));
    }
    let t: [f64; 3] = core::array::from_fn(|_| {
        if range == 0.0 {
            0.0
        } else {
            rng.gen_range(-range..=range)
        }
    });
    let mut out = pc.clone();
    for p in &mut out.positions {
        for a in 0..3 {
            p[a] += t[a];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-3.0..5.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.0..9.0),
                ]
            })
            .collect();
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn normalize_two_points() {
        let pc = PointCloud::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let out = normalize_unit_ball(&pc);
        assert_eq!(out.positions, vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_is_idempotent_and_unit() {
        let once = normalize_unit_ball(&random_cloud(200, 3));
        assert!((once.max_norm() - 1.0).abs() < 1e-12);
        let twice = normalize_unit_ball(&once);
        for (a, b) in once.positions.iter().zip(&twice.positions) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_degenerate_cloud() {
        let pc = PointCloud::new(vec![[1.0, 2.0, 3.0]; 4]).unwrap();
        let out = normalize_unit_ball(&pc);
        assert!(out.positions.iter().all(|p| p == &[0.0, 0.0, 0.0]));
    }

    #[test]
    fn identity_augmentations() {
        let pc = random_cloud(50, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            augment_anisotropic_scale(&pc, 1.0, 1.0, &mut rng).unwrap(),
            pc
        );
        assert_eq!(augment_translate(&pc, 0.0, &mut rng).unwrap(), pc);
    }

    #[test]
    fn augmentation_is_seeded_and_preserves_labels() {
        let pc = random_cloud(64, 2)
            .with_point_labels((0..64).map(|i| i % 3).collect())
            .unwrap()
            .with_cloud_label(7);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = augment_anisotropic_scale(&pc, 0.8, 1.25, &mut rng).unwrap();
            augment_translate(&s, 0.1, &mut rng).unwrap()
        };
        let (a, b) = (run(9), run(9));
        assert_eq!(a, b);
        assert_eq!(a.len(), pc.len());
        assert_eq!(a.point_labels, pc.point_labels);
        assert_eq!(a.cloud_label, Some(7));
    }

    #[test]
    fn inverted_scale_range_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(augment_anisotropic_scale(&random_cloud(3, 0), 1.2, 0.8, &mut rng).is_err());
    }
}
