//! Seeded procedural shape families standing in for benchmark datasets.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use upa_core::backbone::Task;
use upa_core::geometry::{normalize_unit_ball, Point, PointCloud};

use crate::error::{self, Error, Result};
use crate::formats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Sphere,
    Box,
    Cylinder,
    Torus,
    /// A box base with a sphere on top; points are labelled by part.
    TwoPartComposite,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Sphere,
        Family::Box,
        Family::Cylinder,
        Family::Torus,
        Family::TwoPartComposite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Sphere => "sphere",
            Family::Box => "box",
            Family::Cylinder => "cylinder",
            Family::Torus => "torus",
            Family::TwoPartComposite => "two-part-composite",
        }
    }

    pub fn parse(s: &str) -> Result<Family> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::config(format!("unknown shape family `{s}`")))
    }

    pub fn parts(self) -> usize {
        if self == Family::TwoPartComposite {
            2
        } else {
            1
        }
    }
}

/// One generated shape before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpec {
    pub family: Family,
    pub points: usize,
    /// Standard deviation of the per-coordinate Gaussian jitter.
    pub noise: f64,
}

/// Raw samples plus the generator trace: the index of the primitive that
/// produced each point.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub positions: Vec<Point>,
    pub parts: Vec<usize>,
}

fn sphere<R: Rng + ?Sized>(rng: &mut R, center: Point, r: f64) -> Point {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return std::array::from_fn(|i| center[i] + r * v[i] / n);
        }
    }
}

fn cuboid<R: Rng + ?Sized>(rng: &mut R, center: Point, half: [f64; 3]) -> Point {
    let [a, b, c] = half;
    let areas = [b * c, a * c, a * b];
    let total: f64 = areas.iter().sum();
    let mut t = rng.gen_range(0.0..total);
    let mut axis = 2;
    for (i, &ar) in areas.iter().enumerate() {
        if t < ar {
            axis = i;
            break;
        }
        t -= ar;
    }
    let mut p: Point = std::array::from_fn(|i| rng.gen_range(-half[i]..=half[i]));
    p[axis] = if rng.gen_bool(0.5) { half[axis] } else { -half[axis] };
    std::array::from_fn(|i| center[i] + p[i])
}

fn cylinder<R: Rng + ?Sized>(rng: &mut R, r: f64, h: f64) -> Point {
    let side = 2.0 * PI * r * 2.0 * h;
    let caps = 2.0 * PI * r * r;
    let th = rng.gen_range(0.0..2.0 * PI);
    if rng.gen_range(0.0..side + caps) < side {
        [r * th.cos(), r * th.sin(), rng.gen_range(-h..=h)]
    } else {
        let rr = r * rng.gen::<f64>().sqrt();
        let z = if rng.gen_bool(0.5) { h } else { -h };
        [rr * th.cos(), rr * th.sin(), z]
    }
}

fn torus<R: Rng + ?Sized>(rng: &mut R, big: f64, small: f64) -> Point {
    loop {
        let u = rng.gen_range(0.0..2.0 * PI);
        let v = rng.gen_range(0.0..2.0 * PI);
        // area element is proportional to big + small cos v
        if rng.gen_range(0.0..big + small) <= big + small * v.cos() {
            let w = big + small * v.cos();
            return [w * u.cos(), w * u.sin(), small * v.sin()];
        }
    }
}

fn yaw(p: Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

/// Samples one shape of `spec.family` with random proportions and a random
/// rotation about the vertical axis; spheres keep unit radius.
pub fn sample_shape<R: Rng + ?Sized>(spec: &ShapeSpec, rng: &mut R) -> Result<Generated> {
    if spec.points == 0 {
        return Err(Error::config("shapes need at least one point"));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::config(format!("invalid noise sigma {}", spec.noise)));
    }
    let n = spec.points;
    let mut parts = vec![0; n];
    let mut positions: Vec<Point> = match spec.family {
        Family::Sphere => (0..n).map(|_| sphere(rng, [0.0; 3], 1.0)).collect(),
        Family::Box => {
            let half: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.4..1.0));
            (0..n).map(|_| cuboid(rng, [0.0; 3], half)).collect()
        }
        Family::Cylinder => {
            let (r, h) = (rng.gen_range(0.4..0.8), rng.gen_range(0.5..1.0));
            (0..n).map(|_| cylinder(rng, r, h)).collect()
        }
        Family::Torus => {
            let (big, small) = (rng.gen_range(0.6..0.8), rng.gen_range(0.15..0.35));
            (0..n).map(|_| torus(rng, big, small)).collect()
        }
        Family::TwoPartComposite => {
            let half = [rng.gen_range(0.4..0.7), rng.gen_range(0.4..0.7), rng.gen_range(0.2..0.4)];
            let r = rng.gen_range(0.3..0.5);
            let top = [0.0, 0.0, half[2] + 0.8 * r];
            let box_area = 8.0 * (half[0] * half[1] + half[1] * half[2] + half[0] * half[2]);
            let sphere_area = 4.0 * PI * r * r;
            let mut n_top = ((n as f64) * sphere_area / (box_area + sphere_area)).round() as usize;
            if n >= 2 {
                n_top = n_top.clamp(1, n - 1);
            }
            (0..n)
                .map(|i| {
                    if i < n - n_top {
                        cuboid(rng, [0.0; 3], half)
                    } else {
                        parts[i] = 1;
                        sphere(rng, top, r)
                    }
                })
                .collect()
        }
    };
    if spec.family != Family::Sphere {
        let a = rng.gen_range(0.0..2.0 * PI);
        positions.iter_mut().for_each(|p| *p = yaw(*p, a));
    }
    if spec.noise > 0.0 {
        let jitter = Normal::new(0.0, spec.noise).map_err(|e| Error::config(e.to_string()))?;
        for p in &mut positions {
            p.iter_mut().for_each(|v| *v += jitter.sample(rng));
        }
    }
    Ok(Generated { positions, parts })
}

fn default_noise() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub task: Task,
    /// Classification labels are indices into this list.
    pub families: Vec<Family>,
    pub points: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub train: usize,
    pub test: usize,
}

impl DatasetSpec {
    /// Balanced sphere/box/cylinder/torus classification.
    pub fn four_class(points: usize, train: usize, test: usize) -> Self {
        DatasetSpec {
            task: Task::Classification,
            families: vec![Family::Sphere, Family::Box, Family::Cylinder, Family::Torus],
            points,
            noise: default_noise(),
            train,
            test,
        }
    }

    /// Two-part composites labelled per point.
    pub fn composite_parts(points: usize, train: usize, test: usize) -> Self {
        DatasetSpec {
            task: Task::PartSegmentation,
            families: vec![Family::TwoPartComposite],
            points,
            noise: default_noise(),
            train,
            test,
        }
    }

    pub fn num_classes(&self) -> usize {
        if self.task.is_segmentation() {
            self.families.iter().map(|f| f.parts()).max().unwrap_or(1)
        } else {
            self.families.len()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub task: Task,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
}

/// Every cloud draws from its own ChaCha stream, so clouds are independent of
/// generation order.
fn cloud_rng(seed: u64, split: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((split << 32) | index as u64);
    r
}

fn make_cloud(spec: &DatasetSpec, seed: u64, split: u64, index: usize) -> Result<PointCloud> {
    let label = index % spec.families.len();
    let shape = ShapeSpec {
        family: spec.families[label],
        points: spec.points,
        noise: spec.noise,
    };
    let g = sample_shape(&shape, &mut cloud_rng(seed, split, index))?;
    let pc = normalize_unit_ball(&PointCloud::new(g.positions)?);
    Ok(if spec.task.is_segmentation() {
        pc.with_point_labels(g.parts)?
    } else {
        pc.with_cloud_label(label)
    })
}

pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    if spec.families.is_empty() || spec.points == 0 || spec.train == 0 || spec.test == 0 {
        return Err(Error::config("datasets need families, points, and at least one train and test cloud"));
    }
    let split = |id: u64, n: usize| (0..n).map(|i| make_cloud(spec, seed, id, i)).collect::<Result<Vec<_>>>();
    Ok(Dataset {
        meta: DatasetMeta {
            task: spec.task,
            num_classes: spec.num_classes(),
        },
        train: split(0, spec.train)?,
        test: split(1, spec.test)?,
    })
}

/// Writes `meta.json` plus one `UPCD1` file per cloud under `train/` and `test/`.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    error::write(&dir.join("meta.json"), serde_json::to_vec_pretty(&ds.meta)?)?;
    for (name, clouds) in [("train", &ds.train), ("test", &ds.test)] {
        for (i, pc) in clouds.iter().enumerate() {
            formats::save_cloud(&dir.join(name).join(format!("{i:06}.upcd")), pc)?;
        }
    }
    Ok(())
}

/// All `.upcd` files of a directory in name order.
pub fn read_cloud_dir(dir: &Path) -> Result<Vec<PointCloud>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "upcd"))
        .collect();
    paths.sort();
    paths.iter().map(|p| formats::read_cloud(p)).collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_slice(&error::read(&dir.join("meta.json"))?)?;
    Ok(Dataset {
        meta,
        train: read_cloud_dir(&dir.join("train"))?,
        test: read_cloud_dir(&dir.join("test"))?,
    })
}
