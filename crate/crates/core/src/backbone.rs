//! Hierarchical point backbone: set abstraction, feature propagation and
//! task heads, with optional attention blocks after any stage.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBlock, BlockConfig, CapturedMap, Variant};
use crate::error::{Error, Result};
use crate::geometry::{
    dist2, farthest_point_sample, group_features, knn, knn_self, NeighborIndex, Point, PointCloud,
};
use crate::tensor::{Mlp, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Classification,
    PartSegmentation,
    SceneSegmentation,
}

impl Task {
    pub fn is_segmentation(self) -> bool {
        self != Task::Classification
    }
}

/// How unary and pairwise attention are combined inside a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arrangement {
    /// One block computing both branches side by side.
    #[default]
    Parallel,
    /// A unary-only block followed by a pairwise-only block.
    UnaryPairwise,
    PairwiseUnary,
}

impl Arrangement {
    pub const ALL: [Arrangement; 3] = [
        Arrangement::UnaryPairwise,
        Arrangement::PairwiseUnary,
        Arrangement::Parallel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arrangement::Parallel => "parallel",
            Arrangement::UnaryPairwise => "unary-pairwise",
            Arrangement::PairwiseUnary => "pairwise-unary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub points_out: usize,
    pub k_group: usize,
    /// Output widths of the shared MLP; its input is `3 + d_prev`.
    pub mlp: Vec<usize>,
    #[serde(default)]
    pub attention: Option<BlockConfig>,
    #[serde(default)]
    pub arrangement: Arrangement,
}

impl StageConfig {
    /// Attention block configurations in execution order.
    pub fn blocks(&self) -> Vec<BlockConfig> {
        let Some(cfg) = &self.attention else {
            return Vec::new();
        };
        let with = |v| BlockConfig {
            variant: v,
            ..cfg.clone()
        };
        match self.arrangement {
            Arrangement::Parallel => vec![cfg.clone()],
            Arrangement::UnaryPairwise => vec![with(Variant::UpaUnary), with(Variant::UpaPairwise)],
            Arrangement::PairwiseUnary => vec![with(Variant::UpaPairwise), with(Variant::UpaUnary)],
        }
    }
}

fn default_in_features() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    /// Width of per-point input features; clouds without features use xyz.
    #[serde(default = "default_in_features")]
    pub in_features: usize,
    pub stages: Vec<StageConfig>,
    /// Hidden widths of the prediction head.
    pub head: Vec<usize>,
    /// Output widths of the feature propagation MLPs, deepest level first.
    #[serde(default)]
    pub decoder: Vec<usize>,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Two-stage classifier: `n → n/2 → n/8` points, widths 64 and 128.
    pub fn toy_classification(points: usize, classes: usize) -> Self {
        ModelConfig {
            task: Task::Classification,
            in_features: 3,
            stages: toy_stages(points),
            head: vec![128],
            decoder: Vec::new(),
            num_classes: classes,
        }
    }

    /// The classifier's encoder with a two-level decoder and per-point head.
    pub fn toy_segmentation(points: usize, classes: usize) -> Self {
        ModelConfig {
            task: Task::PartSegmentation,
            decoder: vec![128, 64],
            head: vec![64],
            ..Self::toy_classification(points, classes)
        }
    }

    /// Places `block` after each listed stage (1-based).
    pub fn with_attention(
        mut self,
        block: &BlockConfig,
        stages: &[usize],
        arrangement: Arrangement,
    ) -> Result<Self> {
        for &s in stages {
            if s == 0 || s > self.stages.len() {
                return Err(Error::config(format!(
                    "attention placement {s} outside stages 1..={}",
                    self.stages.len()
                )));
            }
            let st = &mut self.stages[s - 1];
            st.attention = Some(block.clone());
            st.arrangement = arrangement;
        }
        Ok(self)
    }

    /// Static checks; point counts are checked again per cloud.
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("a model needs at least one stage"));
        }
        if self.num_classes == 0 || self.in_features == 0 {
            return Err(Error::config(
                "num_classes and in_features must be positive",
            ));
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.points_out == 0 || st.k_group == 0 || st.mlp.is_empty() || st.mlp.contains(&0) {
                return Err(Error::config(format!(
                    "stage {}: empty points, neighborhood or MLP",
                    i + 1
                )));
            }
            if let Some(a) = &st.attention {
                if st.arrangement != Arrangement::Parallel && !a.variant.is_upa() {
                    return Err(Error::config("sequential arrangements only apply to UPA"));
                }
            }
            for b in st.blocks() {
                if b.variant.is_local() && b.k > st.points_out {
                    return Err(Error::config(format!(
                        "stage {}: attention k = {} exceeds {} points",
                        i + 1,
                        b.k,
                        st.points_out
                    )));
                }
            }
        }
        if self.task.is_segmentation() && self.decoder.len() != self.stages.len() {
            return Err(Error::config(format!(
                "segmentation needs one decoder width per stage ({} != {})",
                self.decoder.len(),
                self.stages.len()
            )));
        }
        Ok(())
    }
}

fn toy_stages(points: usize) -> Vec<StageConfig> {
    let p1 = (points / 2).max(1);
    let p2 = (points / 8).max(1);
    vec![
        StageConfig {
            points_out: p1,
            k_group: 16.min(points),
            mlp: vec![64],
            attention: None,
            arrangement: Arrangement::Parallel,
        },
        StageConfig {
            points_out: p2,
            k_group: 16.min(p1),
            mlp: vec![128],
            attention: None,
            arrangement: Arrangement::Parallel,
        },
    ]
}

/// Start point for sampling that does not depend on point order: the
/// lexicographically largest position, lowest index on exact duplicates.
pub fn canonical_start(points: &[Point]) -> usize {
    let mut best = 0;
    for (i, p) in points.iter().enumerate().skip(1) {
        let q = &points[best];
        if (p[0], p[1], p[2]) > (q[0], q[1], q[2]) {
            best = i;
        }
    }
    best
}

/// Output of one set-abstraction layer.
#[derive(Debug, Clone)]
pub struct Abstraction {
    /// Indices of the sampled centroids in the input cloud.
    pub centroids: Vec<usize>,
    pub positions: Vec<Point>,
    /// `points_out × d_out`.
    pub features: Var,
}

/// Samples `points_out` centroids, groups `k` neighbors around each, runs
/// the shared MLP on `[p_j - c_i, f_j]` and max-pools over the group.
pub fn set_abstraction(
    tape: &mut Tape,
    store: &ParamStore,
    positions: &[Point],
    features: Var,
    points_out: usize,
    k: usize,
    mlp: &Mlp,
) -> Result<Abstraction> {
    let n = positions.len();
    if points_out > n {
        return Err(Error::config(format!(
            "cannot sample {points_out} points from {n}"
        )));
    }
    let centroids = farthest_point_sample(positions, points_out, canonical_start(positions))?;
    let cpos: Vec<Point> = centroids.iter().map(|&i| positions[i]).collect();
    let nbr = knn(positions, &cpos, k)?;
    let mut rel = Vec::with_capacity(points_out * k * 3);
    for (i, c) in cpos.iter().enumerate() {
        for &j in nbr.row(i) {
            let p = positions[j];
            rel.extend_from_slice(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
        }
    }
    let rel = tape.constant(vec![points_out, k, 3], rel)?;
    let pooled = grouped_mlp(tape, store, features, rel, &nbr, mlp)?;
    Ok(Abstraction {
        centroids,
        positions: cpos,
        features: pooled,
    })
}

/// `max_j mlp([rel, f_j])` over every group. The first layer is split into
/// its offset and feature rows so the feature part runs once per input point
/// before grouping. The final activation commutes with the max and is
/// applied after pooling.
fn grouped_mlp(
    tape: &mut Tape,
    store: &ParamStore,
    features: Var,
    rel: Var,
    nbr: &NeighborIndex,
    mlp: &Mlp,
) -> Result<Var> {
    let d = tape.shape(features).last().copied().unwrap_or(1);
    let first = &mlp.layers[0];
    if first.d_in != 3 + d {
        return Err(Error::dims("set abstraction MLP", &[first.d_in], &[3 + d]));
    }
    let w = tape.param(store, first.weight);
    let w_rel = tape.gather_rows(w, &[0, 1, 2])?;
    let feat_rows: Vec<usize> = (3..3 + d).collect();
    let w_feat = tape.gather_rows(w, &feat_rows)?;
    let mut proj = tape.matmul(features, w_feat)?;
    if let Some(b) = first.bias {
        let b = tape.param(store, b);
        proj = tape.add_row(proj, b)?;
    }
    let grouped = group_features(tape, proj, nbr)?;
    let offsets = tape.matmul(rel, w_rel)?;
    let mut h = tape.add(grouped, offsets)?;
    let n = mlp.layers.len();
    for (i, layer) in mlp.layers.iter().enumerate() {
        if i > 0 {
            h = layer.forward(tape, store, h)?;
        }
        if i + 1 < n {
            h = tape.relu(h);
        }
    }
    h = tape.max_reduce(h, 1)?;
    if mlp.activate_last {
        h = tape.relu(h);
    }
    Ok(h)
}

/// Inverse squared distance weights over the (up to) three nearest coarse
/// points. A fine point sitting on a coarse point copies it exactly.
pub fn interpolation_weights(
    coarse: &[Point],
    fine: &[Point],
) -> Result<(NeighborIndex, Vec<f64>)> {
    if coarse.is_empty() {
        return Err(Error::config("feature propagation from an empty cloud"));
    }
    let k = coarse.len().min(3);
    let nbr = knn(coarse, fine, k)?;
    let mut w = Vec::with_capacity(fine.len() * k);
    for (i, f) in fine.iter().enumerate() {
        let d: Vec<f64> = nbr.row(i).iter().map(|&j| dist2(f, &coarse[j])).collect();
        if d[0] == 0.0 {
            w.push(1.0);
            w.extend(core::iter::repeat(0.0).take(k - 1));
        } else {
            let inv: Vec<f64> = d.iter().map(|x| 1.0 / x).collect();
            let s: f64 = inv.iter().sum();
            w.extend(inv.iter().map(|x| x / s));
        }
    }
    Ok((nbr, w))
}

/// Interpolates coarse features onto the fine points, concatenates the
/// skip features and applies the shared MLP.
pub fn feature_propagation(
    tape: &mut Tape,
    store: &ParamStore,
    coarse: &[Point],
    coarse_features: Var,
    fine: &[Point],
    skip: Option<Var>,
    mlp: &Mlp,
) -> Result<Var> {
    let (nbr, w) = interpolation_weights(coarse, fine)?;
    let k = nbr.k();
    let w = tape.constant(vec![fine.len(), k, 1], w)?;
    let grouped = group_features(tape, coarse_features, &nbr)?;
    let interp = tape.attend_heads(w, grouped)?;
    let x = match skip {
        Some(s) => tape.concat_lastdim(&[interp, s])?,
        None => interp,
    };
    mlp.forward(tape, store, x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub mlp: Mlp,
    pub blocks: Vec<AttentionBlock>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub stages: Vec<Stage>,
    pub decoder: Vec<Mlp>,
    pub head: Mlp,
}

/// Forward result; `maps` carry their stage number (1-based).
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `1 × classes` for classification, `N × classes` for segmentation.
    pub logits: Var,
    pub maps: Vec<CapturedMap>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(
        config: &ModelConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut widths = vec![config.in_features];
        let mut stages = Vec::new();
        for (i, st) in config.stages.iter().enumerate() {
            let d_prev = *widths.last().unwrap();
            let mut w = vec![3 + d_prev];
            w.extend_from_slice(&st.mlp);
            let mlp = Mlp::new(store, &format!("stage{}.mlp", i + 1), &w, true, rng)?;
            let d = mlp.d_out();
            let blocks = st
                .blocks()
                .iter()
                .enumerate()
                .map(|(b, cfg)| {
                    AttentionBlock::new(store, &format!("stage{}.attn{b}", i + 1), d, cfg, rng)
                })
                .collect::<Result<Vec<_>>>()?;
            widths.push(d);
            stages.push(Stage { mlp, blocks });
        }
        let mut decoder = Vec::new();
        let head_in = if config.task.is_segmentation() {
            let mut cur = *widths.last().unwrap();
            for (lvl, &out) in config.decoder.iter().enumerate() {
                let skip = widths[widths.len() - 2 - lvl];
                decoder.push(Mlp::new(
                    store,
                    &format!("decoder{lvl}"),
                    &[cur + skip, out],
                    true,
                    rng,
                )?);
                cur = out;
            }
            cur
        } else {
            2 * widths.last().unwrap()
        };
        let mut hw = vec![head_in];
        hw.extend_from_slice(&config.head);
        hw.push(config.num_classes);
        let head = Mlp::new(store, "head", &hw, false, rng)?;
        Ok(Model {
            config: config.clone(),
            stages,
            decoder,
            head,
        })
    }

    /// Per-point input features of `pc` as an `N × in_features` leaf.
    pub fn input_features(&self, tape: &mut Tape, pc: &PointCloud) -> Result<Var> {
        let (d, data) = match &pc.features {
            Some(f) => (pc.feature_dim, f.clone()),
            None => (3, pc.flat_positions()),
        };
        if d != self.config.in_features {
            return Err(Error::dims(
                "model input",
                &[pc.len(), d],
                &[pc.len(), self.config.in_features],
            ));
        }
        tape.constant(vec![pc.len(), d], data)
    }

    /// Runs the encoder, returning positions and features at every level
    /// (level 0 is the input).
    fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pc: &PointCloud,
        capture: bool,
        maps: &mut Vec<CapturedMap>,
    ) -> Result<Vec<(Vec<Point>, Var)>> {
        let mut levels = vec![(pc.positions.clone(), self.input_features(tape, pc)?)];
        for (i, (st, cfg)) in self.stages.iter().zip(&self.config.stages).enumerate() {
            let (pos, feat) = levels.last().unwrap();
            let sa = set_abstraction(
                tape,
                store,
                pos,
                *feat,
                cfg.points_out,
                cfg.k_group,
                &st.mlp,
            )?;
            let mut x = sa.features;
            let mut nbr_cache: Option<(usize, NeighborIndex)> = None;
            for block in &st.blocks {
                let nbr = if block.variant.is_local() {
                    if nbr_cache.as_ref().map(|c| c.0) != Some(block.k) {
                        nbr_cache = Some((block.k, knn_self(&sa.positions, block.k)?));
                    }
                    nbr_cache.as_ref().map(|c| &c.1)
                } else {
                    None
                };
                let out = block.forward(tape, store, x, Some(&sa.positions), nbr, capture)?;
                x = out.features;
                maps.extend(out.maps.into_iter().map(|mut m| {
                    m.map.stage = (i + 1) as u32;
                    m
                }));
            }
            levels.push((sa.positions, x));
        }
        Ok(levels)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pc: &PointCloud,
        capture: bool,
    ) -> Result<ModelOutput> {
        if self.config.task.is_segmentation() {
            self.forward_segmentation(tape, store, pc, capture)
        } else {
            self.forward_classification(tape, store, pc, capture)
        }
    }

    /// Max and mean pooling of the last stage, then the MLP head.
    pub fn forward_classification(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pc: &PointCloud,
        capture: bool,
    ) -> Result<ModelOutput> {
        if self.config.task != Task::Classification {
            return Err(Error::config(
                "classification forward on a segmentation model",
            ));
        }
        let mut maps = Vec::new();
        let levels = self.encode(tape, store, pc, capture, &mut maps)?;
        let top = levels.last().unwrap().1;
        let mx = tape.max_reduce(top, 0)?;
        let mean = tape.mean_reduce(top, 0)?;
        let g = tape.concat_lastdim(&[mx, mean])?;
        let d = tape.shape(g)[0];
        let g = tape.reshape(g, vec![1, d])?;
        Ok(ModelOutput {
            logits: self.head.forward(tape, store, g)?,
            maps,
        })
    }

    /// Decoder back to the input resolution, then a per-point head.
    pub fn forward_segmentation(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pc: &PointCloud,
        capture: bool,
    ) -> Result<ModelOutput> {
        if !self.config.task.is_segmentation() {
            return Err(Error::config(
                "segmentation forward on a classification model",
            ));
        }
        let mut maps = Vec::new();
        let levels = self.encode(tape, store, pc, capture, &mut maps)?;
        let s = levels.len() - 1;
        let mut cur = levels[s].1;
        for (lvl, mlp) in self.decoder.iter().enumerate() {
            let (coarse, _) = &levels[s - lvl];
            let (fine, skip) = &levels[s - lvl - 1];
            cur = feature_propagation(tape, store, coarse, cur, fine, Some(*skip), mlp)?;
        }
        Ok(ModelOutput {
            logits: self.head.forward(tape, store, cur)?,
            maps,
        })
    }

    /// Predicted class per row of the logits.
    pub fn predict(tape: &Tape, logits: Var) -> Vec<usize> {
        let c = *tape.shape(logits).last().unwrap();
        tape.value(logits)
            .chunks_exact(c)
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn describe(&self) -> alloc::string::String {
        let mut s = format!("{:?}", self.config.task);
        for (i, st) in self.config.stages.iter().enumerate() {
            s += &format!(" | stage{} {}pts k{}", i + 1, st.points_out, st.k_group);
            for b in st.blocks() {
                s += " +";
                s += &b.variant.name().to_string();
            }
        }
        s
    }
}
