//! Training configuration, the training loop and evaluation.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use upa_core::attention::{BlockConfig, CapturedMap, Variant};
use upa_core::backbone::{Arrangement, Model, ModelConfig, Task};
use upa_core::geometry::{augment_anisotropic_scale, augment_translate, PointCloud};
use upa_core::metrics::{classification_metrics, segmentation_metrics, Metrics};
use upa_core::tensor::{Adam, ParamStore, Sgd, Tape};

use crate::dataset::{generate_dataset, load_dataset, Dataset, DatasetSpec};
use crate::error::{self, Error, Result};
use crate::formats;

fn one() -> usize {
    1
}

fn sixteen() -> usize {
    16
}

/// Attention variant and where to put it; applied on top of the model config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSetup {
    pub variant: Variant,
    #[serde(default = "one")]
    pub heads: usize,
    #[serde(default = "sixteen")]
    pub k: usize,
    /// 1-based stages; empty means the last stage.
    #[serde(default)]
    pub stages: Vec<usize>,
    #[serde(default)]
    pub arrangement: Arrangement,
    #[serde(default)]
    pub score_clamp: Option<f64>,
}

impl AttentionSetup {
    pub fn new(variant: Variant) -> Self {
        AttentionSetup {
            variant,
            heads: 1,
            k: 16,
            stages: Vec::new(),
            arrangement: Arrangement::Parallel,
            score_clamp: None,
        }
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            score_clamp: self.score_clamp,
            ..BlockConfig::new(self.variant, self.heads, self.k)
        }
    }

    pub fn apply(&self, model: ModelConfig) -> Result<ModelConfig> {
        let stages = if self.stages.is_empty() {
            vec![model.stages.len()]
        } else {
            self.stages.clone()
        };
        Ok(model.with_attention(&self.block(), &stages, self.arrangement)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to 0 over the run.
    Cosine,
    /// Multiply by `gamma` every `every` epochs.
    Step { every: usize, gamma: f64 },
}

fn default_lr() -> f64 {
    1e-3
}

fn default_momentum() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub schedule: Schedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: default_lr(),
            momentum: default_momentum(),
            schedule: Schedule::Constant,
        }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => self.lr * 0.5 * (1.0 + (PI * epoch as f64 / epochs.max(1) as f64).cos()),
            Schedule::Step { every, gamma } => self.lr * gamma.powi((epoch / every.max(1)) as i32),
        }
    }
}

fn yes() -> bool {
    true
}

fn default_scale() -> [f64; 2] {
    [0.8, 1.25]
}

fn default_translate() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_scale")]
    pub scale: [f64; 2],
    #[serde(default = "default_translate")]
    pub translate: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            scale: default_scale(),
            translate: default_translate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic(DatasetSpec),
    /// A directory written by `save_dataset`.
    Dir(PathBuf),
}

fn default_batch() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub attention: Option<AttentionSetup>,
    pub data: DataSource,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Write UAMP1 dumps of the first test cloud after training.
    #[serde(default)]
    pub dump_maps: bool,
}

impl TrainConfig {
    /// Reads a JSON config; `UPA_SEED` overrides the seed.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: TrainConfig = serde_json::from_slice(&error::read(path)?)?;
        if let Ok(s) = std::env::var("UPA_SEED") {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("UPA_SEED must be an unsigned integer, got `{s}`")))?;
        }
        Ok(cfg)
    }

    /// Model config with the attention setup applied.
    pub fn resolved_model(&self) -> Result<ModelConfig> {
        match &self.attention {
            Some(a) => a.apply(self.model.clone()),
            None => Ok(self.model.clone()),
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Synthetic(spec) => generate_dataset(spec, self.seed),
            DataSource::Dir(dir) => load_dataset(dir),
        }
    }
}

/// One JSON line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test: Metrics,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: Model,
    pub store: ParamStore,
    pub history: Vec<EpochLog>,
    pub seconds: f64,
    pub map_files: Vec<PathBuf>,
}

impl TrainResult {
    pub fn final_metrics(&self) -> Option<&Metrics> {
        self.history.last().map(|e| &e.test)
    }

    /// Training loss per epoch.
    pub fn loss_curve(&self) -> Vec<f64> {
        self.history.iter().map(|e| e.train_loss).collect()
    }
}

fn labels(pc: &PointCloud, task: Task) -> Result<Vec<usize>> {
    let missing = || Error::config("cloud is missing the labels this task needs");
    if task.is_segmentation() {
        pc.point_labels.clone().ok_or_else(missing)
    } else {
        pc.cloud_label.map(|c| vec![c]).ok_or_else(missing)
    }
}

fn check_classes(ds_classes: usize, model: &ModelConfig) -> Result<()> {
    if ds_classes != model.num_classes {
        return Err(Error::config(format!(
            "dataset has {ds_classes} classes, model predicts {}",
            model.num_classes
        )));
    }
    Ok(())
}

fn param_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

enum Optimizer {
    Adam(Adam),
    Sgd(Sgd),
}

impl Optimizer {
    fn new(cfg: &OptimizerConfig) -> Result<Self> {
        Ok(match cfg.kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::with_lr(cfg.lr)?),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(cfg.lr, cfg.momentum)?),
        })
    }

    fn set_lr(&mut self, lr: f64) -> Result<()> {
        match self {
            Optimizer::Adam(o) => o.set_lr(lr)?,
            Optimizer::Sgd(o) => o.set_lr(lr)?,
        }
        Ok(())
    }

    fn step(&mut self, store: &mut ParamStore) {
        match self {
            Optimizer::Adam(o) => o.step(store),
            Optimizer::Sgd(o) => o.step(store),
        }
    }
}

/// Builds the model for `cfg` with its seeded initialization.
pub fn build_model(model: &ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut store = ParamStore::new();
    let m = Model::new(model, &mut store, &mut rng)?;
    Ok((m, store))
}

/// Generates or loads the dataset, then trains.
pub fn train(cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainResult> {
    train_on(cfg, &cfg.dataset()?, out)
}

/// Trains on an already materialized dataset. With `out`, writes
/// `log.jsonl`, `model.json`, `model.upak` and optional `maps/*.uamp`.
pub fn train_on(cfg: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainResult> {
    let started = Instant::now();
    let model_cfg = cfg.resolved_model()?;
    if model_cfg.task.is_segmentation() != data.meta.task.is_segmentation() {
        return Err(Error::config("dataset task does not match the model task"));
    }
    check_classes(data.meta.num_classes, &model_cfg)?;
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let (model, mut store) = build_model(&model_cfg, cfg.seed)?;
    let mut opt = Optimizer::new(&cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);

    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            error::write(&dir.join("model.json"), serde_json::to_vec_pretty(&model_cfg)?)?;
            let p = dir.join("log.jsonl");
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.optimizer.lr_at(epoch, cfg.epochs);
        opt.set_lr(lr)?;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            store.zero_grad();
            let diverged = |store: &ParamStore| Error::Diverged {
                epoch,
                step,
                lr,
                grad_norm: store.grad_norm(),
                param_norm: param_norm(store),
            };
            for &i in batch {
                let pc = if cfg.augment.enabled {
                    let [lo, hi] = cfg.augment.scale;
                    let pc = augment_anisotropic_scale(&data.train[i], lo, hi, &mut rng)?;
                    augment_translate(&pc, cfg.augment.translate, &mut rng)?
                } else {
                    data.train[i].clone()
                };
                let y = labels(&pc, model_cfg.task)?;
                let mut tape = Tape::new();
                let out = match model.forward(&mut tape, &store, &pc, false) {
                    Err(upa_core::Error::Numeric(_)) => return Err(diverged(&store)),
                    r => r?,
                };
                let loss = match tape.cross_entropy(out.logits, &y) {
                    Err(upa_core::Error::Numeric(_)) => return Err(diverged(&store)),
                    r => r?,
                };
                let lv = tape.value(loss)[0];
                if !lv.is_finite() {
                    return Err(diverged(&store));
                }
                loss_sum += lv;
                let pred = Model::predict(&tape, out.logits);
                correct += pred.iter().zip(&y).filter(|(a, b)| a == b).count();
                seen += y.len();
                let scaled = tape.mul_scalar(loss, 1.0 / batch.len() as f64);
                tape.backward(scaled, &mut store)?;
            }
            if !store.grad_norm().is_finite() {
                return Err(diverged(&store));
            }
            opt.step(&mut store);
        }
        let test = evaluate(&model, &store, &data.test)?;
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / data.train.len().max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            test,
        };
        if let Some((f, p)) = &mut log {
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(p, e))?;
        }
        history.push(entry);
    }

    let mut map_files = Vec::new();
    if let Some(dir) = out {
        formats::save_checkpoint(&dir.join("model.upak"), &store)?;
        if cfg.dump_maps {
            if let Some(pc) = data.test.first() {
                map_files = dump_maps(&model, &store, pc, &dir.join("maps"))?;
            }
        }
    }
    Ok(TrainResult {
        model,
        store,
        history,
        seconds: started.elapsed().as_secs_f64(),
        map_files,
    })
}

/// Attention maps of one forward pass.
pub fn capture_maps(model: &Model, store: &ParamStore, pc: &PointCloud) -> Result<Vec<CapturedMap>> {
    let mut tape = Tape::new();
    Ok(model.forward(&mut tape, store, pc, true)?.maps)
}

/// Writes every captured map as `stage{s}_{n}_{branch}.uamp`.
pub fn dump_maps(model: &Model, store: &ParamStore, pc: &PointCloud, dir: &Path) -> Result<Vec<PathBuf>> {
    capture_maps(model, store, pc)?
        .iter()
        .enumerate()
        .map(|(n, m)| {
            let p = dir.join(format!("stage{}_{n:02}_{}.uamp", m.map.stage, m.branch.name()));
            formats::save_map(&p, &m.map)?;
            Ok(p)
        })
        .collect()
}

/// Deterministic forward passes over `clouds`; no augmentation.
pub fn evaluate(model: &Model, store: &ParamStore, clouds: &[PointCloud]) -> Result<Metrics> {
    let task = model.config.task;
    let classes = model.config.num_classes;
    let mut cls = (Vec::new(), Vec::new());
    let mut seg = Vec::new();
    for pc in clouds {
        let y = labels(pc, task)?;
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::config(format!("label {bad} outside the model's {classes} classes")));
        }
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, store, pc, false)?;
        let pred = Model::predict(&tape, out.logits);
        if task.is_segmentation() {
            seg.push((y, pred));
        } else {
            cls.0.extend(y);
            cls.1.extend(pred);
        }
    }
    Ok(if task.is_segmentation() {
        segmentation_metrics(&seg, classes)?
    } else {
        classification_metrics(&cls.0, &cls.1, classes)?
    })
}

/// Reads a model config from either a bare `ModelConfig` or a `TrainConfig`.
pub fn read_model_config(path: &Path) -> Result<ModelConfig> {
    let bytes = error::read(path)?;
    if let Ok(m) = serde_json::from_slice::<ModelConfig>(&bytes) {
        return Ok(m);
    }
    serde_json::from_slice::<TrainConfig>(&bytes)?.resolved_model()
}

/// Restores a checkpoint written by [`train_on`].
pub fn load_model(ckpt: &Path, config: &ModelConfig) -> Result<(Model, ParamStore)> {
    let (model, mut store) = build_model(config, 0)?;
    formats::read_checkpoint(ckpt, &mut store)?;
    Ok((model, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(epochs: usize, lr: f64) -> TrainConfig {
        let mut model = ModelConfig::toy_classification(64, 4);
        for st in &mut model.stages {
            st.mlp = vec![8];
        }
        model.head = vec![8];
        TrainConfig {
            model,
            attention: Some(AttentionSetup {
                k: 4,
                ..AttentionSetup::new(Variant::UpaPlain)
            }),
            data: DataSource::Synthetic(DatasetSpec::four_class(64, 16, 8)),
            optimizer: OptimizerConfig {
                lr,
                ..Default::default()
            },
            epochs,
            batch_size: 4,
            seed: 3,
            augment: AugmentConfig::default(),
            dump_maps: true,
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let cfg = tiny(1, 0.0);
        let (_, before) = build_model(&cfg.resolved_model().unwrap(), cfg.seed).unwrap();
        let r = train(&cfg, None).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(r.store.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn equal_seeds_give_identical_logs() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = tiny(2, 1e-3);
        train(&cfg, Some(d1.path())).unwrap();
        train(&cfg, Some(d2.path())).unwrap();
        let a = std::fs::read(d1.path().join("log.jsonl")).unwrap();
        assert_eq!(a, std::fs::read(d2.path().join("log.jsonl")).unwrap());
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 2);
        assert_eq!(
            std::fs::read(d1.path().join("model.upak")).unwrap(),
            std::fs::read(d2.path().join("model.upak")).unwrap()
        );
    }

    #[test]
    fn checkpoint_restores_the_trained_model() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(1, 1e-3);
        let r = train(&cfg, Some(dir.path())).unwrap();
        assert!(!r.map_files.is_empty());
        let mc = read_model_config(&dir.path().join("model.json")).unwrap();
        let (m, s) = load_model(&dir.path().join("model.upak"), &mc).unwrap();
        let test = cfg.dataset().unwrap().test;
        assert_eq!(evaluate(&m, &s, &test).unwrap(), *r.final_metrics().unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = tiny(1, 1e300);
        cfg.optimizer.kind = OptimizerKind::Sgd;
        cfg.epochs = 3;
        match train(&cfg, None) {
            Err(e @ Error::Diverged { .. }) => {
                let j = e.to_json();
                assert_eq!(j["error"]["kind"], "diverged");
                assert!(j["error"]["diagnostics"]["lr"].is_number());
            }
            other => panic!("expected divergence, got {:?}", other.map(|r| r.history)),
        }
    }

    #[test]
    fn class_count_mismatch() {
        let mut cfg = tiny(1, 1e-3);
        cfg.model.num_classes = 3;
        assert!(matches!(train(&cfg, None), Err(Error::Config(_))));
        let r = train(&tiny(1, 1e-3), None).unwrap();
        let mut pcs = tiny(1, 1e-3).dataset().unwrap().test;
        pcs[0].cloud_label = Some(9);
        assert!(matches!(evaluate(&r.model, &r.store, &pcs), Err(Error::Config(_))));
    }

    #[test]
    fn schedules() {
        let mut o = OptimizerConfig::default();
        assert_eq!(o.lr_at(5, 10), 1e-3);
        o.schedule = Schedule::Cosine;
        assert!((o.lr_at(5, 10) - 5e-4).abs() < 1e-15);
        o.schedule = Schedule::Step { every: 2, gamma: 0.5 };
        assert_eq!(o.lr_at(5, 10), 1e-3 * 0.25);
    }
}
