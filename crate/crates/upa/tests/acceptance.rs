//! Acceptance suite. Runs every criterion in sequence and prints one
//! PASS/FAIL line each; exits non-zero if any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p upa --test acceptance -- 3 7`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use upa::formats;
use upa_core::analysis::{jsd, mjsd, AttentionMap};
use upa_core::attention::{
    self_attention_global, self_attention_local, upa_attend, AttentionBlock, BlockConfig,
    SaParams, Variant,
};
use upa_core::backbone::{Arrangement, Model, ModelConfig, Task};
use upa_core::geometry::{
    farthest_point_sample, farthest_point_sample_brute, knn, knn_brute, knn_self, KdTree, Point,
    PointCloud,
};
use upa_core::gradcheck::{check_all, randomize};
use upa_core::tensor::{ParamStore, Tape, Tensor, Var};

type Check = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn points(r: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| std::array::from_fn(|_| r.gen_range(-1.0..1.0)))
        .collect()
}

fn tensor(r: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Random linear functional of `y`, so every output entry gets a distinct weight.
fn probe(t: &mut Tape, y: Var, seed: u64) -> upa_core::Result<Var> {
    let mut r = rng(seed);
    let shape = t.shape(y).to_vec();
    let n = t.value(y).len();
    let w = t.constant(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())?;
    let p = t.mul(y, w)?;
    Ok(t.sum_all(p))
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn upa_cli(args: &[&str]) -> Result<Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_upa"))
        .args(args)
        .env_remove("UPA_SEED")
        .output()
        .map_err(|e| format!("spawning upa: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "upa {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    Ok(serde_json::from_str(&text).unwrap_or(Value::String(text)))
}

// ---- 1 -------------------------------------------------------------------------

type OpCase = (&'static str, Vec<Vec<usize>>, fn(&mut Tape, &[Var]) -> upa_core::Result<Var>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], |t, v| t.matmul(v[0], v[1])),
        ("add_row", vec![vec![3, 4], vec![4]], |t, v| t.add_row(v[0], v[1])),
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| t.mul(v[0], v[1])),
        ("mul_rows", vec![vec![3, 1], vec![3, 4]], |t, v| t.mul_rows(v[0], v[1])),
        ("mul_scalar", vec![vec![3, 4]], |t, v| Ok(t.mul_scalar(v[0], -1.7))),
        ("add_scalar", vec![vec![3, 4]], |t, v| {
            let y = t.add_scalar(v[0], 0.3);
            t.mul(y, y)
        }),
        ("relu", vec![vec![3, 4]], |t, v| Ok(t.relu(v[0]))),
        ("sigmoid", vec![vec![3, 4]], |t, v| Ok(t.sigmoid(v[0]))),
        ("clamp", vec![vec![3, 4]], |t, v| Ok(t.clamp(v[0], -0.5, 0.5))),
        ("softmax_lastdim", vec![vec![3, 4]], |t, v| t.softmax_lastdim(v[0])),
        ("softmax_axis", vec![vec![2, 3, 4]], |t, v| t.softmax_axis(v[0], 1)),
        ("concat_lastdim", vec![vec![3, 2], vec![3, 4]], |t, v| {
            t.concat_lastdim(&[v[0], v[1]])
        }),
        ("reshape", vec![vec![3, 4]], |t, v| {
            let y = t.reshape(v[0], vec![2, 6])?;
            t.mul(y, y)
        }),
        ("transpose", vec![vec![3, 4]], |t, v| t.transpose(v[0])),
        ("slice_lastdim", vec![vec![3, 5]], |t, v| t.slice_lastdim(v[0], 1, 3)),
        ("mean_reduce", vec![vec![2, 3, 4]], |t, v| t.mean_reduce(v[0], 1)),
        ("max_reduce", vec![vec![2, 3, 4]], |t, v| t.max_reduce(v[0], 1)),
        ("sum_all", vec![vec![3, 4]], |t, v| {
            let s = t.sum_all(v[0]);
            t.mul(s, s)
        }),
        ("gather_rows", vec![vec![4, 3]], |t, v| t.gather_rows(v[0], &[2, 0, 2, 3, 2])),
        ("attend_heads", vec![vec![3, 4, 2], vec![3, 4, 6]], |t, v| {
            let w = t.softmax_axis(v[0], 1)?;
            t.attend_heads(w, v[1])
        }),
        ("cross_entropy", vec![vec![3, 4]], |t, v| t.cross_entropy(v[0], &[1, 3, 0])),
    ]
}

const BLOCKS: [Variant; 5] = [
    Variant::GlobalSa,
    Variant::LocalSa,
    Variant::UpaPlain,
    Variant::UpaPositional,
    Variant::UpaGated,
];

fn gradchecks() -> Check {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    let mut track = |name: &str, seed: u64, err: f64, n: usize| {
        checked += n;
        if err >= worst.0 {
            worst = (err, format!("{name} seed {seed}"));
        }
    };
    for seed in 0..10u64 {
        for (name, shapes, op) in op_cases() {
            let mut r = rng(seed);
            let mut store = ParamStore::new();
            let ids: Vec<_> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| store.add(format!("x{i}"), tensor(&mut r, s.clone())))
                .collect();
            let g = check_all(&mut store, |t, s| {
                let vars: Vec<Var> = ids.iter().map(|&id| t.param(s, id)).collect();
                let y = op(t, &vars)?;
                if t.value(y).len() == 1 {
                    Ok(y)
                } else {
                    probe(t, y, seed + 100)
                }
            })
            .map_err(|e| format!("{name}: {e}"))?;
            track(name, seed, g.max_rel_err, g.checked);
        }
        for v in BLOCKS {
            let mut r = rng(seed);
            let mut store = ParamStore::new();
            let block = AttentionBlock::new(&mut store, "blk", 8, &BlockConfig::new(v, 2, 4), &mut r)
                .map_err(|e| e.to_string())?;
            randomize(&mut store, &mut r);
            let x = store.add("x", tensor(&mut r, vec![9, 8]));
            let pos = points(&mut r, 9);
            let nbr = knn_self(&pos, 4).unwrap();
            let g = check_all(&mut store, |t, s| {
                let xv = t.param(s, x);
                let out = block.forward(t, s, xv, Some(&pos), Some(&nbr), false)?;
                probe(t, out.features, seed + 200)
            })
            .map_err(|e| format!("{}: {e}", v.name()))?;
            track(v.name(), seed, g.max_rel_err, g.checked);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let summary = format!(
        "{} ops + {} blocks x seeds 0-9, {checked} entries: max rel err {:.2e} ({}) < 1e-4; {secs:.1} s < 120 s",
        op_cases().len(),
        BLOCKS.len(),
        worst.0,
        worst.1
    );
    ensure(worst.0 < 1e-4 && secs < 120.0, summary.clone())?;
    Ok(summary)
}

// ---- 2 -------------------------------------------------------------------------

fn local_equals_global() -> Check {
    let start = Instant::now();
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = r.gen_range(1..=64);
        let heads = [1, 2, 4][r.gen_range(0..3)];
        let mut store = ParamStore::new();
        let p = SaParams::new(&mut store, "sa", 6, 8, heads, &mut r).unwrap();
        let x = tensor(&mut r, vec![n, 6]);
        let pos = points(&mut r, n);
        let nbr = knn_self(&pos, n).unwrap();
        let mut t = Tape::new();
        let xv = t.leaf(&x);
        let g = self_attention_global(&mut t, &store, xv, &p, false).unwrap();
        let l = self_attention_local(&mut t, &store, xv, &nbr, &p, false).unwrap();
        worst = worst.max(max_diff(t.value(g.features), t.value(l.features)));
    }
    let secs = start.elapsed().as_secs_f64();
    let summary = format!("50 clouds, N <= 64: max |local - global| {worst:.2e} <= 1e-9; {secs:.2} s < 10 s");
    ensure(worst <= 1e-9 && secs < 10.0, summary.clone())?;
    Ok(summary)
}

// ---- 3 -------------------------------------------------------------------------

const UPA: [Variant; 5] = [
    Variant::UpaPlain,
    Variant::UpaPositional,
    Variant::UpaGated,
    Variant::UpaUnary,
    Variant::UpaPairwise,
];

fn locality() -> Check {
    let mut r = rng(3);
    for v in UPA {
        for trial in 0..100 {
            let n = r.gen_range(6..=40);
            let k = r.gen_range(1..n.min(9));
            let heads = [1, 2][r.gen_range(0..2)];
            let mut store = ParamStore::new();
            let block = AttentionBlock::new(&mut store, "b", 8, &BlockConfig::new(v, heads, k), &mut r)
                .unwrap();
            randomize(&mut store, &mut r);
            let x = tensor(&mut r, vec![n, 8]);
            let pos = points(&mut r, n);
            let nbr = knn_self(&pos, k).unwrap();
            let eval = |x: &Tensor, pos: &[Point]| {
                let mut t = Tape::new();
                let xv = t.leaf(x);
                let out = block.forward(&mut t, &store, xv, Some(pos), Some(&nbr), false).unwrap();
                t.value(out.features).to_vec()
            };
            let base = eval(&x, &pos);
            let q = r.gen_range(0..n);
            let outside: Vec<usize> = (0..n).filter(|j| !nbr.row(q).contains(j)).collect();
            let j = *outside.choose(&mut r).unwrap();
            let mut x2 = x.clone();
            x2.data_mut()[j * 8..(j + 1) * 8]
                .iter_mut()
                .for_each(|e| *e += r.gen_range(-10.0..10.0));
            let mut pos2 = pos.clone();
            pos2[j] = std::array::from_fn(|_| r.gen_range(-5.0..5.0));
            let after = eval(&x2, &pos2);
            let same = base[q * 8..(q + 1) * 8]
                .iter()
                .zip(&after[q * 8..(q + 1) * 8])
                .all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(
                same,
                format!("{} trial {trial}: query {q} changed when point {j} moved", v.name()),
            )?;
        }
    }
    Ok(format!(
        "{} UPA variants x 100 trials: query outputs bit-identical after moving a non-neighbor",
        UPA.len()
    ))
}

// ---- 4 -------------------------------------------------------------------------

fn small_model(task: Task, n: usize, block: BlockConfig, stages: &[usize], seed: u64) -> (Model, ParamStore) {
    let base = if task == Task::Classification {
        ModelConfig::toy_classification(n, 3)
    } else {
        ModelConfig::toy_segmentation(n, 3)
    };
    let mut cfg = ModelConfig { task, ..base };
    for st in &mut cfg.stages {
        st.mlp = vec![8];
    }
    cfg.head = vec![8];
    if task.is_segmentation() {
        cfg.decoder = vec![8, 8];
    }
    let cfg = cfg.with_attention(&block, stages, Arrangement::Parallel).unwrap();
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let model = Model::new(&cfg, &mut store, &mut r).unwrap();
    randomize(&mut store, &mut r);
    (model, store)
}

fn outputs(model: &Model, store: &ParamStore, pc: &PointCloud) -> Vec<f64> {
    let mut t = Tape::new();
    let out = model.forward(&mut t, store, pc, false).unwrap();
    t.value(out.logits).to_vec()
}

fn permutations() -> Check {
    let mut r = rng(4);
    let n = 48;
    let (cls, cls_store) = small_model(
        Task::Classification,
        n,
        BlockConfig::new(Variant::UpaPositional, 2, 4),
        &[1, 2],
        40,
    );
    let (seg, seg_store) = small_model(
        Task::PartSegmentation,
        n,
        BlockConfig::new(Variant::UpaGated, 2, 4),
        &[1, 2],
        41,
    );
    let blocks: Vec<(Variant, ParamStore, AttentionBlock)> = BLOCKS
        .iter()
        .map(|&v| {
            let mut s = ParamStore::new();
            let b = AttentionBlock::new(&mut s, "b", 8, &BlockConfig::new(v, 2, 6), &mut r).unwrap();
            randomize(&mut s, &mut r);
            (v, s, b)
        })
        .collect();
    let pc = PointCloud::new(points(&mut r, n)).unwrap();
    let x = tensor(&mut r, vec![n, 8]);
    let run_block = |s: &ParamStore, b: &AttentionBlock, x: &Tensor, pos: &[Point]| {
        let nbr = knn_self(pos, 6).unwrap();
        let mut t = Tape::new();
        let xv = t.leaf(x);
        let out = b.forward(&mut t, s, xv, Some(pos), Some(&nbr), false).unwrap();
        t.value(out.features).to_vec()
    };
    let cls0 = outputs(&cls, &cls_store, &pc);
    let seg0 = outputs(&seg, &seg_store, &pc);
    let blk0: Vec<Vec<f64>> = blocks
        .iter()
        .map(|(_, s, b)| run_block(s, b, &x, &pc.positions))
        .collect();
    let (mut worst_eq, mut worst_inv) = (0.0f64, 0.0f64);
    let remap = |v: &[f64], perm: &[usize], w: usize| -> Vec<f64> {
        perm.iter().flat_map(|&i| v[i * w..(i + 1) * w].to_vec()).collect()
    };
    for _ in 0..100 {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let ppc = pc.permuted(&perm);
        worst_inv = worst_inv.max(max_diff(&cls0, &outputs(&cls, &cls_store, &ppc)));
        worst_eq = worst_eq.max(max_diff(&remap(&seg0, &perm, 3), &outputs(&seg, &seg_store, &ppc)));
        let px = Tensor::new(vec![n, 8], remap(x.data(), &perm, 8)).unwrap();
        for ((_, s, b), y0) in blocks.iter().zip(&blk0) {
            let y = run_block(s, b, &px, &ppc.positions);
            worst_eq = worst_eq.max(max_diff(&remap(y0, &perm, 8), &y));
        }
    }
    let summary = format!(
        "100 permutations: per-point max dev {worst_eq:.2e} (segmentation model + {} blocks), logits max dev {worst_inv:.2e}; tol 1e-6",
        BLOCKS.len()
    );
    ensure(worst_eq <= 1e-6 && worst_inv <= 1e-6, summary.clone())?;
    Ok(summary)
}

// ---- 5 -------------------------------------------------------------------------

fn one_hots(n: usize) -> AttentionMap {
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        p[i * n + i] = 1.0;
    }
    AttentionMap::dense(0, 1, n, n, p).unwrap()
}

fn analysis_oracle() -> Check {
    let e = |r: upa_core::Result<f64>| r.map_err(|e| e.to_string());
    let a = e(jsd(&[1.0, 0.0], &[0.0, 1.0]))?;
    ensure(a == 1.0, format!("jsd of disjoint one-hots = {a}, expected 1"))?;
    let b = e(mjsd(&one_hots(2)))?;
    ensure(b == 0.5, format!("mjsd of two disjoint one-hots = {b}, expected 0.5"))?;
    let same = AttentionMap::dense(0, 2, 5, 4, [0.1, 0.2, 0.3, 0.4].repeat(10)).unwrap();
    let c = e(mjsd(&same))?;
    ensure(c == 0.0, format!("mjsd of identical rows = {c}, expected 0"))?;
    let mut worst: f64 = 0.0;
    for n in 1..=32 {
        let m = e(mjsd(&one_hots(n)))?;
        worst = worst.max((m - (n - 1) as f64 / n as f64).abs());
    }
    ensure(worst <= 1e-12, format!("N one-hots off by {worst:e}"))?;
    Ok(format!(
        "jsd([1,0],[0,1]) = {a}; mjsd two one-hots = {b}; identical rows = {c}; N = 1..32 one-hots within {worst:.1e} <= 1e-12"
    ))
}

// ---- 6 -------------------------------------------------------------------------

fn head_decomposition() -> Check {
    let h = 4;
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let mut r = rng(600 + seed);
        // neighborhood aggregation
        let (m, k, d) = (7, 5, 12);
        let sc: Vec<f64> = (0..m * k * h).map(|_| r.gen_range(-3.0..3.0)).collect();
        let vals: Vec<f64> = (0..m * k * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let s = t.constant(vec![m, k, h], sc.clone()).unwrap();
        let v = t.constant(vec![m, k, d], vals.clone()).unwrap();
        let (full, _) = upa_attend(&mut t, s, v, h, None).unwrap();
        let dh = d / h;
        let mut parts = Vec::new();
        for head in 0..h {
            let s1: Vec<f64> = (0..m * k).map(|row| sc[row * h + head]).collect();
            let v1: Vec<f64> = (0..m * k)
                .flat_map(|row| vals[row * d + head * dh..row * d + (head + 1) * dh].to_vec())
                .collect();
            let s1 = t.constant(vec![m, k, 1], s1).unwrap();
            let v1 = t.constant(vec![m, k, dh], v1).unwrap();
            parts.push(upa_attend(&mut t, s1, v1, 1, None).unwrap().0);
        }
        let cat = t.concat_lastdim(&parts).unwrap();
        worst = worst.max(max_diff(t.value(full), t.value(cat)));

        // global self-attention with sliced projections
        let (n, din, dout) = (10, 6, 8);
        let mut store = ParamStore::new();
        let multi = SaParams::new(&mut store, "mh", din, dout, h, &mut r).unwrap();
        let x = tensor(&mut r, vec![n, din]);
        let mut singles = Vec::new();
        let dh = dout / h;
        for head in 0..h {
            let one = SaParams::new(&mut store, &format!("h{head}"), din, dh, 1, &mut r).unwrap();
            for (src, dst) in [(&multi.wq, &one.wq), (&multi.wk, &one.wk), (&multi.wv, &one.wv)] {
                let w = store.get(src.weight).data().to_vec();
                let slice: Vec<f64> = (0..din)
                    .flat_map(|row| w[row * dout + head * dh..row * dout + (head + 1) * dh].to_vec())
                    .collect();
                store.get_mut(dst.weight).data_mut().copy_from_slice(&slice);
            }
            singles.push(one);
        }
        let mut t = Tape::new();
        let xv = t.leaf(&x);
        let full = self_attention_global(&mut t, &store, xv, &multi, false).unwrap();
        let parts: Vec<Var> = singles
            .iter()
            .map(|p| self_attention_global(&mut t, &store, xv, p, false).unwrap().features)
            .collect();
        let cat = t.concat_lastdim(&parts).unwrap();
        worst = worst.max(max_diff(t.value(full.features), t.value(cat)));
    }
    let summary = format!(
        "h = 4, 10 seeds, UPA aggregation and global SA: max |multi-head - concat(single heads)| {worst:.2e} <= 1e-9"
    );
    ensure(worst <= 1e-9, summary.clone())?;
    Ok(summary)
}

// ---- 7 -------------------------------------------------------------------------

fn spatial_oracles() -> Check {
    let start = Instant::now();
    let mut r = rng(7);
    let (mut knn_rows, mut fps_picks) = (0usize, 0usize);
    for c in 0..1000 {
        let n = r.gen_range(1..=512);
        // every fourth cloud sits on a coarse lattice to force distance ties
        let pts: Vec<Point> = if c % 4 == 0 {
            (0..n)
                .map(|_| std::array::from_fn(|_| r.gen_range(0..4) as f64 * 0.5))
                .collect()
        } else {
            points(&mut r, n)
        };
        let k = r.gen_range(1..=n.min(32));
        let queries = if c % 2 == 0 {
            pts.clone()
        } else {
            let q = r.gen_range(1..64);
            points(&mut r, q)
        };
        let oracle = knn_brute(&pts, &queries, k).unwrap();
        ensure(
            KdTree::build(&pts).knn(&queries, k).unwrap() == oracle,
            format!("cloud {c}: kd-tree kNN differs from brute force (N {n}, k {k})"),
        )?;
        ensure(
            knn(&pts, &queries, k).unwrap() == oracle,
            format!("cloud {c}: kNN differs from brute force (N {n}, k {k})"),
        )?;
        knn_rows += queries.len();
        let m = r.gen_range(1..=n.min(64));
        let s = r.gen_range(0..n);
        ensure(
            farthest_point_sample(&pts, m, s).unwrap() == farthest_point_sample_brute(&pts, m, s).unwrap(),
            format!("cloud {c}: FPS differs from brute force (N {n}, m {m}, start {s})"),
        )?;
        fps_picks += m;
    }
    Ok(format!(
        "1000 clouds, N <= 512: {knn_rows} kNN rows and {fps_picks} FPS picks identical to brute force; {:.1} s",
        start.elapsed().as_secs_f64()
    ))
}

// ---- 8 -------------------------------------------------------------------------

fn scaling() -> Check {
    let start = Instant::now();
    let local = upa_cli(&["bench", "--variant", "local-upa", "--sizes", "1024,2048,4096,8192", "--k", "16"])?;
    let global = upa_cli(&["bench", "--variant", "global-sa", "--sizes", "512,1024,2048,4096"])?;
    let exp = |v: &Value, key: &str| v[key].as_f64().unwrap_or(f64::NAN);
    let (el, eg) = (exp(&local, "exponent"), exp(&global, "exponent"));
    let ml = exp(&local, "memory_exponent");
    // peak(2N) / (2 peak(N)) over consecutive sizes
    let peaks: Vec<f64> = local["rows"]
        .as_array()
        .map(|rows| rows.iter().map(|r| r["peak_bytes"].as_f64().unwrap_or(f64::NAN)).collect())
        .unwrap_or_default();
    let mem_ratio = peaks
        .windows(2)
        .map(|w| w[1] / (2.0 * w[0]))
        .fold(f64::NAN, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let summary = format!(
        "local-UPA time exponent {el:.3} <= 1.4 (memory exponent {ml:.3}, normalized peak ratio {mem_ratio:.3} <= 1.3); global-SA time exponent {eg:.3} >= 1.7; {secs:.1} s < 300 s"
    );
    ensure(
        el <= 1.4 && eg >= 1.7 && mem_ratio <= 1.3 && secs < 300.0,
        summary.clone(),
    )?;
    Ok(summary)
}

// ---- 9 / 10 --------------------------------------------------------------------

fn training(run_dir: &Path) -> Check {
    let cfg = workspace().join("configs/classification_upa.json");
    let start = Instant::now();
    let out = upa_cli(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ])?;
    let secs = start.elapsed().as_secs_f64();
    let epochs = out["epochs"].as_u64().unwrap_or(0);
    let oa = out["final"]["overall_accuracy"].as_f64().unwrap_or(f64::NAN);

    let committed = workspace().join("crates/upa/tests/data/baseline_classification.json");
    let baseline: Value = serde_json::from_slice(&std::fs::read(&committed).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let base_oa = baseline["final_overall_accuracy"].as_f64().unwrap_or(f64::NAN);
    let base_cfg: Value = serde_json::from_slice(
        &std::fs::read(workspace().join("configs/classification_baseline.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let upa_cfg: Value = serde_json::from_slice(&std::fs::read(&cfg).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let same_setup = ["model", "data", "optimizer", "epochs", "batch_size", "seed"]
        .iter()
        .all(|k| base_cfg[k] == upa_cfg[k]);
    ensure(same_setup, "baseline and UPA configs differ outside the attention setting")?;

    let summary = format!(
        "UPA OA {:.1}% >= 90% after {epochs} <= 30 epochs in {secs:.0} s <= 600 s; baseline OA {:.1}% (committed), margin {:+.1} pp >= -1 pp",
        oa * 100.0,
        base_oa * 100.0,
        (oa - base_oa) * 100.0
    );
    ensure(
        oa >= 0.90 && epochs <= 30 && secs <= 600.0 && oa >= base_oa - 0.01,
        summary.clone(),
    )?;
    Ok(summary)
}

fn degeneration(run_dir: &Path) -> Check {
    let maps = run_dir.join("maps");
    if !maps.is_dir() {
        return Err(format!("no dumped maps under {}", run_dir.display()));
    }
    upa_cli(&[
        "analyze",
        "--maps",
        maps.to_str().unwrap(),
        "--out",
        run_dir.join("report.json").to_str().unwrap(),
    ])?;
    let report: Value = serde_json::from_slice(
        &std::fs::read(run_dir.join("report.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let rows = report["rows"].as_array().cloned().unwrap_or_default();
    ensure(!rows.is_empty(), "analysis report has no rows")?;
    let finite = rows.iter().all(|r| r["mjsd"].as_f64().is_some_and(f64::is_finite));
    ensure(finite, "non-finite mJSD in the trained model's report")?;
    let trained: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "stage {} head {} {:.4}",
                r["stage"],
                r["head"],
                r["mjsd"].as_f64().unwrap()
            )
        })
        .collect();

    // a query-independent layer shaped like the first trained map
    let first = upa::analyze::map_files(&maps).map_err(|e| e.to_string())?[0].clone();
    let real = formats::read_map(&first).map_err(|e| e.to_string())?;
    let mut r = rng(10);
    let mut row: Vec<f64> = (0..real.keys()).map(|_| r.gen_range(0.0..1.0)).collect();
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= s);
    let flat = AttentionMap::dense(
        real.stage,
        real.heads(),
        real.queries(),
        real.keys(),
        row.repeat(real.heads() * real.queries()),
    )
    .map_err(|e| e.to_string())?;
    let probe_dir = run_dir.join("constant_maps");
    formats::save_map(&probe_dir.join("constant.uamp"), &flat).map_err(|e| e.to_string())?;
    let table = upa_cli(&[
        "analyze",
        "--maps",
        probe_dir.to_str().unwrap(),
        "--out",
        run_dir.join("constant.json").to_str().unwrap(),
    ])?;
    let table = table.as_str().unwrap_or_default().to_string();
    let lines: Vec<&str> = table.lines().filter(|l| l.starts_with("constant.uamp")).collect();
    ensure(
        lines.len() == real.heads() && lines.iter().all(|l| l.split_whitespace().nth(4) == Some("0.0000")),
        format!("query-independent map not reported as 0.0000:\n{table}"),
    )?;
    Ok(format!(
        "{} trained stage/head rows with finite mJSD [{}]; query-independent layer ({} x {}) reports mJSD 0.0000",
        rows.len(),
        trained.join(", "),
        real.queries(),
        real.keys()
    ))
}

// ---- 11 ------------------------------------------------------------------------

fn ablation(dir: &Path) -> Check {
    let start = Instant::now();
    let cfg = workspace().join("configs/ablation_tiny.json");
    let stages = {
        let v: Value = serde_json::from_slice(&std::fs::read(&cfg).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        v["model"]["stages"].as_array().map_or(0, Vec::len)
    };
    let expected = [
        ("k", 4),
        ("pooling", 3),
        ("stage", stages + 1),
        ("arrangement", 3),
        ("variant", 1 + Variant::ALL.len()),
    ];
    let mut counts = Vec::new();
    let mut seeds = Vec::new();
    for (axis, rows) in expected {
        let out = dir.join(format!("{axis}.json"));
        upa_cli(&[
            "ablate",
            "--axis",
            axis,
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])?;
        let t: Value = serde_json::from_slice(&std::fs::read(&out).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let got = t["rows"].as_array().cloned().unwrap_or_default();
        ensure(
            got.len() == rows,
            format!("axis {axis}: {} rows, expected {rows}", got.len()),
        )?;
        let complete = got.iter().all(|r| {
            r["setting"].is_string()
                && r["overall_accuracy"].as_f64().is_some_and(f64::is_finite)
                && r["final_loss"].as_f64().is_some_and(f64::is_finite)
                && r["parameters"].as_u64().is_some_and(|p| p > 0)
        });
        ensure(complete, format!("axis {axis}: incomplete row"))?;
        seeds.push(t["seed"].clone());
        counts.push(format!("{axis} {rows}"));
    }
    ensure(
        seeds.windows(2).all(|w| w[0] == w[1]),
        "axes ran under different seeds",
    )?;
    Ok(format!(
        "complete tables for 5 axes ({}) under seed {}; {:.0} s",
        counts.join(", "),
        seeds[0],
        start.elapsed().as_secs_f64()
    ))
}

// ---- driver --------------------------------------------------------------------

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let tmp = tempfile::tempdir().expect("temporary directory");
    let run_dir = tmp.path().join("train");
    let ablate_dir = tmp.path().join("ablate");
    std::fs::create_dir_all(&ablate_dir).unwrap();

    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Check + '_>)> = vec![
        (1, "gradcheck", Box::new(gradchecks)),
        (2, "local SA with k = N equals global SA", Box::new(local_equals_global)),
        (3, "locality", Box::new(locality)),
        (4, "permutation", Box::new(permutations)),
        (5, "analysis oracle", Box::new(analysis_oracle)),
        (6, "multi-head decomposition", Box::new(head_decomposition)),
        (7, "kNN and FPS oracles", Box::new(spatial_oracles)),
        (8, "scaling bench", Box::new(scaling)),
        (9, "training smoke", Box::new(|| training(&run_dir))),
        (10, "degeneration probe", Box::new(|| {
            if !run_dir.is_dir() {
                training(&run_dir).map_err(|e| format!("training for the probe failed: {e}"))?;
            }
            degeneration(&run_dir)
        })),
        (11, "ablation harness", Box::new(|| ablation(&ablate_dir))),
    ];

    let mut failed = 0;
    for (id, name, run) in &criteria {
        if !selected.is_empty() && !selected.contains(id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  criterion {id:>2} {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {id:>2} {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
