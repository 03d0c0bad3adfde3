//! Forward-pass timing of a single attention block against input size.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use upa_core::attention::{AttentionBlock, BlockConfig, Variant};
use upa_core::geometry::{knn, Point};
use upa_core::tensor::{ParamStore, Tape};

use crate::alloc_count;
use crate::error::{Error, Result};

/// Accepts every variant name plus the shorthands `local-upa` (plain UPA)
/// and `global` / `local`.
pub fn parse_variant(s: &str) -> Result<Variant> {
    match s {
        "local-upa" | "upa" => Ok(Variant::UpaPlain),
        "global" => Ok(Variant::GlobalSa),
        "local" => Ok(Variant::LocalSa),
        _ => Ok(Variant::parse(s)?),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub variant: Variant,
    pub sizes: Vec<usize>,
    pub k: usize,
    /// Block input width.
    pub width: usize,
    pub heads: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(variant: Variant, sizes: Vec<usize>) -> Self {
        BenchConfig {
            variant,
            sizes,
            k: 16,
            width: 64,
            heads: 1,
            repeats: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub median_seconds: f64,
    pub seconds: Vec<f64>,
    /// Peak heap bytes above the pre-pass baseline, when counting is on.
    pub peak_bytes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of log time against log N.
    pub exponent: f64,
    pub memory_exponent: Option<f64>,
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// One timed forward: neighbor search (local variants) plus the block.
fn forward_once(block: &AttentionBlock, store: &ParamStore, pos: &[Point], x: &[f64], width: usize) -> Result<f64> {
    let mut t = Tape::new();
    let xv = t.constant(vec![pos.len(), width], x.to_vec())?;
    let nbr = if block.variant.is_local() {
        Some(knn(pos, pos, block.k)?)
    } else {
        None
    };
    let out = block.forward(&mut t, store, xv, Some(pos), nbr.as_ref(), false)?;
    Ok(t.value(out.features)[0])
}

pub fn bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.sizes.len() < 2 || cfg.sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("bench needs at least two strictly ascending sizes"));
    }
    if cfg.repeats == 0 {
        return Err(Error::config("repeats must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let bc = BlockConfig::new(cfg.variant, cfg.heads, cfg.k);
    let block = AttentionBlock::new(&mut store, "bench", cfg.width, &bc, &mut rng)?;
    let mut rows = Vec::new();
    for &n in &cfg.sizes {
        if cfg.variant.is_local() && cfg.k > n {
            return Err(Error::config(format!("k = {} exceeds N = {n}", cfg.k)));
        }
        let pos: Vec<Point> = (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
        let x: Vec<f64> = (0..n * cfg.width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (warm, peak_bytes) = alloc_count::measure(|| forward_once(&block, &store, &pos, &x, cfg.width));
        std::hint::black_box(warm?);
        let mut seconds = Vec::with_capacity(cfg.repeats);
        for _ in 0..cfg.repeats {
            let t0 = Instant::now();
            std::hint::black_box(forward_once(&block, &store, &pos, &x, cfg.width)?);
            seconds.push(t0.elapsed().as_secs_f64());
        }
        rows.push(BenchRow {
            n,
            median_seconds: median(&seconds),
            seconds,
            peak_bytes,
        });
    }
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let ts: Vec<f64> = rows.iter().map(|r| r.median_seconds).collect();
    let mem: Option<Vec<f64>> = rows.iter().map(|r| r.peak_bytes.map(|b| b.max(1) as f64)).collect();
    Ok(BenchReport {
        config: cfg.clone(),
        exponent: fit_exponent(&ns, &ts),
        memory_exponent: mem.map(|m| fit_exponent(&ns, &m)),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponent_of_power_laws() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((fit_exponent(&xs, &ys) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(bench(&BenchConfig::new(Variant::UpaPlain, vec![64, 32])).is_err());
        assert!(bench(&BenchConfig::new(Variant::UpaPlain, vec![8, 32])).is_err());
        assert!(parse_variant("nope").is_err());
        assert_eq!(parse_variant("local-upa").unwrap(), Variant::UpaPlain);
    }

    #[test]
    fn small_run_reports_every_size() {
        let mut cfg = BenchConfig::new(Variant::UpaPlain, vec![32, 64, 128]);
        cfg.repeats = 1;
        cfg.width = 8;
        cfg.k = 4;
        let r = bench(&cfg).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert!(r.exponent.is_finite());
    }
}
