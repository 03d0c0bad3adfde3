//! Attention-map degeneration statistics.
//!
//! Two attention rows are compared with the Jensen–Shannon divergence in
//! base 2 (range `[0, 1]`). Averaging it over every ordered pair of query
//! rows and every head gives the point-averaged divergence `mjsd`; a value of
//! zero means every query attends identically, i.e. the operator ignores the
//! query.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Row-sum tolerance for a valid probability row.
pub const ROW_TOL: f64 = 1e-6;

/// Number of equal-width histogram bins over `[0, 1]`.
pub const HIST_BINS: usize = 20;

/// Per-head row-stochastic matrices (queries × keys).
///
/// Local attention maps are stored sparsely: each query row lists the key
/// columns it attends to. Missing columns are zero probability.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub stage: u32,
    heads: usize,
    queries: usize,
    keys: usize,
    width: usize,
    columns: Option<Vec<usize>>,
    /// `heads × queries × width`, row-major.
    probs: Vec<f64>,
}

fn check_row(row: &[f64]) -> Result<()> {
    let mut sum = 0.0;
    for &p in row {
        if !(p >= 0.0) || !p.is_finite() {
            return Err(Error::contract(alloc::format!("invalid probability {p}")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(Error::contract(alloc::format!(
            "attention row sums to {sum}, not 1"
        )));
    }
    Ok(())
}

impl AttentionMap {
    /// Dense map; `probs` is `heads × queries × keys`.
    pub fn dense(
        stage: u32,
        heads: usize,
        queries: usize,
        keys: usize,
        probs: Vec<f64>,
    ) -> Result<Self> {
        if heads == 0 || queries == 0 || keys == 0 {
            return Err(Error::contract("empty attention map"));
        }
        if probs.len() != heads * queries * keys {
            return Err(Error::dims(
                "attention map",
                &[heads, queries, keys],
                &[probs.len()],
            ));
        }
        let map = AttentionMap {
            stage,
            heads,
            queries,
            keys,
            width: keys,
            columns: None,
            probs,
        };
        map.validate()?;
        Ok(map)
    }

    /// Sparse map over `keys` columns; `columns` is `queries × k` key indices
    /// (distinct per row) and `probs` is `heads × queries × k`.
    pub fn sparse(
        stage: u32,
        heads: usize,
        keys: usize,
        k: usize,
        columns: Vec<usize>,
        probs: Vec<f64>,
    ) -> Result<Self> {
        if heads == 0 || k == 0 || columns.is_empty() || columns.len() % k != 0 {
            return Err(Error::contract("empty attention map"));
        }
        let queries = columns.len() / k;
        if probs.len() != heads * queries * k {
            return Err(Error::dims(
                "attention map",
                &[heads, queries, k],
                &[probs.len()],
            ));
        }
        if let Some(&bad) = columns.iter().find(|&&c| c >= keys) {
            return Err(Error::Index {
                op: "attention map",
                index: bad,
                len: keys,
            });
        }
        let map = AttentionMap {
            stage,
            heads,
            queries,
            keys,
            width: k,
            columns: Some(columns),
            probs,
        };
        map.validate()?;
        Ok(map)
    }

    fn validate(&self) -> Result<()> {
        for h in 0..self.heads {
            for i in 0..self.queries {
                check_row(self.row(h, i))?;
            }
        }
        Ok(())
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn is_sparse(&self) -> bool {
        self.columns.is_some()
    }

    /// Stored probabilities of query `i` under head `h`.
    pub fn row(&self, h: usize, i: usize) -> &[f64] {
        let base = (h * self.queries + i) * self.width;
        &self.probs[base..base + self.width]
    }

    /// Key columns of row `i` for sparse maps.
    pub fn columns(&self, i: usize) -> Option<&[usize]> {
        self.columns
            .as_ref()
            .map(|c| &c[i * self.width..(i + 1) * self.width])
    }

    /// Embeds the map into the full `queries × keys` grid (zeros elsewhere).
    pub fn to_dense(&self) -> AttentionMap {
        let Some(cols) = &self.columns else {
            return self.clone();
        };
        let mut probs = vec![0.0; self.heads * self.queries * self.keys];
        for h in 0..self.heads {
            for i in 0..self.queries {
                let dst = (h * self.queries + i) * self.keys;
                for (&c, &p) in cols[i * self.width..(i + 1) * self.width]
                    .iter()
                    .zip(self.row(h, i))
                {
                    probs[dst + c] += p;
                }
            }
        }
        AttentionMap {
            stage: self.stage,
            heads: self.heads,
            queries: self.queries,
            keys: self.keys,
            width: self.keys,
            columns: None,
            probs,
        }
    }

    /// Dense probabilities, `heads × queries × keys`.
    pub fn dense_probs(&self) -> Vec<f64> {
        self.to_dense().probs
    }

    fn jsd_rows(&self, h: usize, i: usize, j: usize) -> f64 {
        match &self.columns {
            None => jsd_unchecked(self.row(h, i), self.row(h, j)),
            Some(_) => jsd_sparse(
                self.columns(i).unwrap(),
                self.row(h, i),
                self.columns(j).unwrap(),
                self.row(h, j),
            ),
        }
    }
}

#[inline]
fn kl_term(p: f64, m: f64) -> f64 {
    if p > 0.0 {
        p * math::log2(p / m)
    } else {
        0.0
    }
}

fn jsd_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let mut kp = 0.0;
    let mut kq = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        kp += kl_term(a, m);
        kq += kl_term(b, m);
    }
    (0.5 * (kp + kq)).clamp(0.0, 1.0)
}

fn jsd_sparse(cp: &[usize], p: &[f64], cq: &[usize], q: &[f64]) -> f64 {
    let lookup = |cols: &[usize], vals: &[f64], c: usize| -> f64 {
        cols.iter()
            .zip(vals)
            .filter(|(&x, _)| x == c)
            .map(|(_, &v)| v)
            .sum()
    };
    let mut kp = 0.0;
    for (&c, &a) in cp.iter().zip(p) {
        kp += kl_term(a, 0.5 * (a + lookup(cq, q, c)));
    }
    let mut kq = 0.0;
    for (&c, &b) in cq.iter().zip(q) {
        kq += kl_term(b, 0.5 * (lookup(cp, p, c) + b));
    }
    (0.5 * (kp + kq)).clamp(0.0, 1.0)
}

/// Jensen–Shannon divergence in bits between two probability rows.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::dims("jsd", &[p.len()], &[q.len()]));
    }
    check_row(p)?;
    check_row(q)?;
    Ok(jsd_unchecked(p, q))
}

/// Shannon entropy in bits.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * math::log2(v))
        .sum::<f64>()
}

/// Deterministic stride subsample of `n` row indices down to at most `cap`.
pub fn sample_rows(n: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c > 0 && c < n => (0..c).map(|t| t * n / c).collect(),
        _ => (0..n).collect(),
    }
}

/// Statistics of one head of one map.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStats {
    pub head: usize,
    pub mjsd: f64,
    pub mean_entropy: f64,
    /// Unordered-pair JSD counts over `HIST_BINS` equal bins of `[0, 1]`.
    pub histogram: Vec<u64>,
    pub queries_used: usize,
}

/// Per-head mJSD, mean entropy, and pair histogram, optionally over a
/// stride-subsampled set of queries.
pub fn head_stats(map: &AttentionMap, head: usize, max_queries: Option<usize>) -> HeadStats {
    let rows = sample_rows(map.queries, max_queries);
    let n = rows.len();
    let mut histogram = vec![0u64; HIST_BINS];
    let mut sum = 0.0;
    for (a, &i) in rows.iter().enumerate() {
        for &j in &rows[a + 1..] {
            let d = map.jsd_rows(head, i, j);
            sum += 2.0 * d;
            let bin = ((d * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
            histogram[bin] += 1;
        }
    }
    let mean_entropy = rows.iter().map(|&i| entropy(map.row(head, i))).sum::<f64>() / n as f64;
    HeadStats {
        head,
        mjsd: sum / (n * n) as f64,
        mean_entropy,
        histogram,
        queries_used: n,
    }
}

/// Point-averaged JSD over all ordered query pairs (diagonal included) and
/// all heads: `Σ_h Σ_i Σ_j JSD(row_i, row_j) / (N² h)`.
pub fn mjsd(map: &AttentionMap) -> Result<f64> {
    mjsd_capped(map, None)
}

pub fn mjsd_capped(map: &AttentionMap, max_queries: Option<usize>) -> Result<f64> {
    if map.queries == 0 || map.heads == 0 {
        return Err(Error::contract("mjsd of an empty map"));
    }
    let total: f64 = (0..map.heads)
        .map(|h| head_stats(map, h, max_queries).mjsd)
        .sum();
    Ok(total / map.heads as f64)
}
