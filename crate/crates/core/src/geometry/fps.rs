use alloc::vec;
use alloc::vec::Vec;

use super::{dist2, Point};
use crate::error::{Error, Result};

fn check(n: usize, m: usize, start: usize) -> Result<()> {
    if m == 0 || m > n {
        return Err(Error::config(alloc::format!(
            "cannot sample {m} of {n} points"
        )));
    }
    if start >= n {
        return Err(Error::Index {
            op: "farthest_point_sample",
            index: start,
            len: n,
        });
    }
    Ok(())
}

/// Greedy max-min sampling from `start`. Each step picks the point whose
/// distance to the selected set is largest (lowest index on ties). Points
/// are never picked twice, even when duplicates leave only zero distances.
pub fn farthest_point_sample(points: &[Point], m: usize, start: usize) -> Result<Vec<usize>> {
    check(points.len(), m, start)?;
    // picked points hold -1, below any distance, so they are never chosen again
    let mut min_d = vec![f64::INFINITY; points.len()];
    let mut picked = Vec::with_capacity(m);
    let mut last = start;
    picked.push(start);
    min_d[start] = -1.0;
    while picked.len() < m {
        let lp = points[last];
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, (p, d)) in points.iter().zip(min_d.iter_mut()).enumerate() {
            let nd = dist2(p, &lp);
            if nd < *d {
                *d = nd;
            }
            if *d > best_d {
                best_d = *d;
                best = i;
            }
        }
        picked.push(best);
        min_d[best] = -1.0;
        last = best;
    }
    Ok(picked)
}

/// Quadratic-per-step reference that recomputes every max-min distance from
/// scratch. Used to validate the incremental version.
pub fn farthest_point_sample_brute(points: &[Point], m: usize, start: usize) -> Result<Vec<usize>> {
    check(points.len(), m, start)?;
    let mut picked = vec![start];
    while picked.len() < m {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if picked.contains(&i) {
                continue;
            }
            let d = picked
                .iter()
                .map(|&j| dist2(p, &points[j]))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        picked.push(best);
    }
    Ok(picked)
}
