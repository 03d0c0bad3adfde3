//! Degeneration reports over dumped attention maps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use upa_core::analysis::{head_stats, AttentionMap, HIST_BINS};

use crate::error::{self, Error, Result};
use crate::formats;

/// One (map, head) row of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub file: String,
    pub stage: u32,
    pub head: usize,
    pub queries: usize,
    pub keys: usize,
    pub queries_used: usize,
    pub mjsd: f64,
    pub mean_entropy: f64,
    /// Unordered query-pair JSD counts over 20 equal bins of [0, 1].
    pub jsd_histogram: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub max_queries: Option<usize>,
    pub rows: Vec<HeadReport>,
}

pub fn analyze_maps(maps: &[(String, AttentionMap)], max_queries: Option<usize>) -> Report {
    let mut rows = Vec::new();
    for (file, map) in maps {
        for h in 0..map.heads() {
            let s = head_stats(map, h, max_queries);
            debug_assert_eq!(s.histogram.len(), HIST_BINS);
            rows.push(HeadReport {
                file: file.clone(),
                stage: map.stage,
                head: h,
                queries: map.queries(),
                keys: map.keys(),
                queries_used: s.queries_used,
                mjsd: s.mjsd,
                mean_entropy: s.mean_entropy,
                jsd_histogram: s.histogram,
            });
        }
    }
    Report { max_queries, rows }
}

/// Aligned plain-text table: rounded and raw mJSD, mean entropy in bits.
pub fn render_table(report: &Report) -> String {
    let fw = report.rows.iter().map(|r| r.file.len()).max().unwrap_or(4).max(4);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<fw$}  {:>5}  {:>4}  {:>6}  {:>8}  {:>24}  {:>12}",
        "file", "stage", "head", "M", "mJSD", "mJSD (raw)", "entropy"
    );
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{:<fw$}  {:>5}  {:>4}  {:>6}  {:>8.4}  {:>24}  {:>12.4}",
            r.file,
            r.stage,
            r.head,
            r.queries,
            r.mjsd,
            format!("{:e}", r.mjsd),
            r.mean_entropy
        );
    }
    if let Some(c) = report.max_queries {
        let _ = writeln!(s, "queries subsampled to at most {c} per map");
    }
    s
}

/// `.uamp` files of `dir` in name order.
pub fn map_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "uamp"))
        .collect();
    v.sort();
    if v.is_empty() {
        return Err(Error::config(format!("no .uamp files in {}", dir.display())));
    }
    Ok(v)
}

/// Reads every dump in `maps_dir`, writes the JSON report to `out` and the
/// text table next to it with a `.txt` extension.
pub fn analyze_run(maps_dir: &Path, out: &Path, max_queries: Option<usize>) -> Result<Report> {
    let maps = map_files(maps_dir)?
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            Ok((name, formats::read_map(&p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = analyze_maps(&maps, max_queries);
    error::write(out, serde_json::to_vec_pretty(&report)?)?;
    error::write(&out.with_extension("txt"), render_table(&report))?;
    Ok(report)
}
