//! Dynamic time warping between pose sequences, corpus evaluation reports
//! and score histograms.
//!
//! Frame cost is a distance over joint coordinates; the progress counter
//! never enters the cost. The alignment cost follows
//! D(i,j) = cost(i,j) + min(D(i-1,j), D(i,j-1), D(i-1,j-1)) and normalised
//! scores divide by the number of path cells, with ties between equal-cost
//! paths broken towards fewer cells so the normalised score is well defined.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::skeleton::PoseSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameCost {
    Euclidean,
    Manhattan,
}

impl FrameCost {
    pub fn parse(name: &str) -> Result<FrameCost> {
        match name {
            "euclidean" => Ok(FrameCost::Euclidean),
            "manhattan" => Ok(FrameCost::Manhattan),
            other => Err(Error::contract(format!(
                "frame cost must be euclidean or manhattan, got {other}"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FrameCost::Euclidean => "euclidean",
            FrameCost::Manhattan => "manhattan",
        }
    }

    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            FrameCost::Euclidean => {
                let mut acc = 0.0;
                for (x, y) in a.iter().zip(b) {
                    let d = x - y;
                    acc += d * d;
                }
                acc.sqrt()
            }
            FrameCost::Manhattan => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtwConfig {
    pub frame_cost: FrameCost,
    pub normalize_by_path_length: bool,
}

impl Default for DtwConfig {
    /// Euclidean cost, normalised: clip length must not dominate corpus
    /// means.
    fn default() -> Self {
        DtwConfig {
            frame_cost: FrameCost::Euclidean,
            normalize_by_path_length: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtwResult {
    /// Accumulated alignment cost along the optimal path.
    pub cost: f64,
    /// Cells visited by the optimal path; the normalisation denominator.
    pub path_cells: usize,
}

impl DtwResult {
    pub fn normalized(&self) -> f64 {
        self.cost / self.path_cells as f64
    }
}

fn coord_rows(seq: &PoseSequence) -> Vec<f64> {
    let mut out = Vec::with_capacity(seq.len() * seq.joint_count() * 3);
    for f in seq.frames() {
        for j in &f.joints {
            out.extend_from_slice(j);
        }
    }
    out
}

/// Full-sequence alignment returning both the raw cost and the optimal path
/// length. Errors on empty sequences or joint-count mismatch.
pub fn dtw_alignment(a: &PoseSequence, b: &PoseSequence, cost_fn: FrameCost) -> Result<DtwResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("dtw: empty sequence"));
    }
    if a.joint_count() != b.joint_count() {
        return Err(Error::dim(format!(
            "dtw: {} vs {} joints",
            a.joint_count(),
            b.joint_count()
        )));
    }
    let width = a.joint_count() * 3;
    let av = coord_rows(a);
    let bv = coord_rows(b);
    let n = a.len();
    let m = b.len();
    let mut cost = vec![0.0f64; n * m];
    let mut cells = vec![0usize; n * m];
    for i in 0..n {
        let fa = &av[i * width..(i + 1) * width];
        for j in 0..m {
            let c = cost_fn.eval(fa, &bv[j * width..(j + 1) * width]);
            if i == 0 && j == 0 {
                cost[0] = c;
                cells[0] = 1;
                continue;
            }
            let mut best_cost = f64::INFINITY;
            let mut best_cells = usize::MAX;
            let mut consider = |pc: f64, pcells: usize| {
                if pc < best_cost || (pc == best_cost && pcells < best_cells) {
                    best_cost = pc;
                    best_cells = pcells;
                }
            };
            if i > 0 {
                consider(cost[(i - 1) * m + j], cells[(i - 1) * m + j]);
            }
            if j > 0 {
                consider(cost[i * m + j - 1], cells[i * m + j - 1]);
            }
            if i > 0 && j > 0 {
                consider(cost[(i - 1) * m + j - 1], cells[(i - 1) * m + j - 1]);
            }
            cost[i * m + j] = c + best_cost;
            cells[i * m + j] = best_cells + 1;
        }
    }
    Ok(DtwResult {
        cost: cost[n * m - 1],
        path_cells: cells[n * m - 1],
    })
}

/// Alignment distance under the given configuration.
pub fn dtw_distance(a: &PoseSequence, b: &PoseSequence, cfg: &DtwConfig) -> Result<f64> {
    let r = dtw_alignment(a, b, cfg.frame_cost)?;
    Ok(if cfg.normalize_by_path_length {
        r.normalized()
    } else {
        r.cost
    })
}

/// Normalised Euclidean alignment score; the default reported everywhere.
pub fn dtw_normalized(a: &PoseSequence, b: &PoseSequence) -> Result<f64> {
    dtw_distance(a, b, &DtwConfig::default())
}

#[derive(Debug, Clone)]
pub struct ClipScore {
    pub clip_id: String,
    pub dtw: f64,
    pub frames_pred: usize,
    pub frames_gt: usize,
}

#[derive(Debug, Clone)]
pub struct CorpusScores {
    pub clips: Vec<ClipScore>,
    pub mean: f64,
    pub median: f64,
    /// Clips whose prediction failed; excluded from the statistics.
    pub failed: Vec<String>,
}

/// Score prediction/reference pairs clip by clip, in parallel. Input order
/// is preserved in the report.
pub fn score_pairs(
    pairs: &[(String, PoseSequence, PoseSequence)],
    cfg: &DtwConfig,
) -> Result<CorpusScores> {
    let items: Vec<(String, Result<PoseSequence>, PoseSequence)> = pairs
        .iter()
        .map(|(id, pred, gt)| (id.clone(), Ok(pred.clone()), gt.clone()))
        .collect();
    score_outputs(&items, cfg)
}

/// Score model outputs against references. Failed predictions are recorded
/// by clip id and excluded from the mean and median; scoring errors on the
/// successful clips still abort.
pub fn score_outputs(
    items: &[(String, Result<PoseSequence>, PoseSequence)],
    cfg: &DtwConfig,
) -> Result<CorpusScores> {
    if items.is_empty() {
        return Err(Error::contract("dtw corpus: no clips"));
    }
    let failed: Vec<String> = items
        .iter()
        .filter(|(_, pred, _)| pred.is_err())
        .map(|(id, _, _)| id.clone())
        .collect();
    let clips: Vec<ClipScore> = items
        .par_iter()
        .filter_map(|(id, pred, gt)| {
            let pred = pred.as_ref().ok()?;
            Some(dtw_distance(pred, gt, cfg).map(|score| ClipScore {
                clip_id: id.clone(),
                dtw: score,
                frames_pred: pred.len(),
                frames_gt: gt.len(),
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    if clips.is_empty() {
        return Err(Error::contract("dtw corpus: every clip failed"));
    }
    let mut values: Vec<f64> = clips.iter().map(|c| c.dtw).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite dtw scores"));
    let median = if values.len() % 2 == 1 {
        values[values.len() / 2]
    } else {
        let hi = values.len() / 2;
        0.5 * (values[hi - 1] + values[hi])
    };
    Ok(CorpusScores {
        clips,
        mean,
        median,
        failed,
    })
}

/// Histogram with fixed-width bins [k w, (k+1) w) starting at zero,
/// spanning up to the largest value; empty bins in between are kept.
pub fn histogram(values: &[f64], bin_width: f64) -> Result<Vec<(f64, usize)>> {
    if !(bin_width > 0.0) {
        return Err(Error::contract("histogram: bin width must be positive"));
    }
    if values.is_empty() {
        return Ok(Vec::new());
    }
    for v in values {
        if !v.is_finite() || *v < 0.0 {
            return Err(Error::contract(format!("histogram: bad value {v}")));
        }
    }
    let max_bin = values
        .iter()
        .map(|v| (v / bin_width).floor() as usize)
        .max()
        .unwrap();
    let mut counts = vec![0usize; max_bin + 1];
    for v in values {
        counts[(v / bin_width).floor() as usize] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(k, c)| (k as f64 * bin_width, c))
        .collect())
}

pub fn write_report_tsv(scores: &CorpusScores, path: &Path) -> Result<()> {
    let mut out = String::from("clip_id\tdtw\tframes_pred\tframes_gt\n");
    for c in &scores.clips {
        out.push_str(&format!(
            "{}\t{:.6}\t{}\t{}\n",
            c.clip_id, c.dtw, c.frames_pred, c.frames_gt
        ));
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

pub fn write_histogram_tsv(bins: &[(f64, usize)], path: &Path) -> Result<()> {
    let mut out = String::from("bin_low\tcount\n");
    for (low, count) in bins {
        out.push_str(&format!("{low:.2}\t{count}\n"));
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}
