//! Loop-closure retrieval with a temporal exclusion window, and the
//! precision/recall metrics used to score it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::descriptor::l2_distance;
use crate::error::{Error, Result};
use crate::geom::RigidTransform;

pub const DEFAULT_WINDOW: usize = 50;

/// Best admissible match of one query scan. `score` is the negated L2
/// descriptor distance, so higher means more similar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopCandidate {
    pub query: usize,
    pub candidate: usize,
    pub score: f64,
}

/// Append-only descriptor store queried by exact linear search.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorDb {
    entries: Vec<(usize, Vec<f64>)>,
    window: usize,
}

impl DescriptorDb {
    pub fn new(window: usize) -> Self {
        Self {
            entries: Vec::new(),
            window,
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, index: usize, descriptor: Vec<f64>) -> Result<()> {
        if let Some(&(last, _)) = self.entries.last() {
            if index <= last {
                return Err(Error::NonIncreasingIndex { last, got: index });
            }
        }
        self.entries.push((index, descriptor));
        Ok(())
    }

    /// Nearest stored descriptor among scans `j <= i - window - 1`; ties go
    /// to the smaller `j`.
    pub fn query(&self, i: usize, descriptor: &[f64]) -> Option<LoopCandidate> {
        let limit = i.checked_sub(self.window + 1)?;
        let mut best: Option<(usize, f64)> = None;
        for (j, d) in self.entries.iter().take_while(|(j, _)| *j <= limit) {
            let dist = l2_distance(descriptor, d);
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((*j, dist));
            }
        }
        best.map(|(j, dist)| LoopCandidate {
            query: i,
            candidate: j,
            score: -dist,
        })
    }
}

/// Queries every scan against all earlier ones, then inserts it.
pub fn detect_loops(descriptors: &[Vec<f64>], window: usize) -> Vec<LoopCandidate> {
    let mut db = DescriptorDb::new(window);
    let mut out = Vec::new();
    for (i, d) in descriptors.iter().enumerate() {
        if let Some(c) = db.query(i, d) {
            out.push(c);
        }
        db.insert(i, d.clone()).expect("indices increase");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    /// Ground-truth loop radius in meters.
    pub radius: f64,
    pub window: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            radius: 4.0,
            window: DEFAULT_WINDOW,
        }
    }
}

/// One operating point of the threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// A retrieved pair with its ground-truth verdict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopPair {
    pub i: usize,
    pub j: usize,
    pub score: f64,
    pub is_tp: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub i: usize,
    pub j: usize,
    /// Degrees.
    pub r_err: f64,
    /// Meters.
    pub t_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopEvalReport {
    /// Ordered by decreasing threshold.
    pub curve: Vec<PrPoint>,
    pub ap: f64,
    pub max_f1: f64,
    pub ep: f64,
    /// Queries with at least one admissible frame within the radius.
    pub positives: usize,
    pub no_positives: bool,
    pub pairs: Vec<LoopPair>,
    pub registration: Vec<PairError>,
    pub mean_r_err: Option<f64>,
    pub mean_t_err: Option<f64>,
}

impl LoopEvalReport {
    pub fn set_registration(&mut self, errors: Vec<PairError>) {
        let n = errors.len() as f64;
        self.mean_r_err = (!errors.is_empty()).then(|| errors.iter().map(|e| e.r_err).sum::<f64>() / n);
        self.mean_t_err = (!errors.is_empty()).then(|| errors.iter().map(|e| e.t_err).sum::<f64>() / n);
        self.registration = errors;
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn write_pr_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.curve)
    }

    /// Columns `i,j,score,is_tp`.
    pub fn write_loops_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.pairs)
    }
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn pose_distance(a: &RigidTransform, b: &RigidTransform) -> f64 {
    (a.translation() - b.translation()).norm()
}

/// Number of scans `i` with some `j <= i - window - 1` within `radius`.
pub fn count_positive_queries(poses: &[RigidTransform], params: &EvalParams) -> usize {
    (0..poses.len())
        .filter(|&i| {
            i.checked_sub(params.window + 1)
                .is_some_and(|limit| (0..=limit).any(|j| pose_distance(&poses[i], &poses[j]) <= params.radius))
        })
        .count()
}

/// Sweeps the threshold over every observed score.
///
/// A candidate is a true positive when its score clears the threshold and
/// the two poses lie within `radius`; otherwise it is a false positive.
/// Each positive query not counted as a true positive is a false negative.
///
/// AP is the step integral `Σ (R_k - R_{k-1}) P_k`. EP is the mean of the
/// precision at the lowest-recall point and the highest recall reached at
/// full precision (extended precision, Yin et al.).
pub fn evaluate_sequence(
    candidates: &[LoopCandidate],
    poses: &[RigidTransform],
    params: &EvalParams,
) -> Result<LoopEvalReport> {
    let mut missing: Vec<usize> = candidates
        .iter()
        .flat_map(|c| [c.query, c.candidate])
        .filter(|&i| i >= poses.len())
        .collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        missing.dedup();
        return Err(Error::MissingPoses(missing));
    }
    if let Some(c) = candidates.iter().find(|c| c.candidate + params.window + 1 > c.query) {
        return Err(Error::InvalidArgument(format!(
            "candidate ({}, {}) lies inside the exclusion window",
            c.query, c.candidate
        )));
    }
    if let Some(c) = candidates.iter().find(|c| !c.score.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite score for query {}",
            c.query
        )));
    }

    let positives = count_positive_queries(poses, params);
    let pairs: Vec<LoopPair> = candidates
        .iter()
        .map(|c| LoopPair {
            i: c.query,
            j: c.candidate,
            score: c.score,
            is_tp: pose_distance(&poses[c.query], &poses[c.candidate]) <= params.radius,
        })
        .collect();

    let mut order: Vec<&LoopPair> = pairs.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let tau = order[k].score;
        while k < order.len() && order[k].score == tau {
            if order[k].is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        curve.push(PrPoint {
            tau,
            precision: tp as f64 / (tp + fp) as f64,
            recall: if positives > 0 {
                tp as f64 / positives as f64
            } else {
                0.0
            },
            tp,
            fp,
            fn_: positives.saturating_sub(tp),
        });
    }

    let no_positives = positives == 0;
    let (ap, max_f1, ep) = if no_positives {
        log::warn!("no ground-truth loops in sequence; AP, Max-F1 and EP reported as 0");
        (0.0, 0.0, 0.0)
    } else {
        summarize(&curve)
    };
    Ok(LoopEvalReport {
        curve,
        ap,
        max_f1,
        ep,
        positives,
        no_positives,
        pairs,
        registration: Vec::new(),
        mean_r_err: None,
        mean_t_err: None,
    })
}

fn summarize(curve: &[PrPoint]) -> (f64, f64, f64) {
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut max_f1: f64 = 0.0;
    let mut recall_at_full: f64 = 0.0;
    for p in curve {
        ap += (p.recall - prev_recall) * p.precision;
        prev_recall = p.recall;
        if p.precision + p.recall > 0.0 {
            max_f1 = max_f1.max(2.0 * p.precision * p.recall / (p.precision + p.recall));
        }
        if p.precision == 1.0 {
            recall_at_full = recall_at_full.max(p.recall);
        }
    }
    let ep = curve.first().map_or(0.0, |p| 0.5 * (p.precision + recall_at_full));
    (ap, max_f1, ep)
}

/// Geodesic rotation error in degrees and translation error in meters.
pub fn registration_errors(estimate: &RigidTransform, truth: &RigidTransform) -> (f64, f64) {
    let rel = truth.rotation().transpose() * estimate.rotation();
    // arccos((tr R - 1) / 2) loses ~1e-8 rad near zero; atan2 with the
    // skew part gives the same angle without that floor
    let c = (rel.trace() - 1.0) / 2.0;
    let skew = nalgebra::Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let s = skew.norm() / 2.0;
    let t_err = (estimate.translation() - truth.translation()).norm();
    (s.atan2(c).to_degrees(), t_err)
}
