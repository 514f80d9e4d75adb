//! Training losses evaluated in the forward direction: triplet, pose,
//! matching, semantic, meta-semantic and multi-matched-object, plus the
//! bidirectional weighted total.
//!
//! All matrix losses are means over every matrix entry.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::RigidTransform;
use crate::io_kitti::{PanopticLabels, SuperClass, SEMANTIC_CLASS_COUNT};

/// Row-wise one-hot matrix stored as one column index per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHotMatrix {
    indices: Vec<usize>,
    classes: usize,
}

impl OneHotMatrix {
    pub fn new(indices: Vec<usize>, classes: usize) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= classes) {
            return Err(Error::InvalidArgument(format!(
                "class index {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self { indices, classes })
    }

    pub fn semantic(labels: &PanopticLabels) -> Self {
        Self {
            indices: labels.class_indices(),
            classes: SEMANTIC_CLASS_COUNT,
        }
    }

    pub fn super_class(labels: &PanopticLabels) -> Self {
        Self {
            indices: labels.super_class_indices(),
            classes: SuperClass::COUNT,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.indices.len(), self.classes);
        for (r, &c) in self.indices.iter().enumerate() {
            m[(r, c)] = 1.0;
        }
        m
    }
}

/// Same-object relation over points, stored as a group id per point.
/// `O_ij = 1` iff points `i` and `j` share a group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectAdjacency {
    groups: Vec<usize>,
    group_count: usize,
}

impl ObjectAdjacency {
    /// Canonicalizes arbitrary group keys to `0..G` in order of first
    /// appearance.
    pub fn from_groups<K: std::hash::Hash + Eq>(keys: impl IntoIterator<Item = K>) -> Self {
        let mut ids = HashMap::new();
        let groups: Vec<usize> = keys
            .into_iter()
            .map(|k| {
                let next = ids.len();
                *ids.entry(k).or_insert(next)
            })
            .collect();
        Self {
            group_count: ids.len(),
            groups,
        }
    }

    /// Points with a non-zero instance id are grouped by (instance, class);
    /// every other point is its own singleton object.
    pub fn from_labels(labels: &PanopticLabels) -> Self {
        let classes = labels.class_indices();
        Self::from_groups(
            labels
                .instance
                .iter()
                .zip(classes)
                .enumerate()
                .map(|(i, (&inst, cls))| {
                    if inst == 0 {
                        (0u16, usize::MAX, i)
                    } else {
                        (inst, cls, usize::MAX)
                    }
                }),
        )
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn group_count(&self) -> usize {
        self.group_count
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.groups.len();
        DMatrix::from_fn(n, n, |i, j| if self.groups[i] == self.groups[j] { 1.0 } else { 0.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_tri: f64,
    pub w_pos: f64,
    pub w_mat: f64,
    pub w_sem: f64,
    pub w_mes: f64,
    pub w_mmo: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_tri: 1.0,
            w_pos: 1.0,
            w_mat: 0.05,
            w_sem: 0.125,
            w_mes: 0.5,
            w_mmo: 10.0,
            margin: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_tri", self.w_tri),
            ("w_pos", self.w_pos),
            ("w_mat", self.w_mat),
            ("w_sem", self.w_sem),
            ("w_mes", self.w_mes),
            ("w_mmo", self.w_mmo),
            ("margin", self.margin),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// `max(‖a - p‖ - ‖a - n‖ + margin, 0)`.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<f64> {
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(Error::DimensionMismatch(format!(
            "descriptor lengths {}, {}, {}",
            anchor.len(),
            positive.len(),
            negative.len()
        )));
    }
    let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok((d(anchor, positive) - d(anchor, negative) + margin).max(0.0))
}

/// Mean absolute coordinate difference between the anchor keypoints moved
/// by the estimate and by the ground truth.
pub fn pose_loss(estimate: &RigidTransform, truth: &RigidTransform, anchor: &DMatrix<f64>) -> Result<f64> {
    check_points("anchor", anchor)?;
    Ok(mean_abs_diff(&estimate.apply(anchor), &truth.apply(anchor)))
}

/// Mean absolute difference between the ground-truth-moved anchor keypoints
/// and their soft matches `M · Q_p`.
pub fn match_loss(
    truth: &RigidTransform,
    anchor: &DMatrix<f64>,
    matching: &DMatrix<f64>,
    positive: &DMatrix<f64>,
) -> Result<f64> {
    check_points("anchor", anchor)?;
    check_points("positive", positive)?;
    check_matching(matching, anchor.nrows(), positive.nrows())?;
    Ok(mean_abs_diff(&truth.apply(anchor), &(matching * positive)))
}

/// `mean |K_a - M · K_p|` over all `n x C` entries. Also serves as the
/// meta-semantic loss when given super-class one-hots.
pub fn semantic_loss(anchor: &OneHotMatrix, matching: &DMatrix<f64>, positive: &OneHotMatrix) -> Result<f64> {
    if anchor.classes != positive.classes {
        return Err(Error::DimensionMismatch(format!(
            "{} anchor classes vs {} positive classes",
            anchor.classes, positive.classes
        )));
    }
    check_matching(matching, anchor.len(), positive.len())?;
    if anchor.is_empty() {
        return Err(Error::EmptyInput);
    }
    let c = anchor.classes;
    let mut acc = 0.0;
    let mut row = vec![0.0; c];
    for (i, &cls) in anchor.indices.iter().enumerate() {
        row.iter_mut().for_each(|v| *v = 0.0);
        for (j, &pc) in positive.indices.iter().enumerate() {
            row[pc] += matching[(i, j)];
        }
        for (k, v) in row.iter().enumerate() {
            let target = if k == cls { 1.0 } else { 0.0 };
            acc += (target - v).abs();
        }
    }
    Ok(acc / (anchor.len() * c) as f64)
}

pub fn meta_semantic_loss(anchor: &OneHotMatrix, matching: &DMatrix<f64>, positive: &OneHotMatrix) -> Result<f64> {
    semantic_loss(anchor, matching, positive)
}

/// `mean((1 - O_a) ⊙ (M_ap · O_p · M_pa))` over all `n_a x n_a` entries.
///
/// Evaluated through per-group sums so the cost stays quadratic in the
/// point count.
pub fn mmo_loss(
    anchor: &ObjectAdjacency,
    m_ap: &DMatrix<f64>,
    positive: &ObjectAdjacency,
    m_pa: &DMatrix<f64>,
) -> Result<f64> {
    let (n_a, n_p) = (anchor.len(), positive.len());
    check_matching(m_ap, n_a, n_p)?;
    check_matching(m_pa, n_p, n_a)?;
    if n_a == 0 {
        return Err(Error::EmptyInput);
    }
    let (ga, gp) = (anchor.group_count, positive.group_count);
    // a[x, y]: mass from anchor group x into positive group y via M_ap
    // b[y, x]: mass from positive group y back into anchor group x via M_pa
    let mut a = DMatrix::<f64>::zeros(ga, gp);
    let mut b = DMatrix::<f64>::zeros(gp, ga);
    for j in 0..n_p {
        let gj = positive.groups[j];
        for i in 0..n_a {
            a[(anchor.groups[i], gj)] += m_ap[(i, j)];
        }
    }
    for l in 0..n_a {
        let gl = anchor.groups[l];
        for k in 0..n_p {
            b[(positive.groups[k], gl)] += m_pa[(k, l)];
        }
    }
    // total mass of M_ap O_p M_pa minus the mass on same-anchor-object pairs
    let mut total = 0.0;
    let mut same = 0.0;
    for y in 0..gp {
        let out: f64 = a.column(y).sum();
        let back: f64 = b.row(y).sum();
        total += out * back;
        for x in 0..ga {
            same += a[(x, y)] * b[(y, x)];
        }
    }
    Ok(((total - same) / (n_a * n_a) as f64).max(0.0))
}

fn check_points(what: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.ncols() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "{what} points have {} columns",
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

fn check_matching(m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::DimensionMismatch(format!(
            "matching is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn mean_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Registration losses of one direction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DirectionalLosses {
    pub pose: f64,
    pub matching: f64,
    pub semantic: f64,
    pub meta_semantic: f64,
    pub mmo: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub triplet: f64,
    /// Direction-averaged terms (forward only when reverse is disabled).
    pub pose: f64,
    pub matching: f64,
    pub semantic: f64,
    pub meta_semantic: f64,
    pub mmo: f64,
    pub forward: DirectionalLosses,
    pub reverse: Option<DirectionalLosses>,
    pub weights: LossWeights,
    pub total: f64,
}

/// `w_Tri L_Tri + Σ_k w_k ½(L_k^fwd + L_k^rev)`; forward terms only when
/// `reverse` is `None`.
pub fn total_loss(
    triplet: f64,
    forward: &DirectionalLosses,
    reverse: Option<&DirectionalLosses>,
    weights: &LossWeights,
) -> LossBreakdown {
    let avg = |f: fn(&DirectionalLosses) -> f64| match reverse {
        Some(r) => 0.5 * (f(forward) + f(r)),
        None => f(forward),
    };
    let pose = avg(|d| d.pose);
    let matching = avg(|d| d.matching);
    let semantic = avg(|d| d.semantic);
    let meta_semantic = avg(|d| d.meta_semantic);
    let mmo = avg(|d| d.mmo);
    let total = weights.w_tri * triplet
        + weights.w_pos * pose
        + weights.w_mat * matching
        + weights.w_sem * semantic
        + weights.w_mes * meta_semantic
        + weights.w_mmo * mmo;
    LossBreakdown {
        triplet,
        pose,
        matching,
        semantic,
        meta_semantic,
        mmo,
        forward: *forward,
        reverse: reverse.copied(),
        weights: *weights,
        total,
    }
}

/// Where the back-matching `M_pa` of the multi-matched-object loss comes
/// from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MmoSource {
    /// The reverse pass's matching matrix.
    #[default]
    ReverseHead,
    /// The transpose of the forward matching matrix.
    Transpose,
}

/// Keypoints of one cloud with the label structures the losses need.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSide {
    pub points: DMatrix<f64>,
    pub classes: OneHotMatrix,
    pub super_classes: OneHotMatrix,
    pub objects: ObjectAdjacency,
}

impl LossSide {
    pub fn new(points: DMatrix<f64>, labels: &PanopticLabels) -> Result<Self> {
        if labels.len() != points.nrows() {
            return Err(Error::LabelLengthMismatch {
                expected: points.nrows(),
                found: labels.len(),
            });
        }
        Ok(Self {
            points,
            classes: OneHotMatrix::semantic(labels),
            super_classes: OneHotMatrix::super_class(labels),
            objects: ObjectAdjacency::from_labels(labels),
        })
    }
}

/// Output of one matching + registration pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionPass {
    pub matching: DMatrix<f64>,
    pub estimate: RigidTransform,
}

/// Losses of the pass `src -> dst` whose ground truth maps `src` into the
/// `dst` frame. `back` is the `dst -> src` matching used by the
/// multi-matched-object term.
pub fn directional_losses(
    src: &LossSide,
    dst: &LossSide,
    pass: &DirectionPass,
    back: &DMatrix<f64>,
    truth: &RigidTransform,
) -> Result<DirectionalLosses> {
    Ok(DirectionalLosses {
        pose: pose_loss(&pass.estimate, truth, &src.points)?,
        matching: match_loss(truth, &src.points, &pass.matching, &dst.points)?,
        semantic: semantic_loss(&src.classes, &pass.matching, &dst.classes)?,
        meta_semantic: meta_semantic_loss(&src.super_classes, &pass.matching, &dst.super_classes)?,
        mmo: mmo_loss(&src.objects, &pass.matching, &dst.objects, back)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairLosses {
    pub forward: DirectionalLosses,
    pub reverse: Option<DirectionalLosses>,
    /// Set when `M_pa` was taken as the transpose of the forward matching.
    pub mmo_transpose_fallback: bool,
}

/// Forward (`a -> p`, ground truth `truth_ap`) and optional reverse
/// (`p -> a`, ground truth inverted) losses.
pub fn pair_losses(
    anchor: &LossSide,
    positive: &LossSide,
    forward: &DirectionPass,
    reverse: Option<&DirectionPass>,
    truth_ap: &RigidTransform,
    mmo_source: MmoSource,
) -> Result<PairLosses> {
    let transpose = mmo_source == MmoSource::Transpose || reverse.is_none();
    let (back_fwd, back_rev) = match (transpose, reverse) {
        (false, Some(r)) => (r.matching.clone(), forward.matching.clone()),
        (_, r) => (
            forward.matching.transpose(),
            r.map(|r| r.matching.transpose()).unwrap_or_default(),
        ),
    };
    let fwd = directional_losses(anchor, positive, forward, &back_fwd, truth_ap)?;
    let rev = match reverse {
        Some(r) => Some(directional_losses(positive, anchor, r, &back_rev, &truth_ap.inverse())?),
        None => None,
    };
    Ok(PairLosses {
        forward: fwd,
        reverse: rev,
        mmo_transpose_fallback: transpose,
    })
}
