//! Cross-attention point matching.
//!
//! A single transformer encoder layer takes the source features as queries,
//! the target features as keys and the target keypoint coordinates as
//! values. Its head-averaged attention matrix is the soft correspondence
//! matrix; each row is a probability distribution over target points.
//! Per-row confidence weights are derived from how concentrated that
//! distribution is.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_file::{Tensor, TensorFile};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MatchingMode {
    /// `projected = M · Q_t`; value lift, residuals and feed-forward are
    /// bypassed.
    #[default]
    PureAttention,
    /// `projected = W_Q · TEL(F_s, F_t, Q_t) + b_Q` with one post-norm
    /// encoder layer.
    FullTel,
}

impl fmt::Display for MatchingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchingMode::PureAttention => "pure-attention",
            MatchingMode::FullTel => "full-tel",
        })
    }
}

impl FromStr for MatchingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pure-attention" => Ok(MatchingMode::PureAttention),
            "full-tel" => Ok(MatchingMode::FullTel),
            other => Err(Error::Config(format!("unknown matching mode `{other}`"))),
        }
    }
}

/// Confidence weighting applied to the rows of the matching matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
#[derive(Default)]
pub enum DiversityMetric {
    /// Every match weighs 1 (unweighted SVD).
    Uniform,
    /// Column sum of the matching matrix at each row's argmax column,
    /// divided by the largest column sum.
    ColumnSum,
    /// `1 - E(p) / ln n`.
    Shannon,
    /// `(n - D^r(p)) / (n - 1)` for the order-`r` Hill number.
    Hill(f64),
    /// `(max p - 1/n) / (1 - 1/n)`.
    #[default]
    BergerParker,
}

impl fmt::Display for DiversityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiversityMetric::Uniform => f.write_str("uniform"),
            DiversityMetric::ColumnSum => f.write_str("column-sum"),
            DiversityMetric::Shannon => f.write_str("shannon"),
            DiversityMetric::Hill(r) => write!(f, "hill-{r}"),
            DiversityMetric::BergerParker => f.write_str("berger-parker"),
        }
    }
}

impl FromStr for DiversityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(DiversityMetric::Uniform),
            "column-sum" => Ok(DiversityMetric::ColumnSum),
            "shannon" => Ok(DiversityMetric::Shannon),
            "berger-parker" => Ok(DiversityMetric::BergerParker),
            other => {
                let r = other
                    .strip_prefix("hill-")
                    .and_then(|r| r.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown diversity metric `{other}`")))?;
                if !(r.is_finite() && r > 0.0) {
                    return Err(Error::Config(format!("Hill order must be finite and > 0, got {r}")));
                }
                Ok(DiversityMetric::Hill(r))
            }
        }
    }
}

impl TryFrom<String> for DiversityMetric {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DiversityMetric> for String {
    fn from(m: DiversityMetric) -> String {
        m.to_string()
    }
}

/// Confidence of one matching row, normalized so that a uniform row maps to
/// 0 and a one-hot row to 1. A row of length 1 is infinitely sharp.
///
/// Column-sum weighting needs the whole matrix; see [`confidence_weights`].
pub fn confidence(row: &[f64], metric: DiversityMetric) -> Result<f64> {
    let n = row.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty probability row".into()));
    }
    if metric == DiversityMetric::ColumnSum {
        return Err(Error::InvalidArgument(
            "column-sum weights are defined on the full matching matrix".into(),
        ));
    }
    if metric == DiversityMetric::Uniform || n == 1 {
        return Ok(1.0);
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = row.iter().copied().fold(f64::INFINITY, f64::min);
    if max == min {
        return Ok(0.0);
    }
    let nf = n as f64;
    let w = match metric {
        DiversityMetric::Shannon => 1.0 - shannon_entropy(row) / nf.ln(),
        DiversityMetric::Hill(r) => (nf - hill_number(row, r)) / (nf - 1.0),
        DiversityMetric::BergerParker => (max - 1.0 / nf) / (1.0 - 1.0 / nf),
        DiversityMetric::Uniform | DiversityMetric::ColumnSum => unreachable!(),
    };
    Ok(w.clamp(0.0, 1.0))
}

/// `-Σ p ln p` with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// `(Σ p^r)^(1 / (1 - r))`; the `r = 1` limit is `exp(E(p))`.
pub fn hill_number(p: &[f64], r: f64) -> f64 {
    if r == 1.0 {
        return shannon_entropy(p).exp();
    }
    let s: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| x.powf(r)).sum();
    s.powf(1.0 / (1.0 - r))
}

/// Per-row confidence weights of a row-stochastic matrix.
pub fn confidence_weights(matching: &DMatrix<f64>, metric: DiversityMetric) -> Vec<f64> {
    match metric {
        DiversityMetric::ColumnSum => {
            let sums: Vec<f64> = matching.column_iter().map(|c| c.sum()).collect();
            let max = sums.iter().copied().fold(0.0, f64::max);
            matching
                .row_iter()
                .map(|row| {
                    let mut best = 0;
                    for (j, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = j;
                        }
                    }
                    if max > 0.0 {
                        (sums[best] / max).clamp(0.0, 1.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        _ => {
            let mut buf = vec![0.0; matching.ncols()];
            matching
                .row_iter()
                .map(|row| {
                    for (b, v) in buf.iter_mut().zip(row.iter()) {
                        *b = *v;
                    }
                    confidence(&buf, metric).expect("row metric on non-empty row")
                })
                .collect()
        }
    }
}

/// Query, key and value projections of one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    /// `f x d_k`
    pub query: DMatrix<f64>,
    /// `f x d_k`
    pub key: DMatrix<f64>,
    /// `f x d_k`, applied to the lifted values.
    pub value: DMatrix<f64>,
}

/// Parameters of the single encoder layer plus the final `f -> 3`
/// projection. Matrices act on row vectors (`x · W`), except the final
/// projection which is stored as `3 x f` and applied as `W_Q · x`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub heads: Vec<HeadWeights>,
    /// `3 x f` lift of target coordinates to model width.
    pub value_lift: DMatrix<f64>,
    pub value_lift_bias: DVector<f64>,
    /// `f x f` output projection of the concatenated heads.
    pub output: DMatrix<f64>,
    pub output_bias: DVector<f64>,
    /// `f x 2f`
    pub ff_in: DMatrix<f64>,
    pub ff_in_bias: DVector<f64>,
    /// `2f x f`
    pub ff_out: DMatrix<f64>,
    pub ff_out_bias: DVector<f64>,
    pub norm1_scale: DVector<f64>,
    pub norm1_offset: DVector<f64>,
    pub norm2_scale: DVector<f64>,
    pub norm2_offset: DVector<f64>,
    /// `3 x f`
    pub projection: DMatrix<f64>,
    pub projection_bias: DVector<f64>,
    pub mode: MatchingMode,
}

impl EncoderWeights {
    /// Untrained weights: Gaussian entries with standard deviation `1/√f`,
    /// zero biases and unit layer-norm scales.
    pub fn init(dim: usize, heads: usize, mode: MatchingMode, seed: u64) -> Result<Self> {
        check_heads(dim, heads)?;
        let d_k = dim / heads;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
        let mut gauss = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| normal.sample(&mut rng));
        let heads = (0..heads)
            .map(|_| HeadWeights {
                query: gauss(dim, d_k),
                key: gauss(dim, d_k),
                value: gauss(dim, d_k),
            })
            .collect();
        Ok(Self {
            heads,
            value_lift: gauss(3, dim),
            value_lift_bias: DVector::zeros(dim),
            output: gauss(dim, dim),
            output_bias: DVector::zeros(dim),
            ff_in: gauss(dim, 2 * dim),
            ff_in_bias: DVector::zeros(2 * dim),
            ff_out: gauss(2 * dim, dim),
            ff_out_bias: DVector::zeros(dim),
            norm1_scale: DVector::from_element(dim, 1.0),
            norm1_offset: DVector::zeros(dim),
            norm2_scale: DVector::from_element(dim, 1.0),
            norm2_offset: DVector::zeros(dim),
            projection: gauss(3, dim),
            projection_bias: DVector::zeros(3),
            mode,
        })
    }

    pub fn dim(&self) -> usize {
        self.output.nrows()
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.head_count().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.dim();
        check_heads(f, self.heads.len())?;
        let d_k = f / self.heads.len();
        let mismatch = |what: &str, got: (usize, usize), want: (usize, usize)| {
            Error::WeightShapeMismatch(format!("{what} is {}x{}, expected {}x{}", got.0, got.1, want.0, want.1))
        };
        let check = |what: &str, m: &DMatrix<f64>, want: (usize, usize)| {
            if m.shape() != want {
                Err(mismatch(what, m.shape(), want))
            } else {
                Ok(())
            }
        };
        let check_v = |what: &str, v: &DVector<f64>, want: usize| {
            if v.len() != want {
                Err(Error::WeightShapeMismatch(format!(
                    "{what} has length {}, expected {want}",
                    v.len()
                )))
            } else {
                Ok(())
            }
        };
        for (i, h) in self.heads.iter().enumerate() {
            check(&format!("head {i} query"), &h.query, (f, d_k))?;
            check(&format!("head {i} key"), &h.key, (f, d_k))?;
            check(&format!("head {i} value"), &h.value, (f, d_k))?;
        }
        check("value lift", &self.value_lift, (3, f))?;
        check_v("value lift bias", &self.value_lift_bias, f)?;
        check("output", &self.output, (f, f))?;
        check_v("output bias", &self.output_bias, f)?;
        check("ff_in", &self.ff_in, (f, 2 * f))?;
        check_v("ff_in bias", &self.ff_in_bias, 2 * f)?;
        check("ff_out", &self.ff_out, (2 * f, f))?;
        check_v("ff_out bias", &self.ff_out_bias, f)?;
        for (name, v) in [
            ("norm1 scale", &self.norm1_scale),
            ("norm1 offset", &self.norm1_offset),
            ("norm2 scale", &self.norm2_scale),
            ("norm2 offset", &self.norm2_offset),
        ] {
            check_v(name, v, f)?;
        }
        check("projection", &self.projection, (3, f))?;
        check_v("projection bias", &self.projection_bias, 3)?;
        Ok(())
    }

    pub fn to_tensors(&self) -> TensorFile {
        let mut t = TensorFile::new();
        for (i, h) in self.heads.iter().enumerate() {
            t.insert(format!("matching.head{i}.query"), Tensor::from_matrix(&h.query));
            t.insert(format!("matching.head{i}.key"), Tensor::from_matrix(&h.key));
            t.insert(format!("matching.head{i}.value"), Tensor::from_matrix(&h.value));
        }
        for (name, m) in self.named_matrices() {
            t.insert(name, Tensor::from_matrix(m));
        }
        for (name, v) in self.named_vectors() {
            t.insert(name, Tensor::from_vector(v));
        }
        t
    }

    /// Loads weights for width `dim` and `heads` heads, checking every shape.
    pub fn from_tensors(tensors: &TensorFile, dim: usize, heads: usize, mode: MatchingMode) -> Result<Self> {
        check_heads(dim, heads)?;
        let d_k = dim / heads;
        let m = |name: &str, r: usize, c: usize| tensors.require(name)?.to_matrix(r, c);
        let v = |name: &str, n: usize| tensors.require(name)?.to_vector(n);
        let heads = (0..heads)
            .map(|i| {
                Ok(HeadWeights {
                    query: m(&format!("matching.head{i}.query"), dim, d_k)?,
                    key: m(&format!("matching.head{i}.key"), dim, d_k)?,
                    value: m(&format!("matching.head{i}.value"), dim, d_k)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let w = Self {
            heads,
            value_lift: m("matching.value_lift.weight", 3, dim)?,
            value_lift_bias: v("matching.value_lift.bias", dim)?,
            output: m("matching.output.weight", dim, dim)?,
            output_bias: v("matching.output.bias", dim)?,
            ff_in: m("matching.ff_in.weight", dim, 2 * dim)?,
            ff_in_bias: v("matching.ff_in.bias", 2 * dim)?,
            ff_out: m("matching.ff_out.weight", 2 * dim, dim)?,
            ff_out_bias: v("matching.ff_out.bias", dim)?,
            norm1_scale: v("matching.norm1.scale", dim)?,
            norm1_offset: v("matching.norm1.offset", dim)?,
            norm2_scale: v("matching.norm2.scale", dim)?,
            norm2_offset: v("matching.norm2.offset", dim)?,
            projection: m("matching.projection.weight", 3, dim)?,
            projection_bias: v("matching.projection.bias", 3)?,
            mode,
        };
        w.validate()?;
        Ok(w)
    }

    fn named_matrices(&self) -> [(&'static str, &DMatrix<f64>); 5] {
        [
            ("matching.value_lift.weight", &self.value_lift),
            ("matching.output.weight", &self.output),
            ("matching.ff_in.weight", &self.ff_in),
            ("matching.ff_out.weight", &self.ff_out),
            ("matching.projection.weight", &self.projection),
        ]
    }

    fn named_vectors(&self) -> [(&'static str, &DVector<f64>); 9] {
        [
            ("matching.value_lift.bias", &self.value_lift_bias),
            ("matching.output.bias", &self.output_bias),
            ("matching.ff_in.bias", &self.ff_in_bias),
            ("matching.ff_out.bias", &self.ff_out_bias),
            ("matching.norm1.scale", &self.norm1_scale),
            ("matching.norm1.offset", &self.norm1_offset),
            ("matching.norm2.scale", &self.norm2_scale),
            ("matching.norm2.offset", &self.norm2_offset),
            ("matching.projection.bias", &self.projection_bias),
        ]
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "head count {heads} must be >= 1 and divide the feature width {dim}"
        )));
    }
    Ok(())
}

/// Soft correspondences from source to target keypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `n_s x n_t`, row-stochastic.
    pub matching: DMatrix<f64>,
    /// `n_s x 3` projected target points, one per source keypoint.
    pub projected: DMatrix<f64>,
    /// Per-source-row weights in `[0, 1]`.
    pub confidence: Vec<f64>,
}

/// Runs the matching head with `source` features as queries, `target`
/// features as keys and `target_points` (`n_t x 3`) as values.
pub fn match_points(
    source: &DMatrix<f64>,
    target: &DMatrix<f64>,
    target_points: &DMatrix<f64>,
    weights: &EncoderWeights,
    metric: DiversityMetric,
) -> Result<MatchResult> {
    if target.nrows() == 0 {
        return Err(Error::EmptyTarget);
    }
    let f = weights.dim();
    if source.ncols() != f || target.ncols() != f {
        return Err(Error::DimensionMismatch(format!(
            "features have widths {} and {}, encoder expects {f}",
            source.ncols(),
            target.ncols()
        )));
    }
    if target_points.shape() != (target.nrows(), 3) {
        return Err(Error::DimensionMismatch(format!(
            "target points are {}x{}, expected {}x3",
            target_points.nrows(),
            target_points.ncols(),
            target.nrows()
        )));
    }
    if !source
        .iter()
        .chain(target.iter())
        .chain(target_points.iter())
        .all(|v| v.is_finite())
    {
        return Err(Error::NonFiniteFeatures);
    }
    weights.validate()?;

    let (n_s, n_t) = (source.nrows(), target.nrows());
    let h = weights.head_count();
    let d_k = weights.head_dim();
    let scale = 1.0 / (d_k as f64).sqrt();
    let full = weights.mode == MatchingMode::FullTel;

    let lifted = full.then(|| {
        let mut l = target_points * &weights.value_lift;
        add_row_bias(&mut l, &weights.value_lift_bias);
        l
    });
    let mut concat = if full {
        DMatrix::zeros(n_s, f)
    } else {
        DMatrix::zeros(0, 0)
    };

    // accumulated transposed (n_t x n_s) so each source row is a contiguous column
    let mut sum_t = DMatrix::<f64>::zeros(n_t, n_s);
    for (i, head) in weights.heads.iter().enumerate() {
        let q = source * &head.query;
        let k = target * &head.key;
        let mut att_t = &k * q.transpose();
        att_t *= scale;
        for mut col in att_t.column_iter_mut() {
            softmax_in_place(col.as_mut_slice());
        }
        sum_t += &att_t;
        if let Some(lifted) = &lifted {
            let v = lifted * &head.value;
            let out = att_t.transpose() * v;
            concat.view_mut((0, i * d_k), (n_s, d_k)).copy_from(&out);
        }
    }
    sum_t /= h as f64;
    let matching = sum_t.transpose();

    let projected = if full {
        let mut attn = concat * &weights.output;
        add_row_bias(&mut attn, &weights.output_bias);
        let x = layer_norm(&(source + attn), &weights.norm1_scale, &weights.norm1_offset);
        let mut hidden = &x * &weights.ff_in;
        add_row_bias(&mut hidden, &weights.ff_in_bias);
        hidden.apply(|v| *v = v.max(0.0));
        let mut ff = hidden * &weights.ff_out;
        add_row_bias(&mut ff, &weights.ff_out_bias);
        let y = layer_norm(&(x + ff), &weights.norm2_scale, &weights.norm2_offset);
        let mut p = y * weights.projection.transpose();
        add_row_bias(&mut p, &weights.projection_bias);
        p
    } else {
        &matching * target_points
    };
    let confidence = confidence_weights(&matching, metric);
    Ok(MatchResult {
        matching,
        projected,
        confidence,
    })
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

fn add_row_bias(m: &mut DMatrix<f64>, bias: &DVector<f64>) {
    for mut row in m.row_iter_mut() {
        row += bias.transpose();
    }
}

fn layer_norm(x: &DMatrix<f64>, scale: &DVector<f64>, offset: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    let f = x.ncols() as f64;
    for mut row in out.row_iter_mut() {
        let mean = row.sum() / f;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * scale[j] + offset[j];
        }
    }
    out
}
