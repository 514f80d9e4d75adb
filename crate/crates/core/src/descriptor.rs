//! Global scan descriptor: NetVLAD aggregation, a linear reduction to
//! length `g`, then context gating `D = σ(W_G v + b_G) ⊙ v`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_file::{Tensor, TensorFile};

/// Norms below this are treated as zero.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct VladWeights {
    /// `k x f`
    pub centers: DMatrix<f64>,
    /// `f x k`
    pub assign: DMatrix<f64>,
    pub assign_bias: DVector<f64>,
    /// `g x (k·f)`
    pub reduce: DMatrix<f64>,
    pub reduce_bias: DVector<f64>,
    /// `g x g`
    pub gate: DMatrix<f64>,
    pub gate_bias: DVector<f64>,
}

impl VladWeights {
    /// Unit-Gaussian cluster centers; other matrices Gaussian with standard
    /// deviation `1/√f`; zero biases.
    pub fn init(dim: usize, clusters: usize, out: usize, seed: u64) -> Result<Self> {
        check_sizes(dim, clusters, out)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = DMatrix::from_fn(clusters, dim, |_, _| StandardNormal.sample(&mut rng));
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
        let mut gauss = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| normal.sample(&mut rng));
        Ok(Self {
            centers,
            assign: gauss(dim, clusters),
            assign_bias: DVector::zeros(clusters),
            reduce: gauss(out, clusters * dim),
            reduce_bias: DVector::zeros(out),
            gate: gauss(out, out),
            gate_bias: DVector::zeros(out),
        })
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn clusters(&self) -> usize {
        self.centers.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.gate.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (f, k, g) = (self.dim(), self.clusters(), self.out_dim());
        check_sizes(f, k, g)?;
        let shapes = [
            ("assign", self.assign.shape(), (f, k)),
            ("reduce", self.reduce.shape(), (g, k * f)),
            ("gate", self.gate.shape(), (g, g)),
            ("assign bias", (self.assign_bias.len(), 1), (k, 1)),
            ("reduce bias", (self.reduce_bias.len(), 1), (g, 1)),
            ("gate bias", (self.gate_bias.len(), 1), (g, 1)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::WeightShapeMismatch(format!(
                    "descriptor {name} is {}x{}, expected {}x{}",
                    got.0, got.1, want.0, want.1
                )));
            }
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> TensorFile {
        let mut t = TensorFile::new();
        t.insert("descriptor.centers", Tensor::from_matrix(&self.centers));
        t.insert("descriptor.assign.weight", Tensor::from_matrix(&self.assign));
        t.insert("descriptor.assign.bias", Tensor::from_vector(&self.assign_bias));
        t.insert("descriptor.reduce.weight", Tensor::from_matrix(&self.reduce));
        t.insert("descriptor.reduce.bias", Tensor::from_vector(&self.reduce_bias));
        t.insert("descriptor.gate.weight", Tensor::from_matrix(&self.gate));
        t.insert("descriptor.gate.bias", Tensor::from_vector(&self.gate_bias));
        t
    }

    pub fn from_tensors(t: &TensorFile, dim: usize, clusters: usize, out: usize) -> Result<Self> {
        check_sizes(dim, clusters, out)?;
        let w = Self {
            centers: t.require("descriptor.centers")?.to_matrix(clusters, dim)?,
            assign: t.require("descriptor.assign.weight")?.to_matrix(dim, clusters)?,
            assign_bias: t.require("descriptor.assign.bias")?.to_vector(clusters)?,
            reduce: t.require("descriptor.reduce.weight")?.to_matrix(out, clusters * dim)?,
            reduce_bias: t.require("descriptor.reduce.bias")?.to_vector(out)?,
            gate: t.require("descriptor.gate.weight")?.to_matrix(out, out)?,
            gate_bias: t.require("descriptor.gate.bias")?.to_vector(out)?,
        };
        w.validate()?;
        Ok(w)
    }
}

fn check_sizes(dim: usize, clusters: usize, out: usize) -> Result<()> {
    if dim == 0 || clusters == 0 || out == 0 {
        return Err(Error::Config(format!(
            "descriptor sizes must be positive (f={dim}, k={clusters}, g={out})"
        )));
    }
    Ok(())
}

/// Unit-norm global descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub values: Vec<f64>,
    /// The gated vector vanished and was replaced by the first basis
    /// vector.
    pub degenerate: bool,
}

impl Descriptor {
    /// Normalizes `values`, falling back to `e_0` for a (near) zero vector.
    pub fn from_unnormalized(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let degenerate = norm.is_nan() || norm < NORM_GUARD;
        if degenerate {
            values.iter_mut().for_each(|v| *v = 0.0);
            if let Some(first) = values.first_mut() {
                *first = 1.0;
            }
        } else {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Self { values, degenerate }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn distance(&self, other: &Descriptor) -> f64 {
        l2_distance(&self.values, &other.values)
    }
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Pre-gating descriptor `v` of length `g` for an `n x f` feature matrix.
pub fn netvlad(features: &DMatrix<f64>, w: &VladWeights) -> Result<DVector<f64>> {
    if features.nrows() == 0 {
        return Err(Error::NoKeypoints);
    }
    if features.ncols() != w.dim() {
        return Err(Error::DimensionMismatch(format!(
            "features have width {}, descriptor expects {}",
            features.ncols(),
            w.dim()
        )));
    }
    if !features.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteFeatures);
    }
    w.validate()?;
    let (f, k) = (w.dim(), w.clusters());

    let mut assign = features * &w.assign;
    for mut row in assign.row_iter_mut() {
        row += w.assign_bias.transpose();
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row /= s;
    }
    // V_j = Σ_i a_ij F_i - (Σ_i a_ij) c_j
    let mut vlad = assign.transpose() * features;
    for j in 0..k {
        let mass = assign.column(j).sum();
        let mut row = vlad.row_mut(j);
        row -= mass * w.centers.row(j);
        let norm = row.norm();
        if norm < NORM_GUARD {
            row.fill(0.0);
        } else {
            row /= norm;
        }
    }
    let mut flat = DVector::from_iterator(
        k * f,
        (0..k)
            .flat_map(|j| (0..f).map(move |c| (j, c)))
            .map(|(j, c)| vlad[(j, c)]),
    );
    let norm = flat.norm();
    if norm < NORM_GUARD {
        flat.fill(0.0);
    } else {
        flat /= norm;
    }
    Ok(&w.reduce * flat + &w.reduce_bias)
}

/// `σ(W_G v + b_G) ⊙ v`, L2-normalized.
pub fn context_gate(v: &DVector<f64>, w: &VladWeights) -> Result<Descriptor> {
    if v.len() != w.out_dim() {
        return Err(Error::DimensionMismatch(format!(
            "pre-gating vector has length {}, gate expects {}",
            v.len(),
            w.out_dim()
        )));
    }
    let logits = &w.gate * v + &w.gate_bias;
    let gated = logits.iter().zip(v.iter()).map(|(l, x)| sigmoid(*l) * x).collect();
    Ok(Descriptor::from_unnormalized(gated))
}

pub fn describe(features: &DMatrix<f64>, w: &VladWeights) -> Result<Descriptor> {
    context_gate(&netvlad(features, w)?, w)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
