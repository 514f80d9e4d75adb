//! Per-keypoint feature providers.
//!
//! The geometric baseline describes each keypoint by a small hand-crafted
//! vector (height, reflectance, local covariance shape) and lifts it to the
//! configured width with a fixed seeded orthogonal map. The linear provider
//! additionally applies an affine map read from a tensor file.

use std::collections::HashMap;
use std::ops::Range;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{KeypointSet, PointCloud};
use crate::tensor_file::TensorFile;

/// Index of each component in the base descriptor.
pub mod base {
    pub const HEIGHT: usize = 0;
    pub const REFLECTANCE: usize = 1;
    pub const NEIGHBORS: usize = 2;
    pub const EIGENVALUES: std::ops::Range<usize> = 3..6;
    pub const LINEARITY: usize = 6;
    pub const PLANARITY: usize = 7;
    pub const SPHERICITY: usize = 8;
    pub const MEAN_OFFSET: usize = 9;
    pub const XYZ: std::ops::Range<usize> = 10..13;
}

/// Eigenvalues and the ratios derived from them.
pub const EIGEN_BLOCK: Range<usize> = 3..9;

const BASE_DIM: usize = 10;

pub const WEIGHT_TENSOR: &str = "features.linear.weight";
pub const BIAS_TENSOR: &str = "features.linear.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    #[default]
    GeometricBaseline,
    LoadedLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureProviderConfig {
    pub kind: ProviderKind,
    /// Neighborhood radius in meters.
    pub radius: f64,
    pub dim: usize,
    pub normalize: bool,
    pub weight_path: Option<PathBuf>,
    /// Seed of the orthogonal lift.
    pub seed: u64,
    /// Append raw keypoint coordinates to the base descriptor.
    pub include_xyz: bool,
}

impl Default for FeatureProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::GeometricBaseline,
            radius: 1.0,
            dim: 640,
            normalize: true,
            weight_path: None,
            seed: 0,
            include_xyz: false,
        }
    }
}

impl FeatureProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 8 {
            return Err(Error::Config(format!("feature dimension {} < 8", self.dim)));
        }
        self.validate_geometry()?;
        if self.kind == ProviderKind::LoadedLinear && self.weight_path.is_none() {
            return Err(Error::Config("loaded-linear provider needs a weight file".into()));
        }
        Ok(())
    }

    fn validate_geometry(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config(format!(
                "neighborhood radius {} must be > 0",
                self.radius
            )));
        }
        Ok(())
    }

    fn base_dim(&self) -> usize {
        if self.include_xyz {
            BASE_DIM + 3
        } else {
            BASE_DIM
        }
    }
}

/// `n x f` keypoint features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: DMatrix<f64>,
    /// Keypoints without neighbors within the radius.
    pub isolated: Vec<bool>,
    /// Rows that normalization could not bring to unit length.
    pub unnormalized: Vec<bool>,
}

impl FeatureMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteFeatures);
        }
        let n = values.nrows();
        Ok(Self {
            values,
            isolated: vec![false; n],
            unnormalized: vec![false; n],
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Rows are scaled to unit L2 norm; rows with norm below `1e-12` stay
    /// as they are and are flagged.
    pub fn normalize_rows(&mut self) {
        for (i, mut row) in self.values.row_iter_mut().enumerate() {
            let n = row.norm();
            if n < 1e-12 {
                self.unnormalized[i] = true;
            } else {
                row /= n;
            }
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            values: self.values.select_rows(rows),
            isolated: rows.iter().map(|&r| self.isolated[r]).collect(),
            unnormalized: rows.iter().map(|&r| self.unnormalized[r]).collect(),
        }
    }
}

pub trait FeatureProvider: Send + Sync {
    fn compute(&self, cloud: &PointCloud, keys: &KeypointSet) -> Result<FeatureMatrix>;
    fn dim(&self) -> usize;
}

/// Uniform hash grid for fixed-radius neighbor queries.
struct NeighborGrid<'a> {
    cloud: &'a PointCloud,
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> NeighborGrid<'a> {
    fn new(cloud: &'a PointCloud, cell: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in cloud.points().iter().enumerate() {
            cells.entry(Self::key(p.coords.as_slice(), cell)).or_default().push(i);
        }
        Self { cloud, cell, cells }
    }

    fn key(p: &[f64], cell: f64) -> [i64; 3] {
        [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ]
    }

    /// Points within `radius` of point `center`, excluding the point itself.
    fn neighbors(&self, center: usize, radius: f64) -> Vec<usize> {
        let c = self.cloud.points()[center];
        let k = Self::key(c.coords.as_slice(), self.cell);
        let r2 = radius * radius;
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        out.extend(
                            ids.iter()
                                .copied()
                                .filter(|&j| j != center && (self.cloud.points()[j] - c).norm_squared() <= r2),
                        );
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Hand-crafted base descriptors, one row per keypoint, plus the isolation
/// mask.
pub fn base_descriptors(
    cloud: &PointCloud,
    keys: &KeypointSet,
    cfg: &FeatureProviderConfig,
) -> Result<(DMatrix<f64>, Vec<bool>)> {
    cfg.validate_geometry()?;
    if let Some(&bad) = keys.indices.iter().find(|&&i| i >= cloud.len()) {
        return Err(Error::InvalidArgument(format!("keypoint index {bad} out of range")));
    }
    let grid = NeighborGrid::new(cloud, cfg.radius);
    let min_z = cloud.points().iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
    let dim = cfg.base_dim();
    let rows: Vec<(Vec<f64>, bool)> = keys
        .indices
        .par_iter()
        .map(|&k| {
            let p = cloud.points()[k];
            let nb = grid.neighbors(k, cfg.radius);
            let mut row = vec![0.0; dim];
            row[base::HEIGHT] = p.z - min_z;
            row[base::REFLECTANCE] = cloud.reflectance().map_or(0.0, |r| r[k]);
            row[base::NEIGHBORS] = nb.len() as f64;
            if cfg.include_xyz {
                row[base::XYZ].copy_from_slice(p.coords.as_slice());
            }
            if nb.is_empty() {
                return (row, true);
            }
            // covariance of the patch: keypoint plus its neighbors
            let patch: Vec<_> = std::iter::once(k)
                .chain(nb.iter().copied())
                .map(|j| cloud.points()[j].coords)
                .collect();
            let mean = patch.iter().sum::<nalgebra::Vector3<f64>>() / patch.len() as f64;
            let cov = patch.iter().fold(Matrix3::zeros(), |acc, q| {
                let d = q - mean;
                acc + d * d.transpose()
            }) / patch.len() as f64;
            let mut ev: Vec<f64> = SymmetricEigen::new(cov)
                .eigenvalues
                .iter()
                .map(|&e| e.max(0.0))
                .collect();
            ev.sort_by(|a, b| b.total_cmp(a));
            row[base::EIGENVALUES].copy_from_slice(&ev);
            if ev[0] > 0.0 {
                row[base::LINEARITY] = (ev[0] - ev[1]) / ev[0];
                row[base::PLANARITY] = (ev[1] - ev[2]) / ev[0];
                row[base::SPHERICITY] = ev[2] / ev[0];
            }
            let nb_mean = nb
                .iter()
                .map(|&j| cloud.points()[j].coords)
                .sum::<nalgebra::Vector3<f64>>()
                / nb.len() as f64;
            row[base::MEAN_OFFSET] = (nb_mean - p.coords).norm();
            (row, false)
        })
        .collect();
    let isolated = rows.iter().map(|(_, iso)| *iso).collect();
    let values = DMatrix::from_fn(rows.len(), dim, |r, c| rows[r].0[c]);
    Ok((values, isolated))
}

/// `out x inp` matrix whose columns (or rows, when `out < inp`) are
/// orthonormal, drawn from a seeded Gaussian.
pub fn orthogonal_lift(out: usize, inp: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tall, short) = (out.max(inp), out.min(inp));
    let g = DMatrix::from_fn(tall, short, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    if out >= inp {
        q
    } else {
        q.transpose()
    }
}

#[derive(Debug, Clone)]
pub struct GeometricProvider {
    cfg: FeatureProviderConfig,
    lift: DMatrix<f64>,
}

impl GeometricProvider {
    pub fn new(cfg: FeatureProviderConfig) -> Result<Self> {
        if cfg.dim < 8 {
            return Err(Error::Config(format!("feature dimension {} < 8", cfg.dim)));
        }
        cfg.validate_geometry()?;
        let lift = orthogonal_lift(cfg.dim, cfg.base_dim(), cfg.seed);
        Ok(Self { cfg, lift })
    }

    pub fn config(&self) -> &FeatureProviderConfig {
        &self.cfg
    }

    pub fn lift(&self) -> &DMatrix<f64> {
        &self.lift
    }
}

impl FeatureProvider for GeometricProvider {
    fn compute(&self, cloud: &PointCloud, keys: &KeypointSet) -> Result<FeatureMatrix> {
        let (base, isolated) = base_descriptors(cloud, keys, &self.cfg)?;
        let mut fm = FeatureMatrix::new(base * self.lift.transpose())?;
        fm.isolated = isolated;
        if self.cfg.normalize {
            fm.normalize_rows();
        }
        Ok(fm)
    }

    fn dim(&self) -> usize {
        self.cfg.dim
    }
}

/// Geometric features followed by a loaded affine map.
#[derive(Debug, Clone)]
pub struct LinearProvider {
    geometric: GeometricProvider,
    weight: DMatrix<f64>,
    bias: DVector<f64>,
    normalize: bool,
}

impl LinearProvider {
    /// `weight` is `f x f_in`; the geometric stage produces `f_in` columns.
    pub fn new(cfg: FeatureProviderConfig, weight: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weight.nrows() != cfg.dim || bias.len() != cfg.dim {
            return Err(Error::WeightShapeMismatch(format!(
                "affine map is {}x{} with bias {}, configured width {}",
                weight.nrows(),
                weight.ncols(),
                bias.len(),
                cfg.dim
            )));
        }
        if !weight.iter().chain(bias.iter()).all(|v| v.is_finite()) {
            return Err(Error::WeightShapeMismatch("non-finite weights".into()));
        }
        let normalize = cfg.normalize;
        let geometric = GeometricProvider::new(FeatureProviderConfig {
            dim: weight.ncols(),
            ..cfg
        })
        .map_err(|e| Error::WeightShapeMismatch(e.to_string()))?;
        Ok(Self {
            geometric,
            weight,
            bias,
            normalize,
        })
    }

    pub fn from_tensors(cfg: FeatureProviderConfig, tensors: &TensorFile) -> Result<Self> {
        let w = tensors.require(WEIGHT_TENSOR)?;
        if w.dims.len() != 2 {
            return Err(Error::WeightShapeMismatch(format!(
                "{WEIGHT_TENSOR} has dims {:?}",
                w.dims
            )));
        }
        let weight = w.to_matrix(w.dims[0], w.dims[1])?;
        let bias = tensors.require(BIAS_TENSOR)?.to_vector(weight.nrows())?;
        Self::new(cfg, weight, bias)
    }
}

impl FeatureProvider for LinearProvider {
    fn compute(&self, cloud: &PointCloud, keys: &KeypointSet) -> Result<FeatureMatrix> {
        let g = self.geometric.compute(cloud, keys)?;
        let mut values = g.values() * self.weight.transpose();
        for mut row in values.row_iter_mut() {
            row += self.bias.transpose();
        }
        let mut fm = FeatureMatrix::new(values)?;
        fm.isolated = g.isolated;
        if self.normalize {
            fm.normalize_rows();
        }
        Ok(fm)
    }

    fn dim(&self) -> usize {
        self.weight.nrows()
    }
}

pub fn load_linear_provider(path: &Path, cfg: FeatureProviderConfig) -> Result<LinearProvider> {
    LinearProvider::from_tensors(cfg, &TensorFile::read(path)?)
}

/// Builds the provider selected by `cfg`.
pub fn provider_from_config(cfg: &FeatureProviderConfig) -> Result<Box<dyn FeatureProvider>> {
    cfg.validate()?;
    Ok(match cfg.kind {
        ProviderKind::GeometricBaseline => Box::new(GeometricProvider::new(cfg.clone())?),
        ProviderKind::LoadedLinear => {
            let path = cfg.weight_path.as_deref().expect("validated");
            Box::new(load_linear_provider(path, cfg.clone())?)
        }
    })
}
