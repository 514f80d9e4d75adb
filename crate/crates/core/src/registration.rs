//! Weighted rigid registration (Kabsch-Umeyama without scale).

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geom::RigidTransform;

/// Relative singular-value threshold below which the cross-covariance is
/// treated as rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Paired points with non-negative weights; row `i` of `source` corresponds
/// to row `i` of `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondences {
    pub source: DMatrix<f64>,
    pub target: DMatrix<f64>,
    pub weights: Vec<f64>,
}

impl Correspondences {
    pub fn new(source: DMatrix<f64>, target: DMatrix<f64>, weights: Vec<f64>) -> Result<Self> {
        let c = Self {
            source,
            target,
            weights,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn uniform(source: DMatrix<f64>, target: DMatrix<f64>) -> Result<Self> {
        let n = source.nrows();
        Self::new(source, target, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.source.nrows();
        if self.source.ncols() != 3 || self.target.shape() != (n, 3) || self.weights.len() != n {
            return Err(Error::InvalidCorrespondences(format!(
                "source {}x{}, target {}x{}, {} weights",
                self.source.nrows(),
                self.source.ncols(),
                self.target.nrows(),
                self.target.ncols(),
                self.weights.len()
            )));
        }
        if !self.source.iter().chain(self.target.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidCorrespondences("non-finite coordinates".into()));
        }
        if let Some(w) = self.weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidCorrespondences(format!("invalid weight {w}")));
        }
        if self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidCorrespondences("weights sum to zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    /// Maps source points onto target points.
    pub transform: RigidTransform,
    /// Set when the cross-covariance has rank < 2 and the rotation is not
    /// unique.
    pub degenerate: bool,
}

/// Closed-form minimizer of `Σ w_i ‖R s_i + t - t_i‖²` over proper
/// rotations.
pub fn register(c: &Correspondences) -> Result<Registration> {
    c.validate()?;
    let total: f64 = c.weights.iter().sum();
    let mut mu_s = Vector3::zeros();
    let mut mu_t = Vector3::zeros();
    for (i, &w) in c.weights.iter().enumerate() {
        let w = w / total;
        mu_s += w * row3(&c.source, i);
        mu_t += w * row3(&c.target, i);
    }
    let mut cov = Matrix3::zeros();
    for (i, &w) in c.weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let ds = row3(&c.source, i) - mu_s;
        let dt = row3(&c.target, i) - mu_t;
        cov += (w / total) * ds * dt.transpose();
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested U");
    let v = svd.v_t.expect("requested V^T").transpose();
    let mut sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    let positive = c.weights.iter().filter(|&&w| w > 0.0).count();
    let degenerate = positive < 3 || sigma[0] <= 0.0 || sigma[1] <= RANK_TOLERANCE * sigma[0];

    let rotation = if sigma[0] <= 0.0 {
        Matrix3::identity()
    } else {
        let d = (v * u.transpose()).determinant().signum();
        v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose()
    };
    let translation = mu_t - rotation * mu_s;
    Ok(Registration {
        transform: RigidTransform::from_parts_unchecked(rotation, translation),
        degenerate,
    })
}

/// `Σ w_i ‖T s_i - t_i‖² / Σ w_i`.
pub fn weighted_residual(c: &Correspondences, t: &RigidTransform) -> f64 {
    let total: f64 = c.weights.iter().sum();
    let mut acc = 0.0;
    for (i, &w) in c.weights.iter().enumerate() {
        let r = t.rotation() * row3(&c.source, i) + t.translation() - row3(&c.target, i);
        acc += w * r.norm_squared();
    }
    acc / total
}

fn row3(m: &DMatrix<f64>, i: usize) -> Vector3<f64> {
    Vector3::new(m[(i, 0)], m[(i, 1)], m[(i, 2)])
}
