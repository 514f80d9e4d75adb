//! Geometric primitives: point clouds, rigid transforms in SE(3) and
//! farthest-point keypoint sampling.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Point3 as NaPoint3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_kitti::PanopticLabels;

pub type Point3 = NaPoint3<f64>;

/// Tolerance for the orthonormality and determinant checks of a rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Drift above which [`RigidTransform::compose`] re-projects onto SO(3).
const COMPOSE_DRIFT: f64 = 1e-12;

/// A LiDAR scan: coordinates in the sensor frame, optional reflectance and
/// optional panoptic labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point3>,
    reflectance: Option<Vec<f64>>,
    labels: Option<PanopticLabels>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidArgument(format!("point {i} has non-finite coordinates")));
        }
        Ok(Self {
            points,
            reflectance: None,
            labels: None,
        })
    }

    pub fn with_reflectance(mut self, reflectance: Vec<f64>) -> Result<Self> {
        if reflectance.len() != self.points.len() {
            return Err(Error::InvalidArgument(format!(
                "reflectance has {} entries for {} points",
                reflectance.len(),
                self.points.len()
            )));
        }
        self.reflectance = Some(reflectance);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: PanopticLabels) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::LabelLengthMismatch {
                expected: self.points.len(),
                found: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn reflectance(&self) -> Option<&[f64]> {
        self.reflectance.as_deref()
    }

    pub fn labels(&self) -> Option<&PanopticLabels> {
        self.labels.as_ref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Coordinates as an `n x 3` matrix.
    pub fn coords(&self) -> DMatrix<f64> {
        points_to_matrix(&self.points)
    }

    /// Applies `t` to every point, keeping reflectance and labels.
    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.apply_point(p)).collect(),
            reflectance: self.reflectance.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Sub-cloud at the given indices (labels and reflectance follow).
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            reflectance: self
                .reflectance
                .as_ref()
                .map(|r| indices.iter().map(|&i| r[i]).collect()),
            labels: self.labels.as_ref().map(|l| l.select(indices)),
        }
    }
}

pub fn points_to_matrix(points: &[Point3]) -> DMatrix<f64> {
    DMatrix::from_fn(points.len(), 3, |i, j| points[i][j])
}

/// Proper rigid motion `x -> R x + t`.
///
/// Serializes as `{"rotation": [[row], [row], [row]], "translation": [x, y, z]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "TransformRepr", try_from = "TransformRepr")]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<RigidTransform> for TransformRepr {
    fn from(t: RigidTransform) -> Self {
        let r = &t.rotation;
        Self {
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl TryFrom<TransformRepr> for RigidTransform {
    type Error = Error;

    fn try_from(r: TransformRepr) -> Result<Self> {
        let rot = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        RigidTransform::new(rot, Vector3::from(r.translation))
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite entries".into()));
        }
        let err = orthonormality_error(&rotation);
        if err > ROTATION_TOLERANCE {
            return Err(Error::InvalidTransform(format!(
                "rotation is not orthonormal (error {err:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidTransform(format!("det(R) = {det}")));
        }
        Ok(Self { rotation, translation })
    }

    /// Builds a transform from a rotation that is known to be proper.
    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::from_parts_unchecked(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::from_parts_unchecked(Matrix3::identity(), translation)
    }

    pub fn rot_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::from_parts_unchecked(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c), Vector3::zeros())
    }

    pub fn rot_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::from_parts_unchecked(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c), Vector3::zeros())
    }

    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::from_parts_unchecked(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0), Vector3::zeros())
    }

    /// `Rz(yaw) * Ry(pitch) * Rx(roll)` followed by `translation`.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64, translation: Vector3<f64>) -> Self {
        let r = Self::rot_z(yaw).rotation * Self::rot_y(pitch).rotation * Self::rot_x(roll).rotation;
        Self::from_parts_unchecked(project_to_rotation(&r), translation)
    }

    /// Uniformly distributed rotation and a translation with each component
    /// drawn from `[-max_translation, max_translation]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, max_translation: f64) -> Self {
        let q = nalgebra::Quaternion::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let rotation = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
        let translation = Vector3::from_fn(|_, _| {
            if max_translation > 0.0 {
                rng.random_range(-max_translation..=max_translation)
            } else {
                0.0
            }
        });
        Self::from_parts_unchecked(project_to_rotation(&rotation), translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut rotation = self.rotation * other.rotation;
        if orthonormality_error(&rotation) > COMPOSE_DRIFT {
            rotation = project_to_rotation(&rotation);
        }
        let translation = self.rotation * other.translation + self.translation;
        Self::from_parts_unchecked(rotation, translation)
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        Self::from_parts_unchecked(rt, -(rt * self.translation))
    }

    pub fn apply_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Applies the transform to each row of an `n x 3` matrix.
    pub fn apply(&self, pts: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(pts.ncols(), 3, "point matrix must be n x 3");
        let r = &self.rotation;
        let t = &self.translation;
        DMatrix::from_fn(pts.nrows(), 3, |i, k| {
            r[(k, 0)] * pts[(i, 0)] + r[(k, 1)] * pts[(i, 1)] + r[(k, 2)] * pts[(i, 2)] + t[k]
        })
    }

    /// Row-major `3 x 4` matrix `[R | t]`.
    pub fn to_matrix3x4(&self) -> Matrix3x4<f64> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Geodesic rotation angle in radians.
    pub fn rotation_angle(&self) -> f64 {
        (((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0)).acos()
    }
}

/// Largest absolute entry of `RᵀR - I`.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

/// Nearest proper rotation in the Frobenius sense.
pub fn project_to_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let d = (u * v_t).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t
}

/// Keypoints selected from a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub indices: Vec<usize>,
    pub coords: DMatrix<f64>,
}

impl KeypointSet {
    pub fn from_indices(cloud: &PointCloud, indices: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; cloud.len()];
        for &i in &indices {
            if i >= cloud.len() {
                return Err(Error::InvalidArgument(format!("keypoint index {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!("duplicate keypoint index {i}")));
            }
        }
        let coords = DMatrix::from_fn(indices.len(), 3, |r, c| cloud.points()[indices[r]][c]);
        Ok(Self { indices, coords })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Greedy max-min keypoint selection. The first keypoint is `seed mod |cloud|`;
/// each following one maximizes its squared distance to the already selected
/// set, ties going to the smaller index.
pub fn farthest_point_sampling(cloud: &PointCloud, n: usize, seed: u64) -> Result<KeypointSet> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput);
    }
    if n == 0 {
        return Err(Error::InvalidArgument("keypoint count must be at least 1".into()));
    }
    let pts = cloud.points();
    let count = n.min(pts.len());
    let mut indices = Vec::with_capacity(count);
    let mut min_dist = vec![f64::INFINITY; pts.len()];

    let mut current = (seed % pts.len() as u64) as usize;
    loop {
        indices.push(current);
        // selected points can never win again, even against exact duplicates
        min_dist[current] = f64::NEG_INFINITY;
        if indices.len() == count {
            break;
        }
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_dist = f64::NEG_INFINITY;
        for (i, (p, d)) in pts.iter().zip(min_dist.iter_mut()).enumerate() {
            let sq = (p - c).norm_squared();
            if sq < *d {
                *d = sq;
            }
            if *d > best_dist {
                best_dist = *d;
                best = i;
            }
        }
        current = best;
    }
    KeypointSet::from_indices(cloud, indices)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_is_row_major_and_validated() {
        let t = RigidTransform::from_euler(0.1, 0.2, 0.3, Vector3::new(1.0, 2.0, 3.0));
        let v = serde_json::to_value(t).unwrap();
        assert_eq!(v["rotation"][0][1].as_f64().unwrap(), t.rotation()[(0, 1)]);
        let back: RigidTransform = serde_json::from_value(v).unwrap();
        assert_eq!(back, t);
        let bad = r#"{"rotation": [[2,0,0],[0,1,0],[0,0,1]], "translation": [0,0,0]}"#;
        assert!(serde_json::from_str::<RigidTransform>(bad).is_err());
    }
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(points.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect()).unwrap()
    }

    #[test]
    fn compose_identity() {
        let i = RigidTransform::identity();
        assert_eq!(i.compose(&i), i);
    }

    #[test]
    fn compose_with_inverse_cancels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let t = RigidTransform::random(&mut rng, 10.0);
            let c = t.compose(&t.inverse());
            assert!((c.rotation() - Matrix3::identity()).amax() < 1e-9);
            assert!(c.translation().amax() < 1e-9);
        }
    }

    #[test]
    fn compose_z_rotations() {
        let c = RigidTransform::rot_z(PI / 6.0).compose(&RigidTransform::rot_z(PI / 3.0));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((c.rotation() - expected).amax() < 1e-12);
    }

    #[test]
    fn inverse_of_translation() {
        let t = RigidTransform::from_translation(Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(*t.inverse().translation(), Vector3::new(-1.0, -2.0, -3.0));
        assert_eq!(RigidTransform::identity().inverse(), RigidTransform::identity());
    }

    #[test]
    fn inverse_rotation_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let t = RigidTransform::random(&mut rng, 5.0);
            assert!((t.inverse().rotation() - t.rotation().transpose()).amax() <= 1e-12);
        }
    }

    #[test]
    fn apply_cases() {
        let p = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, -2.0, 0.5, 3.0]);
        assert_eq!(RigidTransform::identity().apply(&p), p);
        let d = Vector3::new(0.5, -1.0, 2.0);
        let moved = RigidTransform::from_translation(d).apply(&p);
        for i in 0..2 {
            for k in 0..3 {
                assert_eq!(moved[(i, k)], p[(i, k)] + d[k]);
            }
        }
        let r = RigidTransform::rot_z(PI / 2.0).apply(&DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]));
        assert!((r[(0, 0)]).abs() < 1e-15 && (r[(0, 1)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn apply_preserves_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = DMatrix::from_fn(20, 3, |_, _| rng.random_range(-50.0..50.0));
        let t = RigidTransform::random(&mut rng, 20.0);
        let q = t.apply(&p);
        for i in 0..20 {
            for j in 0..20 {
                let a = (p.row(i) - p.row(j)).norm();
                let b = (q.row(i) - q.row(j)).norm();
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn new_rejects_improper_rotation() {
        let mirror = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(mirror, Vector3::zeros()).is_err());
        let skew = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RigidTransform::new(skew, Vector3::zeros()).is_err());
    }

    #[test]
    fn fps_single_point() {
        let c = cloud(&[[1.0, 2.0, 3.0]]);
        let k = farthest_point_sampling(&c, 4, 9).unwrap();
        assert_eq!(k.indices, vec![0]);
    }

    #[test]
    fn fps_square_corners() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]);
        for seed in 0..4 {
            let mut k = farthest_point_sampling(&c, 4, seed).unwrap().indices;
            k.sort();
            assert_eq!(k, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn fps_empty_cloud() {
        let c = PointCloud::default();
        assert!(matches!(farthest_point_sampling(&c, 3, 0), Err(Error::EmptyInput)));
    }

    #[test]
    fn fps_duplicates_stay_unique() {
        let c = cloud(&[[0.0; 3], [0.0; 3], [0.0; 3]]);
        let mut k = farthest_point_sampling(&c, 3, 1).unwrap().indices;
        k.sort();
        assert_eq!(k, vec![0, 1, 2]);
    }

    fn min_pairwise(points: &[Point3], idx: &[usize]) -> f64 {
        let mut best = f64::INFINITY;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                best = best.min((points[i] - points[j]).norm());
            }
        }
        best
    }

    #[test]
    fn fps_spreads_better_than_random_subsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut ratios = Vec::new();
        for trial in 0..20 {
            let pts: Vec<Point3> = (0..1000)
                .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
                .collect();
            let c = PointCloud::new(pts.clone()).unwrap();
            let fps = farthest_point_sampling(&c, 100, trial).unwrap();
            let random = rand::seq::index::sample(&mut rng, 1000, 100).into_vec();
            ratios.push(min_pairwise(&pts, &fps.indices) - min_pairwise(&pts, &random));
        }
        ratios.sort_by(f64::total_cmp);
        let median = 0.5 * (ratios[9] + ratios[10]);
        assert!(median >= 0.0, "median gap {median}");
    }

    #[test]
    fn fps_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Point3> = (0..300)
            .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let c = PointCloud::new(pts).unwrap();
        assert_eq!(
            farthest_point_sampling(&c, 40, 77).unwrap(),
            farthest_point_sampling(&c, 40, 77).unwrap()
        );
    }

    #[test]
    fn keypoint_coords_follow_indices() {
        let c = cloud(&[[0.0, 0.0, 0.0], [5.0, 1.0, 2.0], [3.0, 3.0, 3.0]]);
        let k = farthest_point_sampling(&c, 2, 0).unwrap();
        for (row, &i) in k.indices.iter().enumerate() {
            for d in 0..3 {
                assert_eq!(k.coords[(row, d)], c.points()[i][d]);
            }
        }
    }
}
