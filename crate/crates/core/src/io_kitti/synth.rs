//! Labeled synthetic scenes and trajectories with exact ground truth.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::labels::{write_labels, PanopticLabels, SuperClassTable};
use super::scan::{write_poses, write_scan};
use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud, RigidTransform};

/// Semantic ids assigned to synthetic objects, cycled in order.
const OBJECT_CLASSES: [u16; 8] = [10, 18, 30, 11, 13, 20, 31, 15];
/// `road`, used for optional ground points.
const GROUND_CLASS: u16 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub objects: usize,
    pub points_per_object: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Unlabeled-instance ground points added after the objects.
    #[serde(default)]
    pub ground_points: usize,
}

impl SynthSpec {
    pub fn new(objects: usize, points_per_object: usize, noise_sigma: f64, seed: u64) -> Self {
        Self {
            objects,
            points_per_object,
            noise_sigma,
            seed,
            ground_points: 0,
        }
    }
}

/// `target[i]` is `transform` applied to `source[i]` (plus noise); both
/// clouds share labels and point order.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub source: PointCloud,
    pub target: PointCloud,
    pub transform: RigidTransform,
}

/// Random rigid motion in the range used for training augmentation:
/// ±180° yaw, ±3° roll/pitch, ±1.5 m in x/y and ±0.25 m in z.
pub fn random_augmentation<R: Rng + ?Sized>(rng: &mut R) -> RigidTransform {
    let small = 3f64.to_radians();
    RigidTransform::from_euler(
        rng.random_range(-small..=small),
        rng.random_range(-small..=small),
        rng.random_range(-PI..=PI),
        Vector3::new(
            rng.random_range(-1.5..=1.5),
            rng.random_range(-1.5..=1.5),
            rng.random_range(-0.25..=0.25),
        ),
    )
}

fn sample_box_surface<R: Rng + ?Sized>(rng: &mut R, half: Vector3<f64>) -> Vector3<f64> {
    let areas = [half.y * half.z, half.x * half.z, half.x * half.y];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut axis = 2;
    for (a, area) in areas.iter().enumerate() {
        if pick < *area {
            axis = a;
            break;
        }
        pick -= area;
    }
    let mut p = Vector3::from_fn(|k, _| rng.random_range(-half[k]..=half[k]));
    p[axis] = if rng.random_bool(0.5) { half[axis] } else { -half[axis] };
    p
}

fn sample_sphere_surface<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-9 {
            return v * (radius / n);
        }
    }
}

/// Boxes and spheres sampled on their surfaces, one instance id per
/// object, plus a random ground-truth motion.
pub fn synth_scene(spec: &SynthSpec) -> Result<SynthScene> {
    if spec.objects == 0 || spec.points_per_object == 0 {
        return Err(Error::InvalidArgument(
            "object and point counts must be at least 1".into(),
        ));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument("noise sigma must be finite and >= 0".into()));
    }
    if spec.objects > u16::MAX as usize {
        return Err(Error::InvalidArgument(
            "too many objects for 16-bit instance ids".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let grid = (spec.objects as f64).sqrt().ceil() as usize;
    let spacing = 6.0;

    let mut points = Vec::new();
    let mut semantic = Vec::new();
    let mut instance = Vec::new();
    for obj in 0..spec.objects {
        let center = Vector3::new(
            (obj % grid) as f64 * spacing - 0.5 * spacing * (grid - 1) as f64 + rng.random_range(-1.0..1.0),
            (obj / grid) as f64 * spacing - 0.5 * spacing * (grid - 1) as f64 + rng.random_range(-1.0..1.0),
            rng.random_range(0.5..1.5),
        );
        let is_box = obj % 2 == 0;
        let half = Vector3::from_fn(|_, _| rng.random_range(0.5..1.5));
        let radius = rng.random_range(0.5..1.5);
        for _ in 0..spec.points_per_object {
            let local = if is_box {
                sample_box_surface(&mut rng, half)
            } else {
                sample_sphere_surface(&mut rng, radius)
            };
            points.push(Point3::from(center + local));
            semantic.push(OBJECT_CLASSES[obj % OBJECT_CLASSES.len()]);
            instance.push((obj + 1) as u16);
        }
    }
    let extent = 0.5 * spacing * grid as f64 + 2.0;
    for _ in 0..spec.ground_points {
        points.push(Point3::new(
            rng.random_range(-extent..extent),
            rng.random_range(-extent..extent),
            0.0,
        ));
        semantic.push(GROUND_CLASS);
        instance.push(0);
    }
    let reflectance: Vec<f64> = (0..points.len()).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels = PanopticLabels::from_parts(semantic, instance, &SuperClassTable::default())?;
    let source = PointCloud::new(points)?
        .with_reflectance(reflectance)?
        .with_labels(labels)?;

    let transform = random_augmentation(&mut rng);
    let mut target = source.transformed(&transform);
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
        let noisy: Vec<Point3> = target
            .points()
            .iter()
            .map(|p| p + Vector3::from_fn(|_, _| noise.sample(&mut rng)))
            .collect();
        target = PointCloud::new(noisy)?
            .with_reflectance(source.reflectance().unwrap_or_default().to_vec())?
            .with_labels(source.labels().cloned().unwrap_or_default())?;
    }
    Ok(SynthScene {
        source,
        target,
        transform,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    /// Scans per lap of the figure-eight.
    pub scans_per_lap: usize,
    pub laps: usize,
    /// Half-width of the figure-eight in meters.
    pub scale: f64,
    /// Lateral offset of every lap after the first, in meters.
    pub lap_offset: f64,
    pub landmarks: usize,
    pub seed: u64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            scans_per_lap: 160,
            laps: 2,
            scale: 40.0,
            lap_offset: 0.5,
            landmarks: 256,
            seed: 0,
        }
    }
}

/// A static world observed along a figure-eight trajectory. Every scan holds
/// all landmarks in the same order, expressed in the sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSequence {
    pub poses: Vec<RigidTransform>,
    pub scans: Vec<PointCloud>,
}

/// Lemniscate of Gerono, `x = a sin t`, `y = a sin t cos t`, traversed
/// `laps` times with the sensor heading along the tangent. The path
/// crosses itself at the origin, and later laps revisit earlier ones.
pub fn synth_sequence(spec: &TrajectorySpec) -> Result<SynthSequence> {
    if spec.scans_per_lap < 2 || spec.laps == 0 || spec.landmarks == 0 || spec.scale.is_nan() || spec.scale <= 0.0 {
        return Err(Error::InvalidArgument("degenerate trajectory spec".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let a = spec.scale;
    let world: Vec<Point3> = (0..spec.landmarks)
        .map(|_| {
            Point3::new(
                rng.random_range(-1.3 * a..1.3 * a),
                rng.random_range(-0.8 * a..0.8 * a),
                rng.random_range(0.0..4.0),
            )
        })
        .collect();
    let reflectance: Vec<f64> = (0..spec.landmarks).map(|_| rng.random_range(0.0..1.0)).collect();
    let world = PointCloud::new(world)?.with_reflectance(reflectance)?;

    let mut poses = Vec::new();
    for lap in 0..spec.laps {
        for s in 0..spec.scans_per_lap {
            let t = 2.0 * PI * s as f64 / spec.scans_per_lap as f64;
            let (x, y) = (a * t.sin(), a * t.sin() * t.cos());
            let (dx, dy) = (a * t.cos(), a * (2.0 * t).cos());
            let heading = dy.atan2(dx);
            let offset = if lap == 0 { 0.0 } else { spec.lap_offset };
            let (nx, ny) = (-heading.sin(), heading.cos());
            poses.push(RigidTransform::from_euler(
                0.0,
                0.0,
                heading,
                Vector3::new(x + offset * nx, y + offset * ny, 0.0),
            ));
        }
    }
    let scans = poses.iter().map(|p| world.transformed(&p.inverse())).collect();
    Ok(SynthSequence { poses, scans })
}

/// Writes `velodyne/NNNNNN.bin`, optional `labels/NNNNNN.label` and
/// `poses.txt` under `dir`.
pub fn write_sequence(dir: &Path, scans: &[PointCloud], poses: Option<&[RigidTransform]>) -> Result<()> {
    let velodyne = dir.join("velodyne");
    std::fs::create_dir_all(&velodyne).map_err(|e| Error::io(&velodyne, e))?;
    let with_labels = !scans.is_empty() && scans.iter().all(|s| s.labels().is_some());
    if with_labels {
        let labels = dir.join("labels");
        std::fs::create_dir_all(&labels).map_err(|e| Error::io(&labels, e))?;
    }
    for (i, scan) in scans.iter().enumerate() {
        write_scan(&velodyne.join(format!("{i:06}.bin")), scan)?;
        if with_labels {
            let l = scan.labels().expect("checked above");
            write_labels(&dir.join("labels").join(format!("{i:06}.label")), l)?;
        }
    }
    if let Some(poses) = poses {
        write_poses(&dir.join("poses.txt"), poses)?;
    }
    Ok(())
}
