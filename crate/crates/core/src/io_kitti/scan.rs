//! KITTI velodyne `.bin` scans and plain-text pose files.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geom::{orthonormality_error, project_to_rotation, Point3, PointCloud, RigidTransform, ROTATION_TOLERANCE};

const RECORD_BYTES: usize = 16;

/// Rotation blocks further than this from SO(3) are rejected instead of
/// being repaired.
const MAX_POSE_DRIFT: f64 = 1e-3;

/// A decoded scan plus the number of records dropped for non-finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedScan {
    pub cloud: PointCloud,
    pub dropped: usize,
}

/// Decodes little-endian `f32` quadruples `(x, y, z, reflectance)`.
pub fn decode_scan(bytes: &[u8]) -> Result<DecodedScan> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::MalformedScan(format!(
            "length {} is not a multiple of {RECORD_BYTES}",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut points = Vec::with_capacity(n);
    let mut reflectance = Vec::with_capacity(n);
    let mut dropped = 0;
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        let f = |k: usize| f32::from_le_bytes([rec[4 * k], rec[4 * k + 1], rec[4 * k + 2], rec[4 * k + 3]]);
        let vals = [f(0), f(1), f(2), f(3)];
        if !vals.iter().all(|v| v.is_finite()) {
            dropped += 1;
            continue;
        }
        points.push(Point3::new(vals[0].into(), vals[1].into(), vals[2].into()));
        reflectance.push(vals[3].into());
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} scan records with non-finite values");
    }
    let cloud = PointCloud::new(points)?.with_reflectance(reflectance)?;
    Ok(DecodedScan { cloud, dropped })
}

/// Encodes as `f32` records; missing reflectance is written as 0.
pub fn encode_scan(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for (i, p) in cloud.points().iter().enumerate() {
        let r = cloud.reflectance().map_or(0.0, |r| r[i]);
        for v in [p.x, p.y, p.z, r] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_scan(path: &Path) -> Result<DecodedScan> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scan(&bytes).map_err(|e| match e {
        Error::MalformedScan(reason) => Error::MalformedScan(format!("{}: {reason}", path.display())),
        other => other,
    })
}

pub fn write_scan(path: &Path, cloud: &PointCloud) -> Result<()> {
    std::fs::write(path, encode_scan(cloud)).map_err(|e| Error::io(path, e))
}

/// Parses KITTI poses: one row-major `3 x 4` matrix per non-empty line.
///
/// Rotation blocks whose orthonormality error exceeds the transform
/// tolerance are projected back onto SO(3); blocks that are far from a
/// rotation are rejected.
pub fn parse_poses(text: &str) -> Result<Vec<RigidTransform>> {
    let mut poses = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedPose { line: line_no, reason };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 12 {
            return Err(malformed(format!("expected 12 values, found {}", tokens.len())));
        }
        let mut v = [0.0f64; 12];
        for (slot, tok) in v.iter_mut().zip(&tokens) {
            *slot = tok.parse::<f64>().map_err(|e| malformed(format!("`{tok}`: {e}")))?;
            if !slot.is_finite() {
                return Err(malformed(format!("non-finite value `{tok}`")));
            }
        }
        let mut rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let translation = Vector3::new(v[3], v[7], v[11]);
        let drift = orthonormality_error(&rotation);
        if drift > MAX_POSE_DRIFT || rotation.determinant() <= 0.0 {
            return Err(malformed("rotation block is not a proper rotation".into()));
        }
        if drift > ROTATION_TOLERANCE {
            rotation = project_to_rotation(&rotation);
        }
        poses.push(RigidTransform::new(rotation, translation).map_err(|e| malformed(e.to_string()))?);
    }
    Ok(poses)
}

/// Formats poses with shortest round-trip float representation.
pub fn format_poses(poses: &[RigidTransform]) -> String {
    let mut out = String::new();
    for pose in poses {
        let m = pose.to_matrix3x4();
        let row: Vec<String> = (0..3)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .map(|(r, c)| format!("{:?}", m[(r, c)]))
            .collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

pub fn read_poses(path: &Path) -> Result<Vec<RigidTransform>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text)
}

pub fn write_poses(path: &Path, poses: &[RigidTransform]) -> Result<()> {
    std::fs::write(path, format_poses(poses)).map_err(|e| Error::io(path, e))
}
