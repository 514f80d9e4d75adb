//! KITTI odometry / SemanticKITTI file formats and synthetic scene
//! generation.
//!
//! Sequence layout:
//!
//! ```text
//! <dir>/velodyne/000000.bin   f32 x, y, z, reflectance per point
//! <dir>/labels/000000.label   u32 per point: semantic | instance << 16
//! <dir>/poses.txt             12 reals per line, row-major [R | t]
//! ```

mod labels;
mod scan;
mod synth;

use std::path::{Path, PathBuf};

pub use labels::{
    decode_labels, encode_labels, merge_moving, read_labels, read_labels_with_table, semantic_class_index,
    write_labels, PanopticLabels, SuperClass, SuperClassTable, SEMANTIC_CLASSES, SEMANTIC_CLASS_COUNT,
};
pub use scan::{
    decode_scan, encode_scan, format_poses, parse_poses, read_poses, read_scan, write_poses, write_scan, DecodedScan,
};
pub use synth::{
    random_augmentation, synth_scene, synth_sequence, write_sequence, SynthScene, SynthSequence, SynthSpec,
    TrajectorySpec,
};

use crate::error::{Error, Result};
use crate::geom::{PointCloud, RigidTransform};

/// Scan files of one sequence in temporal order.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceIndex {
    pub scans: Vec<PathBuf>,
    pub labels: Option<Vec<PathBuf>>,
    pub poses: Option<Vec<RigidTransform>>,
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == ext) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

impl SequenceIndex {
    /// Indexes `velodyne/`, and if present `labels/` and `poses.txt`.
    pub fn open(dir: &Path) -> Result<Self> {
        let poses_path = dir.join("poses.txt");
        let poses = poses_path.exists().then_some(poses_path.as_path());
        Self::open_with_poses(dir, poses)
    }

    pub fn open_with_poses(dir: &Path, poses_path: Option<&Path>) -> Result<Self> {
        let invalid = |reason: String| Error::Sequence {
            path: dir.to_path_buf(),
            reason,
        };
        let velodyne = dir.join("velodyne");
        if !velodyne.is_dir() {
            return Err(invalid("missing velodyne/ directory".into()));
        }
        let scans = sorted_files(&velodyne, "bin")?;
        let label_dir = dir.join("labels");
        let labels = if label_dir.is_dir() {
            let files = sorted_files(&label_dir, "label")?;
            if files.len() != scans.len() {
                return Err(invalid(format!(
                    "{} label files for {} scans",
                    files.len(),
                    scans.len()
                )));
            }
            for (s, l) in scans.iter().zip(&files) {
                if s.file_stem() != l.file_stem() {
                    return Err(invalid(format!(
                        "label {} does not match scan {}",
                        l.display(),
                        s.display()
                    )));
                }
            }
            Some(files)
        } else {
            None
        };
        let poses = match poses_path {
            Some(p) => {
                let poses = read_poses(p)?;
                if poses.len() != scans.len() {
                    return Err(invalid(format!("{} poses for {} scans", poses.len(), scans.len())));
                }
                Some(poses)
            }
            None => None,
        };
        Ok(Self { scans, labels, poses })
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    /// Loads scan `i` with its labels when available.
    pub fn load(&self, i: usize) -> Result<PointCloud> {
        let cloud = read_scan(&self.scans[i])?.cloud;
        match &self.labels {
            Some(files) => {
                let labels = read_labels(&files[i], cloud.len())?;
                cloud.with_labels(labels)
            }
            None => Ok(cloud),
        }
    }
}
