//! Loop-closure detection and point-cloud registration for LiDAR scans.
//!
//! A scan pair flows through a feature provider, a cross-attention matching
//! head and a weighted SVD solver; a NetVLAD descriptor with context gating
//! drives loop retrieval over a sequence.

pub mod config;
pub mod descriptor;
pub mod error;
pub mod features;
pub mod geom;
pub mod io_kitti;
pub mod loopdb_eval;
pub mod losses;
pub mod matching;
pub mod pipeline;
pub mod registration;
pub mod tensor_file;

pub use config::RunConfig;
pub use descriptor::{context_gate, netvlad, Descriptor, VladWeights};
pub use error::{Error, Result};
pub use geom::{farthest_point_sampling, KeypointSet, Point3, PointCloud, RigidTransform};
pub use loopdb_eval::{evaluate_sequence, registration_errors, DescriptorDb, LoopCandidate, LoopEvalReport};
pub use losses::{LossBreakdown, LossWeights, ObjectAdjacency, OneHotMatrix};
pub use matching::{match_points, DiversityMetric, EncoderWeights, MatchResult, MatchingMode};
pub use pipeline::Pipeline;
pub use registration::{register, Correspondences, Registration};
