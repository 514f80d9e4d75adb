//! End-to-end flows: pairwise registration, loss evaluation and loop
//! detection over a sequence.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::descriptor::{describe, Descriptor, VladWeights};
use crate::error::{Error, Result};
use crate::features::{provider_from_config, FeatureMatrix, FeatureProvider};
use crate::geom::{farthest_point_sampling, KeypointSet, PointCloud, RigidTransform};
use crate::loopdb_eval::{
    detect_loops, evaluate_sequence, registration_errors, write_csv, EvalParams, LoopCandidate, LoopEvalReport,
    PairError,
};
use crate::losses::{pair_losses, total_loss, triplet_loss, DirectionPass, LossBreakdown, LossSide};
use crate::matching::{match_points, EncoderWeights, MatchResult};
use crate::registration::{register, weighted_residual, Correspondences, Registration};
use crate::tensor_file::TensorFile;

/// Loaded or seeded model state for one configuration.
pub struct Pipeline {
    cfg: RunConfig,
    provider: Box<dyn FeatureProvider>,
    encoder: EncoderWeights,
    vlad: OnceLock<VladWeights>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("cfg", &self.cfg)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl ConfidenceStats {
    fn of(w: &[f64]) -> Self {
        if w.is_empty() {
            return Self {
                mean: 0.0,
                min: 0.0,
                max: 0.0,
            };
        }
        Self {
            mean: w.iter().sum::<f64>() / w.len() as f64,
            min: w.iter().copied().fold(f64::INFINITY, f64::min),
            max: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Result of registering `source` onto `target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    /// Maps source coordinates into the target frame.
    pub transform: RigidTransform,
    pub degenerate: bool,
    /// Target-to-source estimate from the reverse pass.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reverse_transform: Option<RigidTransform>,
    pub keypoints: usize,
    pub confidence: ConfidenceStats,
    /// Weighted mean squared residual of the forward correspondences.
    pub residual: f64,
    pub oracle_matching: bool,
}

/// Output of one matching + registration direction.
#[derive(Debug, Clone)]
pub struct DirectionResult {
    pub source_keys: KeypointSet,
    pub target_keys: KeypointSet,
    pub matching: DMatrix<f64>,
    pub confidence: Vec<f64>,
    pub correspondences: Correspondences,
    pub registration: Registration,
}

impl Pipeline {
    /// Loads weight files named in `cfg`, or seeds fresh weights.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let provider = provider_from_config(&cfg.feature_config())?;
        let encoder = match &cfg.matching_weights {
            Some(p) => EncoderWeights::from_tensors(&TensorFile::read(p)?, cfg.feature_dim, cfg.heads, cfg.mode)?,
            None => EncoderWeights::init(cfg.feature_dim, cfg.heads, cfg.mode, cfg.matching_seed())?,
        };
        // seeded descriptor weights are large and only needed for retrieval
        let vlad = OnceLock::new();
        if let Some(p) = &cfg.descriptor_weights {
            let w =
                VladWeights::from_tensors(&TensorFile::read(p)?, cfg.feature_dim, cfg.clusters, cfg.descriptor_dim)?;
            let _ = vlad.set(w);
        }
        Ok(Self {
            cfg,
            provider,
            encoder,
            vlad,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &EncoderWeights {
        &self.encoder
    }

    pub fn vlad(&self) -> &VladWeights {
        self.vlad.get_or_init(|| {
            let c = &self.cfg;
            VladWeights::init(c.feature_dim, c.clusters, c.descriptor_dim, c.descriptor_seed())
                .expect("validated sizes")
        })
    }

    pub fn keypoints(&self, cloud: &PointCloud) -> Result<KeypointSet> {
        farthest_point_sampling(cloud, self.cfg.keypoints, self.cfg.sampling_seed())
    }

    pub fn features(&self, cloud: &PointCloud, keys: &KeypointSet) -> Result<FeatureMatrix> {
        self.provider.compute(cloud, keys)
    }

    pub fn describe(&self, cloud: &PointCloud) -> Result<Descriptor> {
        let keys = self.keypoints(cloud)?;
        let f = self.features(cloud, &keys)?;
        describe(f.values(), self.vlad())
    }

    /// One direction `source -> target`. With `oracle`, the clouds must be
    /// index-aligned; target keypoints reuse the source indices and the
    /// matching is the identity.
    pub fn direction(&self, source: &PointCloud, target: &PointCloud, oracle: bool) -> Result<DirectionResult> {
        let source_keys = self.keypoints(source)?;
        if oracle {
            if source.len() != target.len() {
                return Err(Error::InvalidArgument(format!(
                    "oracle matching needs index-aligned clouds ({} vs {} points)",
                    source.len(),
                    target.len()
                )));
            }
            let target_keys = KeypointSet::from_indices(target, source_keys.indices.clone())?;
            let n = source_keys.len();
            let correspondences = Correspondences::uniform(source_keys.coords.clone(), target_keys.coords.clone())?;
            let registration = register(&correspondences)?;
            return Ok(DirectionResult {
                source_keys,
                target_keys,
                matching: DMatrix::identity(n, n),
                confidence: vec![1.0; n],
                correspondences,
                registration,
            });
        }
        let target_keys = self.keypoints(target)?;
        let fs = self.features(source, &source_keys)?;
        let ft = self.features(target, &target_keys)?;
        let MatchResult {
            matching,
            projected,
            confidence,
        } = match_points(
            fs.values(),
            ft.values(),
            &target_keys.coords,
            &self.encoder,
            self.cfg.metric,
        )?;
        let correspondences =
            match Correspondences::new(source_keys.coords.clone(), projected.clone(), confidence.clone()) {
                Ok(c) => c,
                Err(_) => {
                    log::warn!("all confidence weights vanished; falling back to uniform weights");
                    Correspondences::uniform(source_keys.coords.clone(), projected)?
                }
            };
        let registration = register(&correspondences)?;
        Ok(DirectionResult {
            source_keys,
            target_keys,
            matching,
            confidence,
            correspondences,
            registration,
        })
    }

    pub fn register_pair(&self, source: &PointCloud, target: &PointCloud, oracle: bool) -> Result<PairReport> {
        let fwd = self.direction(source, target, oracle)?;
        let reverse_transform = if self.cfg.reverse {
            Some(self.direction(target, source, oracle)?.registration.transform)
        } else {
            None
        };
        if fwd.registration.degenerate {
            log::warn!("degenerate registration: correspondences do not constrain the rotation");
        }
        Ok(PairReport {
            residual: weighted_residual(&fwd.correspondences, &fwd.registration.transform),
            transform: fwd.registration.transform,
            degenerate: fwd.registration.degenerate,
            reverse_transform,
            keypoints: fwd.source_keys.len(),
            confidence: ConfidenceStats::of(&fwd.confidence),
            oracle_matching: oracle,
        })
    }

    /// Forward (and, when enabled, reverse) losses for an anchor/positive
    /// pair with ground truth `truth` mapping anchor into positive
    /// coordinates. The triplet term needs a `negative` scan and is 0
    /// without one.
    pub fn eval_losses(
        &self,
        anchor: &PointCloud,
        positive: &PointCloud,
        truth: &RigidTransform,
        negative: Option<&PointCloud>,
        oracle: bool,
    ) -> Result<LossBreakdown> {
        let labels = |c: &PointCloud, which: &str| {
            c.labels()
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("{which} scan has no labels")))
        };
        let (la, lp) = (labels(anchor, "anchor")?, labels(positive, "positive")?);
        let fwd = self.direction(anchor, positive, oracle)?;
        let side_a = LossSide::new(fwd.source_keys.coords.clone(), &la.select(&fwd.source_keys.indices))?;
        let side_p = LossSide::new(fwd.target_keys.coords.clone(), &lp.select(&fwd.target_keys.indices))?;
        let fwd_pass = DirectionPass {
            matching: fwd.matching,
            estimate: fwd.registration.transform,
        };
        let rev_pass = if self.cfg.reverse {
            // same keypoints, roles swapped
            let rev = if oracle {
                let n = side_p.points.nrows();
                let c = Correspondences::uniform(side_p.points.clone(), side_a.points.clone())?;
                DirectionPass {
                    matching: DMatrix::identity(n, n),
                    estimate: register(&c)?.transform,
                }
            } else {
                let fp = self.features(positive, &fwd.target_keys)?;
                let fa = self.features(anchor, &fwd.source_keys)?;
                let m = match_points(fp.values(), fa.values(), &side_a.points, &self.encoder, self.cfg.metric)?;
                let c = Correspondences::new(side_p.points.clone(), m.projected.clone(), m.confidence)
                    .or_else(|_| Correspondences::uniform(side_p.points.clone(), m.projected))?;
                DirectionPass {
                    matching: m.matching,
                    estimate: register(&c)?.transform,
                }
            };
            Some(rev)
        } else {
            None
        };
        let pl = pair_losses(
            &side_a,
            &side_p,
            &fwd_pass,
            rev_pass.as_ref(),
            truth,
            self.cfg.mmo_source,
        )?;
        let triplet = match negative {
            Some(n) => {
                let da = self.describe(anchor)?;
                let dp = self.describe(positive)?;
                let dn = self.describe(n)?;
                triplet_loss(&da.values, &dp.values, &dn.values, self.cfg.loss_weights.margin)?
            }
            None => 0.0,
        };
        Ok(total_loss(
            triplet,
            &pl.forward,
            pl.reverse.as_ref(),
            &self.cfg.loss_weights,
        ))
    }

    /// Descriptors for `count` scans produced by `load`, computed in
    /// parallel.
    pub fn describe_all<F>(&self, count: usize, load: F) -> Result<Vec<Descriptor>>
    where
        F: Fn(usize) -> Result<PointCloud> + Sync,
    {
        (0..count).into_par_iter().map(|i| self.describe(&load(i)?)).collect()
    }

    /// Retrieval, evaluation and registration of every true loop pair.
    pub fn detect_loops<F>(&self, poses: &[RigidTransform], load: F, options: &LoopOptions) -> Result<LoopRun>
    where
        F: Fn(usize) -> Result<PointCloud> + Sync,
    {
        let n = poses.len();
        let descriptors: Vec<Vec<f64>> = match options.oracle_descriptors {
            Some(sigma) => oracle_descriptors(poses, sigma, self.cfg.seed),
            None => self.describe_all(n, &load)?.into_iter().map(|d| d.values).collect(),
        };
        if n < self.cfg.window + 2 {
            log::warn!("sequence of {n} scans is shorter than window + 2; no loop candidates");
        }
        let candidates = detect_loops(&descriptors, self.cfg.window);
        let params = EvalParams {
            radius: self.cfg.radius,
            window: self.cfg.window,
        };
        let mut report = evaluate_sequence(&candidates, poses, &params)?;
        if options.register {
            let errors = report
                .pairs
                .par_iter()
                .filter(|p| p.is_tp)
                .map(|p| {
                    let (si, sj) = (load(p.i)?, load(p.j)?);
                    let est = self
                        .direction(&si, &sj, options.oracle_matching)?
                        .registration
                        .transform;
                    let truth = poses[p.j].inverse().compose(&poses[p.i]);
                    let (r_err, t_err) = registration_errors(&est, &truth);
                    Ok(PairError {
                        i: p.i,
                        j: p.j,
                        r_err,
                        t_err,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            report.set_registration(errors);
        }
        Ok(LoopRun {
            candidates,
            path: path_points(poses, &report),
            report,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LoopOptions {
    /// Replace learned descriptors by pose-derived ones with this noise
    /// level.
    pub oracle_descriptors: Option<f64>,
    pub oracle_matching: bool,
    /// Register every true-positive pair and report the errors.
    pub register: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopRun {
    pub candidates: Vec<LoopCandidate>,
    pub report: LoopEvalReport,
    pub path: Vec<PathPoint>,
}

impl LoopRun {
    /// Writes `report.json`, `pr_curve.csv`, `loops.csv` and `path.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.report.write_json(&dir.join("report.json"))?;
        self.report.write_pr_csv(&dir.join("pr_curve.csv"))?;
        self.report.write_loops_csv(&dir.join("loops.csv"))?;
        write_csv(&dir.join("path.csv"), &self.path)
    }
}

/// Trajectory point for plotting; `loop_flag` marks scans closing a true
/// loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub x: f64,
    pub y: f64,
    pub loop_flag: u8,
}

fn path_points(poses: &[RigidTransform], report: &LoopEvalReport) -> Vec<PathPoint> {
    let mut flags = vec![0u8; poses.len()];
    for p in report.pairs.iter().filter(|p| p.is_tp) {
        flags[p.i] = 1;
    }
    poses
        .iter()
        .zip(flags)
        .map(|(p, loop_flag)| PathPoint {
            x: p.translation().x,
            y: p.translation().y,
            loop_flag,
        })
        .collect()
}

/// Length scale of the oracle embedding in meters.
pub const ORACLE_SCALE: f64 = 100.0;

/// Unit vector `(cos x/L, sin x/L, cos y/L, sin y/L, cos z/L, sin z/L)/√3`
/// of each pose position; nearby poses get nearby descriptors. With
/// `sigma > 0` every component receives seeded Gaussian noise before
/// renormalization.
pub fn oracle_descriptors(poses: &[RigidTransform], sigma: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f72_6163_6c65);
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    poses
        .iter()
        .map(|p| {
            let t = p.translation();
            let mut v: Vec<f64> = [t.x, t.y, t.z]
                .iter()
                .flat_map(|c| {
                    let a = c / ORACLE_SCALE;
                    [a.cos(), a.sin()]
                })
                .map(|x| x / 3f64.sqrt())
                .collect();
            if sigma > 0.0 {
                v.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
            }
            Descriptor::from_unnormalized(v).values
        })
        .collect()
}
