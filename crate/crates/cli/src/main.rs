use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use padloc::config::RunConfig;
use padloc::io_kitti::{
    read_labels, read_poses, read_scan, synth_scene, synth_sequence, write_poses, write_sequence, SequenceIndex,
    SynthSpec, TrajectorySpec,
};
use padloc::pipeline::{LoopOptions, Pipeline};
use padloc::tensor_file::TensorFile;
use padloc::{DiversityMetric, MatchingMode, PointCloud};

/// LiDAR loop-closure detection and point-cloud registration.
#[derive(Debug, Parser)]
#[command(name = "padloc", version)]
struct Cli {
    /// TOML file with a `[padloc]` table.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed and PADLOC_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Overrides {
    /// Keypoints sampled per scan.
    #[arg(long)]
    keypoints: Option<usize>,
    /// uniform, column-sum, shannon, hill-<r> or berger-parker.
    #[arg(long)]
    metric: Option<DiversityMetric>,
    /// pure-attention or full-tel.
    #[arg(long)]
    mode: Option<MatchingMode>,
    /// Skip the reverse (target to source) pass.
    #[arg(long)]
    no_reverse: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the rigid transform taking SOURCE into TARGET's frame.
    Register {
        source: PathBuf,
        target: PathBuf,
        /// Use index correspondences (clouds must be index-aligned).
        #[arg(long)]
        oracle_matching: bool,
        /// Also write register.json and config.toml here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Retrieve and evaluate loop closures over a KITTI-layout sequence.
    DetectLoops {
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pose file; defaults to SEQUENCE/poses.txt.
        #[arg(long)]
        poses: Option<PathBuf>,
        /// Derive descriptors from ground-truth positions with this noise level.
        #[arg(long, value_name = "SIGMA", num_args = 0..=1, default_missing_value = "0")]
        oracle_descriptors: Option<f64>,
        #[arg(long)]
        oracle_matching: bool,
        /// Skip registration of the detected loop pairs.
        #[arg(long)]
        no_register: bool,
        /// Exclusion window in scans.
        #[arg(long)]
        window: Option<usize>,
        /// Loop radius in meters.
        #[arg(long)]
        radius: Option<f64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate the training losses for an anchor/positive pair.
    EvalLosses {
        anchor: PathBuf,
        positive: PathBuf,
        #[arg(long)]
        anchor_labels: PathBuf,
        #[arg(long)]
        positive_labels: PathBuf,
        /// Pose file whose first line maps anchor into positive coordinates.
        #[arg(long)]
        transform: PathBuf,
        /// Negative scan for the triplet term.
        #[arg(long)]
        negative: Option<PathBuf>,
        #[arg(long)]
        oracle_matching: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Generate synthetic data with exact ground truth.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Summarize a scan, label, pose, tensor or config file.
    Info {
        file: PathBuf,
        /// Point count for a .label file.
        #[arg(long)]
        points: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
enum SynthCommand {
    /// Labeled pair: scan 0 is the source, scan 1 the moved target.
    Scene {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        objects: usize,
        #[arg(long, default_value_t = 200)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        ground: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Figure-eight trajectory with revisits.
    Sequence {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 160)]
        scans_per_lap: usize,
        #[arg(long, default_value_t = 2)]
        laps: usize,
        #[arg(long, default_value_t = 40.0)]
        scale: f64,
        #[arg(long, default_value_t = 256)]
        landmarks: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e
                .chain()
                .any(|c| c.downcast_ref::<padloc::Error>().is_some_and(|e| e.is_config_error()));
            ExitCode::from(if config { 3 } else { 2 })
        }
    }
}

fn load_config(cli: &Cli, overrides: Option<&Overrides>) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = overrides {
        if let Some(n) = o.keypoints {
            cfg.keypoints = n;
        }
        if let Some(m) = o.metric {
            cfg.metric = m;
        }
        if let Some(m) = o.mode {
            cfg.mode = m;
        }
        if o.no_reverse {
            cfg.reverse = false;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_effective(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.write(&dir.join("config.toml"))?;
    Ok(())
}

fn load_scan(path: &Path) -> Result<PointCloud> {
    let decoded = read_scan(path)?;
    if decoded.dropped > 0 {
        log::warn!("{}: dropped {} non-finite points", path.display(), decoded.dropped);
    }
    Ok(decoded.cloud)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Register {
            source,
            target,
            oracle_matching,
            out,
            overrides,
        } => {
            let cfg = load_config(&cli, Some(overrides))?;
            let (s, t) = (load_scan(source)?, load_scan(target)?);
            let pipeline = Pipeline::new(cfg.clone())?;
            let report = pipeline.register_pair(&s, &t, *oracle_matching)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(dir) = out {
                write_effective(dir, &cfg)?;
                write_json(&dir.join("register.json"), &report)?;
            }
        }
        Command::DetectLoops {
            sequence,
            out,
            poses,
            oracle_descriptors,
            oracle_matching,
            no_register,
            window,
            radius,
            overrides,
        } => {
            let mut cfg = load_config(&cli, Some(overrides))?;
            if let Some(w) = window {
                cfg.window = *w;
            }
            if let Some(r) = radius {
                cfg.radius = *r;
            }
            cfg.dataset = Some(sequence.clone());
            cfg.validate()?;
            let seq = match poses {
                Some(p) => SequenceIndex::open_with_poses(sequence, Some(p))?,
                None => SequenceIndex::open(sequence)?,
            };
            let gt = seq
                .poses
                .clone()
                .with_context(|| format!("{}: no poses.txt and no --poses given", sequence.display()))?;
            let pipeline = Pipeline::new(cfg.clone())?;
            let options = LoopOptions {
                oracle_descriptors: *oracle_descriptors,
                oracle_matching: *oracle_matching,
                register: !no_register,
            };
            let run = pipeline.detect_loops(&gt, |i| seq.load(i), &options)?;
            write_effective(out, &cfg)?;
            run.write(out)?;
            let r = &run.report;
            println!(
                "scans {} candidates {} positives {} AP {:.4} Max-F1 {:.4} EP {:.4}",
                gt.len(),
                run.candidates.len(),
                r.positives,
                r.ap,
                r.max_f1,
                r.ep
            );
            if let (Some(re), Some(te)) = (r.mean_r_err, r.mean_t_err) {
                println!(
                    "mean r_err {re:.6} deg, mean t_err {te:.6} m over {} pairs",
                    r.registration.len()
                );
            }
        }
        Command::EvalLosses {
            anchor,
            positive,
            anchor_labels,
            positive_labels,
            transform,
            negative,
            oracle_matching,
            out,
            overrides,
        } => {
            let cfg = load_config(&cli, Some(overrides))?;
            let a = load_scan(anchor)?;
            let la = read_labels(anchor_labels, a.len())?;
            let a = a.with_labels(la)?;
            let p = load_scan(positive)?;
            let lp = read_labels(positive_labels, p.len())?;
            let p = p.with_labels(lp)?;
            let gt = read_poses(transform)?
                .into_iter()
                .next()
                .with_context(|| format!("{} holds no pose", transform.display()))?;
            let n = negative.as_deref().map(load_scan).transpose()?;
            let pipeline = Pipeline::new(cfg.clone())?;
            let breakdown = pipeline.eval_losses(&a, &p, &gt, n.as_ref(), *oracle_matching)?;
            println!("{}", serde_json::to_string_pretty(&breakdown)?);
            if let Some(dir) = out {
                write_effective(dir, &cfg)?;
                write_json(&dir.join("losses.json"), &breakdown)?;
            }
        }
        Command::Synth(cmd) => {
            let cfg = load_config(&cli, None)?;
            match cmd {
                SynthCommand::Scene {
                    out,
                    objects,
                    points,
                    ground,
                    noise,
                } => {
                    let spec = SynthSpec {
                        ground_points: *ground,
                        ..SynthSpec::new(*objects, *points, *noise, cfg.seed)
                    };
                    let scene = synth_scene(&spec)?;
                    let poses = [padloc::RigidTransform::identity(), scene.transform];
                    write_sequence(out, &[scene.source, scene.target], Some(&poses))?;
                    write_poses(&out.join("transform.txt"), &[scene.transform])?;
                    println!(
                        "wrote scene with {} points to {}",
                        objects * points + ground,
                        out.display()
                    );
                }
                SynthCommand::Sequence {
                    out,
                    scans_per_lap,
                    laps,
                    scale,
                    landmarks,
                } => {
                    let spec = TrajectorySpec {
                        scans_per_lap: *scans_per_lap,
                        laps: *laps,
                        scale: *scale,
                        landmarks: *landmarks,
                        seed: cfg.seed,
                        ..TrajectorySpec::default()
                    };
                    let seq = synth_sequence(&spec)?;
                    write_sequence(out, &seq.scans, Some(&seq.poses))?;
                    println!("wrote {} scans to {}", seq.scans.len(), out.display());
                }
            }
        }
        Command::Info { file, points } => info(file, *points)?,
    }
    Ok(())
}

fn info(file: &Path, points: Option<usize>) -> Result<()> {
    let ext = file.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "bin" => {
            let d = read_scan(file)?;
            let c = d.cloud.coords();
            println!("scan: {} points ({} dropped)", d.cloud.len(), d.dropped);
            if !d.cloud.is_empty() {
                for (axis, col) in ["x", "y", "z"].iter().zip(c.column_iter()) {
                    println!("  {axis}: [{:.3}, {:.3}]", col.min(), col.max());
                }
            }
        }
        "label" => {
            let bytes = std::fs::metadata(file)
                .with_context(|| format!("reading {}", file.display()))?
                .len() as usize;
            let labels = read_labels(file, points.unwrap_or(bytes / 4))?;
            let mut counts = std::collections::BTreeMap::new();
            for &s in &labels.semantic {
                *counts.entry(s).or_insert(0usize) += 1;
            }
            println!("labels: {} points", labels.len());
            for (s, n) in counts {
                println!("  class {s}: {n}");
            }
        }
        "txt" => {
            let poses = read_poses(file)?;
            println!("poses: {}", poses.len());
            if let (Some(first), Some(last)) = (poses.first(), poses.last()) {
                let length: f64 = poses
                    .windows(2)
                    .map(|w| (w[1].translation() - w[0].translation()).norm())
                    .sum();
                println!("  first translation: {:?}", first.translation().as_slice());
                println!("  last translation: {:?}", last.translation().as_slice());
                println!("  path length: {length:.3} m");
            }
        }
        "pdlc" => {
            let t = TensorFile::read(file)?;
            println!("tensors: {}", t.len());
            for (name, tensor) in t.iter() {
                println!("  {name}: {:?}", tensor.dims);
            }
        }
        "toml" => {
            let cfg = RunConfig::load(file)?;
            print!("{}", cfg.to_toml());
        }
        _ => anyhow::bail!(
            "{}: unknown file type (expected .bin, .label, .txt, .pdlc or .toml)",
            file.display()
        ),
    }
    Ok(())
}
