//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints one PASS/FAIL line; exits non-zero when any criterion fails.

#![allow(clippy::needless_range_loop)]

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use padloc::descriptor::{context_gate, netvlad, VladWeights};
use padloc::io_kitti::{
    decode_labels, decode_scan, encode_labels, encode_scan, format_poses, parse_poses, synth_scene, synth_sequence,
    PanopticLabels, SuperClassTable, SynthSpec, TrajectorySpec,
};
use padloc::loopdb_eval::{evaluate_sequence, EvalParams, LoopCandidate};
use padloc::losses::{
    match_loss, meta_semantic_loss, mmo_loss, pair_losses, pose_loss, semantic_loss, total_loss, DirectionPass,
    LossSide, MmoSource,
};
use padloc::matching::{confidence, match_points, DiversityMetric, EncoderWeights, MatchingMode};
use padloc::pipeline::{LoopOptions, Pipeline};
use padloc::registration::{register, Correspondences};
use padloc::tensor_file::{Tensor, TensorFile};
use padloc::{ObjectAdjacency, OneHotMatrix, Point3, PointCloud, RigidTransform, RunConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_points<R: Rng>(rng: &mut R, n: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, 3, |_, _| rng.random_range(-scale..scale))
}

fn random_stochastic<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(0.0..1.0f64).powi(3));
    for mut r in m.row_iter_mut() {
        let s = r.sum();
        r /= s;
    }
    m
}

fn permutation(p: &[usize]) -> DMatrix<f64> {
    let n = p.len();
    DMatrix::from_fn(n, n, |i, j| if p[i] == j { 1.0 } else { 0.0 })
}

fn kabsch_recovery() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let (mut worst_r, mut worst_t) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let truth = RigidTransform::random(&mut r, 20.0);
        let src = random_points(&mut r, 50, 10.0);
        let dst = truth.apply(&src);
        let w = (0..50).map(|_| r.random_range(0.01..1.0)).collect();
        let reg =
            register(&Correspondences::new(src, dst, w).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        worst_r = worst_r.max((reg.transform.rotation() - truth.rotation()).norm());
        worst_t = worst_t.max((reg.transform.translation() - truth.translation()).norm());
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst_r < 1e-9 && worst_t < 1e-9, || {
        format!("rotation err {worst_r:e}, translation err {worst_t:e}")
    })?;
    check(secs < 5.0, || format!("took {secs:.2} s"))?;
    Ok(format!(
        "max rotation err {worst_r:.1e}, max translation err {worst_t:.1e} m, {secs:.2} s"
    ))
}

fn reflection_safety() -> Outcome {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for case in 0..500 {
        let n = r.random_range(1..40);
        let mut src = random_points(&mut r, n, 5.0);
        match case % 5 {
            // planar
            0 => src.column_mut(2).fill(0.0),
            // colinear
            1 => {
                let dir = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), 1.0);
                for i in 0..n {
                    let s = r.random_range(-5.0..5.0);
                    src.row_mut(i).copy_from(&(dir * s).transpose());
                }
            }
            // coincident
            2 => {
                let p = src.row(0).clone_owned();
                for i in 0..n {
                    src.row_mut(i).copy_from(&p);
                }
            }
            _ => {}
        }
        let dst = match case % 5 {
            // random target
            4 => random_points(&mut r, n, 5.0),
            // mirror image, optionally moved
            _ => {
                let t = RigidTransform::random(&mut r, 3.0);
                let mut m = src.clone();
                m.column_mut(2).neg_mut();
                t.apply(&m)
            }
        };
        let w: Vec<f64> = (0..n).map(|_| r.random_range(0.01..1.0)).collect();
        let reg =
            register(&Correspondences::new(src, dst, w).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let rot = reg.transform.rotation();
        let det = rot.determinant();
        let ortho = (rot.transpose() * rot - Matrix3::identity()).norm();
        check((det - 1.0).abs() < 1e-9 && ortho < 1e-9, || {
            format!("case {case}: det {det}, orthonormality {ortho:e}")
        })?;
        worst = worst.max((det - 1.0).abs());
    }
    Ok(format!("500 cases, max |det - 1| {worst:.1e}"))
}

fn matching_simplex() -> Outcome {
    let mut r = rng(3);
    let (mut worst_sum, mut worst_proj) = (0.0f64, 0.0f64);
    for trial in 0..1000 {
        let (f, heads) = [(8, 2), (12, 3), (16, 4)][trial % 3];
        let weights =
            EncoderWeights::init(f, heads, MatchingMode::PureAttention, trial as u64).map_err(|e| e.to_string())?;
        let (ns, nt) = (r.random_range(1..24), r.random_range(1..24));
        let scale = [0.1, 1.0, 10.0][trial % 3];
        let fs = DMatrix::from_fn(ns, f, |_, _| r.random_range(-scale..scale));
        let ft = DMatrix::from_fn(nt, f, |_, _| r.random_range(-scale..scale));
        let qt = random_points(&mut r, nt, 30.0);
        let m = match_points(&fs, &ft, &qt, &weights, DiversityMetric::BergerParker).map_err(|e| e.to_string())?;
        check(m.matching.iter().all(|&v| v >= 0.0), || {
            format!("trial {trial}: negative entry")
        })?;
        for row in m.matching.row_iter() {
            worst_sum = worst_sum.max((row.sum() - 1.0).abs());
        }
        worst_proj = worst_proj.max((&m.matching * &qt - &m.projected).amax());
    }
    check(worst_sum < 1e-6 && worst_proj < 1e-6, || {
        format!("row sum err {worst_sum:e}, projection err {worst_proj:e}")
    })?;
    Ok(format!(
        "max |row sum - 1| {worst_sum:.1e}, max |MQ - projected| {worst_proj:.1e}"
    ))
}

fn metric_calibration() -> Outcome {
    let metrics = [
        DiversityMetric::Shannon,
        DiversityMetric::Hill(1.0),
        DiversityMetric::Hill(2.0),
        DiversityMetric::Hill(0.5),
        DiversityMetric::BergerParker,
    ];
    for n in [2usize, 3, 7, 64] {
        let uniform = vec![1.0 / n as f64; n];
        for m in metrics {
            let c = confidence(&uniform, m).map_err(|e| e.to_string())?;
            check(c == 0.0, || format!("{m} on uniform row of {n}: {c}"))?;
            for hot in [0, n - 1] {
                let mut row = vec![0.0; n];
                row[hot] = 1.0;
                let c = confidence(&row, m).map_err(|e| e.to_string())?;
                check(c == 1.0, || format!("{m} on one-hot row of {n}: {c}"))?;
            }
        }
    }
    let p = [0.5, 0.5, 0.0, 0.0];
    let bp = confidence(&p, DiversityMetric::BergerParker).map_err(|e| e.to_string())?;
    let h2 = confidence(&p, DiversityMetric::Hill(2.0)).map_err(|e| e.to_string())?;
    check((bp - 1.0 / 3.0).abs() < 1e-12 && (h2 - 2.0 / 3.0).abs() < 1e-12, || {
        format!("hand case: Berger-Parker {bp}, Hill(2) {h2}")
    })?;
    Ok(format!(
        "uniform -> 0, one-hot -> 1, hand case BP {bp:.12}, Hill(2) {h2:.12}"
    ))
}

// Naive dense oracles for the matrix losses.

fn naive_pose(est: &RigidTransform, truth: &RigidTransform, q: &DMatrix<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..q.nrows() {
        let p = Vector3::new(q[(i, 0)], q[(i, 1)], q[(i, 2)]);
        let a = est.rotation() * p + est.translation();
        let b = truth.rotation() * p + truth.translation();
        for k in 0..3 {
            acc += (a[k] - b[k]).abs();
        }
    }
    acc / (3 * q.nrows()) as f64
}

fn naive_match(truth: &RigidTransform, qa: &DMatrix<f64>, m: &DMatrix<f64>, qp: &DMatrix<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..qa.nrows() {
        let p = Vector3::new(qa[(i, 0)], qa[(i, 1)], qa[(i, 2)]);
        let moved = truth.rotation() * p + truth.translation();
        for k in 0..3 {
            let mut soft = 0.0;
            for j in 0..qp.nrows() {
                soft += m[(i, j)] * qp[(j, k)];
            }
            acc += (moved[k] - soft).abs();
        }
    }
    acc / (3 * qa.nrows()) as f64
}

fn naive_semantic(ka: &[usize], m: &DMatrix<f64>, kp: &[usize], classes: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..ka.len() {
        for c in 0..classes {
            let target = if ka[i] == c { 1.0 } else { 0.0 };
            let mut soft = 0.0;
            for j in 0..kp.len() {
                if kp[j] == c {
                    soft += m[(i, j)];
                }
            }
            acc += (target - soft).abs();
        }
    }
    acc / (ka.len() * classes) as f64
}

fn naive_mmo(ga: &[usize], m_ap: &DMatrix<f64>, gp: &[usize], m_pa: &DMatrix<f64>) -> f64 {
    let (na, np) = (ga.len(), gp.len());
    let mut acc = 0.0;
    for i in 0..na {
        for l in 0..na {
            if ga[i] == ga[l] {
                continue;
            }
            let mut v = 0.0;
            for j in 0..np {
                for k in 0..np {
                    if gp[j] == gp[k] {
                        v += m_ap[(i, j)] * m_pa[(k, l)];
                    }
                }
            }
            acc += v;
        }
    }
    acc / (na * na) as f64
}

fn loss_zero_cases() -> Outcome {
    let mut r = rng(5);
    let e = |e: padloc::Error| e.to_string();
    // ground-truth permutation, exact transform, consistent labels
    let mut worst_zero = 0.0f64;
    for _ in 0..50 {
        let n = r.random_range(1..=32);
        let truth = RigidTransform::random(&mut r, 10.0);
        let qa = random_points(&mut r, n, 10.0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let moved = truth.apply(&qa);
        let mut qp = DMatrix::zeros(n, 3);
        for i in 0..n {
            qp.row_mut(perm[i]).copy_from(&moved.row(i));
        }
        let cls: Vec<usize> = (0..n).map(|_| r.random_range(0..6)).collect();
        let sup: Vec<usize> = cls.iter().map(|c| c / 2).collect();
        let obj: Vec<usize> = (0..n).map(|_| r.random_range(0..5)).collect();
        let mut pcls = vec![0; n];
        let mut psup = vec![0; n];
        let mut pobj = vec![0; n];
        for i in 0..n {
            pcls[perm[i]] = cls[i];
            psup[perm[i]] = sup[i];
            pobj[perm[i]] = obj[i] + 100;
        }
        let m = permutation(&perm);
        let onehot = |v: &[usize], c: usize| OneHotMatrix::new(v.to_vec(), c);
        let values = [
            pose_loss(&truth, &truth, &qa).map_err(e)?,
            match_loss(&truth, &qa, &m, &qp).map_err(e)?,
            semantic_loss(&onehot(&cls, 6).map_err(e)?, &m, &onehot(&pcls, 6).map_err(e)?).map_err(e)?,
            meta_semantic_loss(&onehot(&sup, 3).map_err(e)?, &m, &onehot(&psup, 3).map_err(e)?).map_err(e)?,
            mmo_loss(
                &ObjectAdjacency::from_groups(obj.iter().copied()),
                &m,
                &ObjectAdjacency::from_groups(pobj.iter().copied()),
                &m.transpose(),
            )
            .map_err(e)?,
        ];
        for v in values {
            worst_zero = worst_zero.max(v);
        }
    }
    check(worst_zero < 1e-9, || format!("zero case reached {worst_zero:e}"))?;

    let mut worst_oracle = 0.0f64;
    for _ in 0..200 {
        let (na, np) = (r.random_range(1..=32), r.random_range(1..=32));
        let classes = r.random_range(1..8);
        let est = RigidTransform::random(&mut r, 5.0);
        let truth = RigidTransform::random(&mut r, 5.0);
        let qa = random_points(&mut r, na, 10.0);
        let qp = random_points(&mut r, np, 10.0);
        let m_ap = random_stochastic(&mut r, na, np);
        let m_pa = random_stochastic(&mut r, np, na);
        let ka: Vec<usize> = (0..na).map(|_| r.random_range(0..classes)).collect();
        let kp: Vec<usize> = (0..np).map(|_| r.random_range(0..classes)).collect();
        let ga: Vec<usize> = (0..na).map(|_| r.random_range(0..4)).collect();
        let gp: Vec<usize> = (0..np).map(|_| r.random_range(0..4)).collect();
        let pairs = [
            (pose_loss(&est, &truth, &qa).map_err(e)?, naive_pose(&est, &truth, &qa)),
            (
                match_loss(&truth, &qa, &m_ap, &qp).map_err(e)?,
                naive_match(&truth, &qa, &m_ap, &qp),
            ),
            (
                semantic_loss(
                    &OneHotMatrix::new(ka.clone(), classes).map_err(e)?,
                    &m_ap,
                    &OneHotMatrix::new(kp.clone(), classes).map_err(e)?,
                )
                .map_err(e)?,
                naive_semantic(&ka, &m_ap, &kp, classes),
            ),
            (
                mmo_loss(
                    &ObjectAdjacency::from_groups(ga.iter().copied()),
                    &m_ap,
                    &ObjectAdjacency::from_groups(gp.iter().copied()),
                    &m_pa,
                )
                .map_err(e)?,
                naive_mmo(&ga, &m_ap, &gp, &m_pa),
            ),
        ];
        for (fast, slow) in pairs {
            worst_oracle = worst_oracle.max((fast - slow).abs());
        }
    }
    check(worst_oracle < 1e-9, || format!("oracle gap {worst_oracle:e}"))?;
    Ok(format!(
        "max zero-case loss {worst_zero:.1e}, max oracle gap {worst_oracle:.1e} over 200 instances"
    ))
}

fn small_config() -> RunConfig {
    RunConfig {
        keypoints: 32,
        feature_dim: 16,
        descriptor_dim: 8,
        clusters: 4,
        heads: 2,
        ..RunConfig::default()
    }
}

fn bidirectional_symmetry() -> Outcome {
    let e = |e: padloc::Error| e.to_string();
    let pipeline = Pipeline::new(small_config()).map_err(e)?;
    let weights = pipeline.config().loss_weights;
    let mut worst = 0.0f64;
    for k in 0..50u64 {
        let s = synth_scene(&SynthSpec::new(3, 20, 0.02, 600 + k)).map_err(e)?;
        let ab = pipeline
            .eval_losses(&s.source, &s.target, &s.transform, None, false)
            .map_err(e)?;
        let ba = pipeline
            .eval_losses(&s.target, &s.source, &s.transform.inverse(), None, false)
            .map_err(e)?;
        worst = worst.max((ab.total - ba.total).abs());
    }
    // the same check on loss-level inputs with random matchings
    let mut r = rng(6);
    let table = SuperClassTable::default();
    let ids = [10u16, 40, 50, 70, 30, 252];
    for _ in 0..50 {
        let (na, np) = (r.random_range(2..20), r.random_range(2..20));
        let labels = |r: &mut ChaCha8Rng, n: usize| {
            let sem = (0..n).map(|_| ids[r.random_range(0..ids.len())]).collect();
            let inst = (0..n).map(|_| r.random_range(0..3)).collect();
            PanopticLabels::from_parts(sem, inst, &table)
        };
        let la = labels(&mut r, na).map_err(e)?;
        let lp = labels(&mut r, np).map_err(e)?;
        let a = LossSide::new(random_points(&mut r, na, 10.0), &la).map_err(e)?;
        let p = LossSide::new(random_points(&mut r, np, 10.0), &lp).map_err(e)?;
        let truth = RigidTransform::random(&mut r, 5.0);
        let fwd = DirectionPass {
            matching: random_stochastic(&mut r, na, np),
            estimate: RigidTransform::random(&mut r, 5.0),
        };
        let rev = DirectionPass {
            matching: random_stochastic(&mut r, np, na),
            estimate: RigidTransform::random(&mut r, 5.0),
        };
        let t = r.random_range(0.0..1.0);
        let x = pair_losses(&a, &p, &fwd, Some(&rev), &truth, MmoSource::ReverseHead).map_err(e)?;
        let y = pair_losses(&p, &a, &rev, Some(&fwd), &truth.inverse(), MmoSource::ReverseHead).map_err(e)?;
        let tx = total_loss(t, &x.forward, x.reverse.as_ref(), &weights).total;
        let ty = total_loss(t, &y.forward, y.reverse.as_ref(), &weights).total;
        worst = worst.max((tx - ty).abs());
    }
    check(worst < 1e-9, || format!("swap changed total by {worst:e}"))?;
    Ok(format!(
        "50 synthetic pairs + 50 random loss inputs, max |total(a,p) - total(p,a)| {worst:.1e}"
    ))
}

/// Independent threshold enumeration: every distinct score is a threshold;
/// a candidate counts at `tau` when its score is at least `tau`.
fn brute_force_metrics(
    cands: &[LoopCandidate],
    poses: &[RigidTransform],
    radius: f64,
    window: usize,
) -> (f64, f64, f64) {
    let near = |i: usize, j: usize| (poses[i].translation() - poses[j].translation()).norm() <= radius;
    let mut positives = 0usize;
    for i in 0..poses.len() {
        if i > window && (0..i - window).any(|j| near(i, j)) {
            positives += 1;
        }
    }
    if positives == 0 {
        return (0.0, 0.0, 0.0);
    }
    let mut taus: Vec<f64> = cands.iter().map(|c| c.score).collect();
    taus.sort_by(|a, b| b.total_cmp(a));
    taus.dedup();
    let mut points = Vec::new();
    for &tau in &taus {
        let kept: Vec<&LoopCandidate> = cands.iter().filter(|c| c.score >= tau).collect();
        let tp = kept.iter().filter(|c| near(c.query, c.candidate)).count();
        let fp = kept.len() - tp;
        points.push((tp as f64 / (tp + fp) as f64, tp as f64 / positives as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    let mut f1: f64 = 0.0;
    let mut full: f64 = 0.0;
    for &(p, rc) in &points {
        ap += (rc - prev) * p;
        prev = rc;
        if p + rc > 0.0 {
            f1 = f1.max(2.0 * p * rc / (p + rc));
        }
        if p == 1.0 {
            full = full.max(rc);
        }
    }
    let ep = points.first().map_or(0.0, |&(p, _)| 0.5 * (p + full));
    (ap, f1, ep)
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(7);
    let params = EvalParams {
        radius: 4.0,
        window: 50,
    };
    for seq in 0..20 {
        // random walk that returns to earlier places
        let mut poses = Vec::with_capacity(200);
        let mut pos = Vector3::zeros();
        for i in 0..200 {
            if i > 60 && r.random_bool(0.1) {
                let back: &RigidTransform = &poses[r.random_range(0..i - 55)];
                pos = back.translation() + Vector3::new(r.random_range(-5.0..5.0), r.random_range(-5.0..5.0), 0.0);
            } else {
                pos += Vector3::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), 0.0);
            }
            poses.push(RigidTransform::from_translation(pos));
        }
        let levels = [4.0, 20.0, 1000.0][seq % 3];
        let mut cands = Vec::new();
        for i in params.window + 1..200 {
            if r.random_bool(0.8) {
                cands.push(LoopCandidate {
                    query: i,
                    candidate: r.random_range(0..i - params.window),
                    score: -r.random_range(0.0f64..levels).floor(),
                });
            }
        }
        let report = evaluate_sequence(&cands, &poses, &params).map_err(|e| e.to_string())?;
        let (ap, f1, ep) = brute_force_metrics(&cands, &poses, params.radius, params.window);
        check(report.ap == ap && report.max_f1 == f1 && report.ep == ep, || {
            format!(
                "sequence {seq}: got ({}, {}, {}), oracle ({ap}, {f1}, {ep})",
                report.ap, report.max_f1, report.ep
            )
        })?;
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 30.0, || format!("took {secs:.2} s"))?;
    Ok(format!("20 sequences of 200 scans match exactly, {secs:.2} s"))
}

fn end_to_end() -> Outcome {
    let e = |e: padloc::Error| e.to_string();
    let seq = synth_sequence(&TrajectorySpec::default()).map_err(e)?;
    let cfg = RunConfig {
        keypoints: 128,
        ..small_config()
    };
    let pipeline = Pipeline::new(cfg).map_err(e)?;
    let load = |i: usize| Ok(seq.scans[i].clone());
    let clean = pipeline
        .detect_loops(
            &seq.poses,
            load,
            &LoopOptions {
                oracle_descriptors: Some(0.0),
                oracle_matching: true,
                register: true,
            },
        )
        .map_err(e)?;
    let rep = &clean.report;
    let r_err = rep.registration.iter().map(|p| p.r_err).fold(0.0, f64::max);
    let t_err = rep.registration.iter().map(|p| p.t_err).fold(0.0, f64::max);
    check(rep.ap == 1.0, || format!("AP {} at sigma 0", rep.ap))?;
    check(!rep.registration.is_empty(), || "no true loops registered".into())?;
    check(r_err < 1e-6 && t_err < 1e-6, || {
        format!("r_err {r_err:e} deg, t_err {t_err:e} m")
    })?;
    let mut aps = Vec::new();
    for sigma in [0.0, 0.01, 0.1] {
        let run = pipeline
            .detect_loops(
                &seq.poses,
                load,
                &LoopOptions {
                    oracle_descriptors: Some(sigma),
                    oracle_matching: true,
                    register: false,
                },
            )
            .map_err(e)?;
        aps.push(run.report.ap);
    }
    check(aps.windows(2).all(|w| w[1] < w[0]), || {
        format!("AP over sigma 0, 0.01, 0.1: {aps:?}")
    })?;
    Ok(format!(
        "AP 1.0, {} loops registered, max r_err {r_err:.1e} deg, max t_err {t_err:.1e} m, AP by sigma {:.3}/{:.3}/{:.3}",
        rep.registration.len(),
        aps[0],
        aps[1],
        aps[2]
    ))
}

fn descriptor_invariants() -> Outcome {
    let e = |e: padloc::Error| e.to_string();
    let mut r = rng(9);
    let mut worst_perm = 0.0f64;
    let mut worst_norm = 0.0f64;
    for trial in 0..50u64 {
        let (f, k, g) = (8, 4, 6);
        let w = VladWeights::init(f, k, g, trial).map_err(e)?;
        let n = r.random_range(1..40);
        let feats = DMatrix::from_fn(n, f, |_, _| r.random_range(-3.0..3.0));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let shuffled = DMatrix::from_fn(n, f, |i, j| feats[(order[i], j)]);
        let a = context_gate(&netvlad(&feats, &w).map_err(e)?, &w).map_err(e)?;
        let b = context_gate(&netvlad(&shuffled, &w).map_err(e)?, &w).map_err(e)?;
        worst_perm = worst_perm.max(
            a.values
                .iter()
                .zip(&b.values)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max),
        );
        for d in [&a, &b] {
            worst_norm = worst_norm.max((d.values.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs());
        }

        let mut zero = w.clone();
        zero.gate.fill(0.0);
        zero.gate_bias.fill(0.0);
        let v = DVector::from_fn(g, |_, _| r.random_range(-2.0..2.0));
        let gated = context_gate(&v, &zero).map_err(e)?;
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let expected: Vec<f64> = v.iter().map(|x| x / norm).collect();
        check(gated.values == expected, || {
            format!("trial {trial}: zero gate {:?} vs {expected:?}", gated.values)
        })?;
    }
    // degenerate input still yields a unit vector
    let w = VladWeights::init(8, 4, 6, 0).map_err(e)?;
    let d = context_gate(&DVector::zeros(6), &w).map_err(e)?;
    let n = d.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    worst_norm = worst_norm.max((n - 1.0).abs());
    check(worst_perm < 1e-9 && worst_norm < 1e-12, || {
        format!("permutation gap {worst_perm:e}, norm err {worst_norm:e}")
    })?;
    Ok(format!(
        "permutation gap {worst_perm:.1e}, norm err {worst_norm:.1e}, zero gate exact"
    ))
}

fn file_round_trips() -> Outcome {
    let e = |e: padloc::Error| e.to_string();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let table = SuperClassTable::default();
    let mut r = rng(10);
    for k in 0..50 {
        let n = r.random_range(0..300);
        let pts = (0..n)
            .map(|_| {
                let c = [0; 3].map(|_| f64::from(r.random_range(-80.0f32..80.0)));
                Point3::new(c[0], c[1], c[2])
            })
            .collect();
        let refl = (0..n).map(|_| f64::from(r.random_range(0.0f32..1.0))).collect();
        let cloud = PointCloud::new(pts).map_err(e)?.with_reflectance(refl).map_err(e)?;
        let bytes = encode_scan(&cloud);
        let path = dir.path().join(format!("{k}.bin"));
        std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
        let back = decode_scan(&std::fs::read(&path).map_err(|e| e.to_string())?).map_err(e)?;
        check(back.cloud == cloud && encode_scan(&back.cloud) == bytes, || {
            format!("scan {k} changed")
        })?;

        let words: Vec<u32> = (0..n).map(|_| r.random()).collect();
        let labels = PanopticLabels::from_words(&words, &table);
        let path = dir.path().join(format!("{k}.label"));
        std::fs::write(&path, encode_labels(&labels)).map_err(|e| e.to_string())?;
        let back = decode_labels(&std::fs::read(&path).map_err(|e| e.to_string())?, Some(n), &table).map_err(e)?;
        check(back == labels && back.to_words() == words, || {
            format!("labels {k} changed")
        })?;

        let poses: Vec<RigidTransform> = (0..r.random_range(0..20))
            .map(|_| RigidTransform::random(&mut r, 500.0))
            .collect();
        let text = format_poses(&poses);
        let path = dir.path().join(format!("{k}.txt"));
        std::fs::write(&path, &text).map_err(|e| e.to_string())?;
        let back = parse_poses(&std::fs::read_to_string(&path).map_err(|e| e.to_string())?).map_err(e)?;
        check(back == poses && format_poses(&back) == text, || {
            format!("poses {k} changed")
        })?;

        let mut tf = TensorFile::new();
        for t in 0..r.random_range(0..5) {
            let dims: Vec<usize> = (0..r.random_range(1..4)).map(|_| r.random_range(0..6)).collect();
            let len = dims.iter().product();
            let data = (0..len).map(|_| f64::from_bits(r.random::<u64>() >> 2)).collect();
            tf.insert(format!("t{t}"), Tensor::new(dims, data).map_err(e)?);
        }
        let path = dir.path().join(format!("{k}.pdlc"));
        tf.write(&path).map_err(e)?;
        let back = TensorFile::read(&path).map_err(e)?;
        let same_bits = tf.iter().zip(back.iter()).all(|((na, a), (nb, b))| {
            na == nb
                && a.dims == b.dims
                && a.data
                    .iter()
                    .map(|x| x.to_bits())
                    .eq(b.data.iter().map(|x| x.to_bits()))
        });
        check(
            same_bits && tf.len() == back.len() && back.encode() == tf.encode(),
            || format!("tensor file {k} changed"),
        )?;
    }
    Ok("50 instances each of scan, label, pose and tensor files".into())
}

fn config_fidelity() -> Outcome {
    let c = RunConfig::default();
    let w = &c.loss_weights;
    let expected = [
        ("n", c.keypoints as f64, 4096.0),
        ("f", c.feature_dim as f64, 640.0),
        ("g", c.descriptor_dim as f64, 256.0),
        ("k", c.clusters as f64, 64.0),
        ("m", w.margin, 0.5),
        ("w_tri", w.w_tri, 1.0),
        ("w_pos", w.w_pos, 1.0),
        ("w_mat", w.w_mat, 0.05),
        ("w_sem", w.w_sem, 0.125),
        ("w_mes", w.w_mes, 0.5),
        ("w_mmo", w.w_mmo, 10.0),
        ("window", c.window as f64, 50.0),
        ("radius", c.radius, 4.0),
    ];
    for (name, got, want) in expected {
        check(got == want, || format!("{name} = {got}, expected {want}"))?;
    }
    let reparsed = RunConfig::from_toml(&c.to_toml()).map_err(|e| e.to_string())?;
    check(reparsed == c, || "default config does not survive TOML".into())?;
    Ok(format!("{} defaults match", expected.len()))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("weighted Kabsch exact recovery", kabsch_recovery),
        ("reflection safety", reflection_safety),
        ("matching simplex invariant", matching_simplex),
        ("confidence metric calibration", metric_calibration),
        ("loss zero cases and naive oracles", loss_zero_cases),
        ("bidirectional symmetry", bidirectional_symmetry),
        ("retrieval metric oracle", metric_oracle),
        ("end-to-end synthetic pipeline", end_to_end),
        ("descriptor invariants", descriptor_invariants),
        ("file format round trips", file_round_trips),
        ("configuration defaults", config_fidelity),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("[{:>2}] PASS {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("[{:>2}] FAIL {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
