//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero if
//! any criterion fails.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use loopmap::camera::{world_to_camera, CameraIntrinsics};
use loopmap::eval::ate;
use loopmap::geom::{wrap_angle, Pose, YprAngles};
use loopmap::imgproc::BriefDescriptor;
use loopmap::pipeline::{Pipeline, PipelineConfig, RunReport};
use loopmap::posegraph::{edge_residual, GraphConfig, MapFeature, PoseGraph, Vertex};
use loopmap::reloc::{
    build_window_problem, default_odometry_information, optimize_window, Landmark, LoopAttachment, Observation,
    OdometryFactor, RelocConfig, RelocProblem, WindowState,
};
use loopmap::retrieval::{bow_score, build_vocabulary, BowDatabase, BowVector, Vocabulary};
use loopmap::sim::{Heading, Scenario, SimConfig};
use loopmap::verify::{pnp_ransac, verify_matches, MatchPair, RansacSettings, VerifyConfig};
use nalgebra::{DMatrix, Matrix4, UnitQuaternion, Vector2, Vector3, Vector4, Vector6};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

/// Vertices whose frozen roll/pitch were found changed after an optimization.
static FROZEN_VIOLATIONS: AtomicUsize = AtomicUsize::new(0);
static FROZEN_CHECKS: AtomicUsize = AtomicUsize::new(0);

/// Frozen pitch/roll must equal the values extracted from the odometry pose they
/// were taken from, and the estimated orientation must differ only in yaw.
fn audit_frozen(g: &PoseGraph) {
    for v in g.vertices() {
        FROZEN_CHECKS.fetch_add(1, Ordering::Relaxed);
        let o = v.odometry().ypr();
        let e = v.pose().ypr();
        let frozen_ok = v.pitch().to_bits() == o.pitch.to_bits() && v.roll().to_bits() == o.roll.to_bits();
        let recomposed_ok = (e.pitch - v.pitch()).abs() < 1e-12 && (e.roll - v.roll()).abs() < 1e-12 && (wrap_angle(e.yaw - v.yaw)).abs() < 1e-12;
        if !(frozen_ok && recomposed_ok) {
            FROZEN_VIOLATIONS.fetch_add(1, Ordering::Relaxed);
        }
    }
}

fn training_vocabulary() -> Vocabulary {
    let s = Scenario::generate(&SimConfig {
        landmarks: 1200,
        seed: 99,
        ..SimConfig::default()
    })
    .unwrap();
    let training: Vec<Vec<BriefDescriptor>> = s.keyframes.iter().map(|k| k.descriptors()).collect();
    build_vocabulary(&training, 10, 3, 7).unwrap()
}

/// 200-keyframe circle, camera facing the landmark field at its center, with the
/// specified drift rates.
fn drift_circle() -> SimConfig {
    SimConfig {
        heading: Heading::Inward,
        keyframes: 200,
        radius: 40.0,
        landmarks: 400,
        landmark_inner: 0.0,
        landmark_outer: 12.0,
        yaw_drift: 0.003,
        position_drift: 0.01,
        pixel_noise: 0.5,
        seed: 0,
        ..SimConfig::default()
    }
}

fn run_pipeline(vocab: &Vocabulary, s: &Scenario, concurrent: bool) -> (PoseGraph, RunReport) {
    let cfg = PipelineConfig {
        concurrent,
        ..PipelineConfig::default()
    };
    let mut p = Pipeline::new(vocab.clone(), cfg);
    p.run(s.keyframes.clone(), s.config.sequence).unwrap();
    let (g, r) = p.finish().unwrap();
    audit_frozen(&g);
    (g, r)
}

fn c1_drift_correction(vocab: &Vocabulary) -> Outcome {
    let s = Scenario::generate(&drift_circle()).unwrap();
    let gt = s.world.trajectory();
    let (g, r) = run_pipeline(vocab, &s, false);
    let pre = ate(&g.odometry_trajectory(), &gt).map_err(|e| e.to_string())?.rmse;
    let post = ate(&g.trajectory(), &gt).map_err(|e| e.to_string())?.rmse;
    // Cold optimize of the whole graph from the odometry estimates.
    let mut cold = PoseGraph::from_bytes(&g.to_bytes().unwrap(), GraphConfig::default()).unwrap();
    let t = Instant::now();
    cold.optimize().map_err(|e| e.to_string())?;
    let cold_ms = t.elapsed().as_secs_f64() * 1e3;
    audit_frozen(&cold);
    let opt_ms = r.times.max_optimize_ms.max(cold_ms);
    let (g2, _) = run_pipeline(vocab, &s, false);
    let deterministic = g2.to_bytes().unwrap() == g.to_bytes().unwrap() && g2.trajectory() == g.trajectory();
    let detail = format!(
        "loops={} pre_ate={pre:.4} post_ate={post:.4} ratio={:.3} optimize_max_ms={opt_ms:.1} deterministic={deterministic}",
        r.accepted,
        post / pre
    );
    if r.accepted >= 1 && post <= 0.1 * pre && post <= 0.05 && opt_ms <= 1000.0 && deterministic {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c2_four_dof_invariance() -> Outcome {
    // Randomized drifted graphs with loops, on top of the audits of every other run.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..20 {
        let cfg = SimConfig {
            keyframes: 60,
            landmarks: 0,
            tilt: 0.3,
            seed: trial,
            ..SimConfig::default()
        };
        let s = Scenario::generate(&cfg).unwrap();
        let mut g = PoseGraph::new();
        for (k, p) in s.track.poses.iter().enumerate() {
            g.add_keyframe(Vertex::new(k as u64, 0, k as f64, *p, Vec::new())).unwrap();
        }
        for _ in 0..5 {
            let i = rng.random_range(30..60);
            let j = rng.random_range(0..i - 10);
            let (pi, pj) = (&s.world.poses[i], &s.world.poses[j]);
            let a = s.track.angles[i];
            let rot = YprAngles::new(s.world.angles[i].yaw, a.pitch, a.roll).to_rotation();
            let rel = rot.transpose() * (pj.position - pi.position);
            g.add_loop_edge(i as u64, j as u64, rel, wrap_angle(s.world.angles[j].yaw - s.world.angles[i].yaw)).unwrap();
        }
        let before: Vec<(u64, u64)> = g.vertices().map(|v| (v.pitch().to_bits(), v.roll().to_bits())).collect();
        g.optimize().map_err(|e| e.to_string())?;
        let after: Vec<(u64, u64)> = g.vertices().map(|v| (v.pitch().to_bits(), v.roll().to_bits())).collect();
        if before != after {
            FROZEN_VIOLATIONS.fetch_add(1, Ordering::Relaxed);
        }
        audit_frozen(&g);
    }
    let bad = FROZEN_VIOLATIONS.load(Ordering::Relaxed);
    let checked = FROZEN_CHECKS.load(Ordering::Relaxed);
    let detail = format!("vertices_checked={checked} violations={bad}");
    if bad == 0 && checked > 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel_err(fd: &DMatrix<f64>, an: &DMatrix<f64>) -> f64 {
    let n = an.norm();
    if n == 0.0 {
        fd.norm()
    } else {
        (fd - an).norm() / n
    }
}

fn graph_jacobian_error(rng: &mut ChaCha8Rng) -> f64 {
    let v3 = |rng: &mut ChaCha8Rng, s: f64| Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
    let pi = v3(rng, 20.0);
    let pj = pi + v3(rng, 5.0);
    let (yi, yj) = (rng.random_range(-3.1..3.1), rng.random_range(-3.1..3.1));
    let (pitch, roll) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
    let rp = v3(rng, 5.0);
    // Yaw residual within 0.5 rad of zero, away from the wrap discontinuity.
    let ry = wrap_angle(yj - yi) - rng.random_range(-0.5..0.5);
    let (_, ji, jj) = edge_residual(&pi, yi, pitch, roll, &pj, yj, &rp, ry);
    let x0 = [pi.x, pi.y, pi.z, yi, pj.x, pj.y, pj.z, yj];
    let f = |x: &[f64; 8]| -> Vector4<f64> {
        edge_residual(&Vector3::new(x[0], x[1], x[2]), x[3], pitch, roll, &Vector3::new(x[4], x[5], x[6]), x[7], &rp, ry).0
    };
    let h = 1e-6;
    let mut fd = Matrix4::zeros();
    let mut fd2 = Matrix4::zeros();
    for c in 0..8 {
        let (mut a, mut b) = (x0, x0);
        a[c] += h;
        b[c] -= h;
        let col = (f(&a) - f(&b)) / (2.0 * h);
        if c < 4 {
            fd.set_column(c, &col);
        } else {
            fd2.set_column(c - 4, &col);
        }
    }
    let d = |m: &Matrix4<f64>| DMatrix::from_iterator(4, 4, m.iter().copied());
    rel_err(&d(&fd), &d(&ji)).max(rel_err(&d(&fd2), &d(&jj)))
}

/// Random three-frame window with a loop frame, cameras looking along body +x.
fn random_window(rng: &mut ChaCha8Rng) -> (WindowState, LoopAttachment) {
    let k = CameraIntrinsics::default();
    let n = 3;
    let base = Pose::from_ypr(
        Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)),
        &YprAngles::new(rng.random_range(-3.0..3.0), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)),
    );
    let jitter = |rng: &mut ChaCha8Rng, i: usize| {
        Pose::from_ypr(
            Vector3::new(0.4 * i as f64, rng.random_range(-0.2..0.2), rng.random_range(-0.1..0.1)),
            &YprAngles::new(rng.random_range(-0.1..0.1), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
        )
    };
    let poses: Vec<Pose> = (0..n).map(|i| base.compose(&jitter(rng, i))).collect();
    let loop_pose = base.compose(&jitter(rng, 1)).compose(&Pose::from_ypr(Vector3::new(-1.0, 0.5, 0.0), &YprAngles::ZERO));
    let mut landmarks = Vec::new();
    let mut observations = Vec::new();
    let mut loop_obs = Vec::new();
    let noise = Normal::new(0.0, 2.0).unwrap();
    for l in 0..12 {
        let anchor = rng.random_range(0..n);
        let point = Vector3::new(rng.random_range(5.0..12.0), rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0));
        landmarks.push(Landmark { anchor, point });
        let pw = poses[anchor].transform_point(&point);
        for (f, pose) in poses.iter().enumerate() {
            if let Some(uv) = k.project(&world_to_camera(pose, &pw)) {
                observations.push(Observation {
                    frame: f,
                    landmark: l,
                    uv: uv + Vector2::new(noise.sample(rng), noise.sample(rng)),
                });
            }
        }
        if let Some(uv) = k.project(&world_to_camera(&loop_pose, &pw)) {
            loop_obs.push((l, uv + Vector2::new(noise.sample(rng), noise.sample(rng))));
        }
    }
    // Odometry measurements off by a few centimeters and milliradians.
    let odometry = poses
        .windows(2)
        .map(|w| {
            let m = w[0].between(&w[1]).compose(&jitter(rng, 0));
            OdometryFactor {
                measurement: m,
                information: default_odometry_information(),
            }
        })
        .collect();
    (
        WindowState {
            ids: (0..n as u64).collect(),
            poses,
            odometry,
            landmarks,
            observations,
        },
        LoopAttachment {
            frame_id: 99,
            pose: loop_pose,
            observations: loop_obs,
        },
    )
}

fn reloc_jacobian_error(rng: &mut ChaCha8Rng) -> Option<f64> {
    let k = CameraIntrinsics::default();
    let (w, a) = random_window(rng);
    if a.observations.is_empty() {
        return None;
    }
    let poses = w.poses.clone();
    let p = build_window_problem(w, Some(a), &k, &RelocConfig::default()).ok()?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for t in p.terms() {
        let Some((_, blocks)) = p.evaluate(&poses, t) else { continue };
        for (f, j) in blocks {
            let mut fd = DMatrix::zeros(j.nrows(), 6);
            for c in 0..6 {
                let mut d = Vector6::zeros();
                d[c] = h;
                let mut plus = poses.clone();
                plus[f] = RelocProblem::perturb(&poses[f], &d);
                let mut minus = poses.clone();
                minus[f] = RelocProblem::perturb(&poses[f], &(-d));
                let (Some((rp, _)), Some((rm, _))) = (p.evaluate(&plus, t), p.evaluate(&minus, t)) else {
                    return None;
                };
                fd.set_column(c, &((rp - rm) / (2.0 * h)));
            }
            worst = worst.max(rel_err(&fd, &j));
        }
    }
    Some(worst)
}

fn c3_jacobians() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let graph_worst = (0..1000).map(|_| graph_jacobian_error(&mut rng)).fold(0.0, f64::max);
    let mut reloc_worst: f64 = 0.0;
    let mut configs = 0;
    while configs < 1000 {
        if let Some(e) = reloc_jacobian_error(&mut rng) {
            reloc_worst = reloc_worst.max(e);
            configs += 1;
        }
    }
    let detail = format!("graph_configs=1000 graph_max_rel={graph_worst:.2e} reloc_configs={configs} reloc_max_rel={reloc_worst:.2e}");
    if graph_worst <= 1e-5 && reloc_worst <= 1e-5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Graph over the odometry of `s` with loop edges measured from ground truth.
fn graph_with_truth_loops(s: &Scenario, odometry: &[Pose], loops: &[(usize, usize)]) -> PoseGraph {
    let mut g = PoseGraph::new();
    for (k, p) in odometry.iter().enumerate() {
        g.add_keyframe(Vertex::new(k as u64, 0, k as f64, *p, Vec::new())).unwrap();
    }
    for &(i, j) in loops {
        let a = s.track.angles[i];
        let rot = YprAngles::new(s.world.angles[i].yaw, a.pitch, a.roll).to_rotation();
        let rel = rot.transpose() * (s.world.poses[j].position - s.world.poses[i].position);
        g.add_loop_edge(i as u64, j as u64, rel, wrap_angle(s.world.angles[j].yaw - s.world.angles[i].yaw)).unwrap();
    }
    g
}

fn c4_fixed_points_and_gauge() -> Outcome {
    let cfg = SimConfig {
        keyframes: 80,
        landmarks: 0,
        tilt: 0.1,
        yaw_drift: 0.0,
        position_drift: 0.0,
        ..SimConfig::default()
    };
    let s = Scenario::generate(&cfg).unwrap();
    let loops = [(70, 3), (60, 10), (79, 0)];
    let mut g = graph_with_truth_loops(&s, &s.world.poses, &loops);
    let before: Vec<(Vector3<f64>, f64)> = g.vertices().map(|v| (v.position, v.yaw)).collect();
    g.optimize().map_err(|e| e.to_string())?;
    audit_frozen(&g);
    let fixed_move = g
        .vertices()
        .zip(&before)
        .map(|(v, (p, y))| (v.position - p).norm().max(wrap_angle(v.yaw - y).abs()))
        .fold(0.0, f64::max);

    let drifted = Scenario::generate(&SimConfig {
        yaw_drift: 0.003,
        position_drift: 0.01,
        seed: 4,
        ..cfg
    })
    .unwrap();
    let mut a = graph_with_truth_loops(&drifted, &drifted.track.poses, &loops);
    a.optimize().map_err(|e| e.to_string())?;
    let t = Pose::from_ypr(Vector3::new(12.0, -7.0, 3.0), &YprAngles::new(1.1, 0.0, 0.0));
    let moved: Vec<Pose> = drifted.track.poses.iter().map(|p| t.compose(p)).collect();
    let mut b = graph_with_truth_loops(&drifted, &moved, &loops);
    b.optimize().map_err(|e| e.to_string())?;
    audit_frozen(&a);
    audit_frozen(&b);
    let gauge = a
        .vertices()
        .zip(b.vertices())
        .map(|(va, vb)| {
            let p = t.transform_point(&va.position);
            (p - vb.position).norm().max(wrap_angle(va.yaw + 1.1 - vb.yaw).abs())
        })
        .fold(0.0, f64::max);
    let detail = format!("zero_residual_max_change={fixed_move:.2e} gauge_max_diff={gauge:.2e}");
    if fixed_move <= 1e-10 && gauge <= 1e-8 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c5_verification_funnel() -> Outcome {
    let cfg = SimConfig {
        laps: 2.0,
        pixel_noise: 0.0,
        seed: 5,
        ..SimConfig::default()
    };
    let s = Scenario::generate(&cfg).unwrap();
    let k = s.world.camera;
    let vcfg = VerifyConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (mut exact, mut funnel_ok, mut pairs) = (0, 0, 0);
    for c in (0..100).step_by(2) {
        // Same place one lap later, one keyframe further along.
        let (cand, query) = (&s.keyframes[c], &s.keyframes[c + 101]);
        let cand_index: BTreeMap<u64, usize> = cand.features.iter().enumerate().map(|(i, f)| (f.track.unwrap(), i)).collect();
        let mut matches: Vec<MatchPair> = query
            .features
            .iter()
            .enumerate()
            .filter_map(|(q, f)| cand_index.get(&f.track.unwrap()).map(|&c| MatchPair { query: q, candidate: c, distance: 0 }))
            .collect();
        let n = matches.len();
        let outliers = (0.3 * n as f64).round() as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..outliers {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        let mut used: std::collections::BTreeSet<usize> = matches.iter().map(|m| m.candidate).collect();
        for &i in &idx[..outliers] {
            // Reassign to a candidate feature of a different landmark.
            loop {
                let c = rng.random_range(0..cand.features.len());
                if cand.features[c].track != query.features[matches[i].query].track {
                    used.remove(&matches[i].candidate);
                    matches[i].candidate = c;
                    matches[i].distance = 64;
                    used.insert(c);
                    break;
                }
            }
        }
        let truth: Vec<bool> = matches.iter().map(|m| query.features[m.query].track == cand.features[m.candidate].track).collect();
        let v = verify_matches(query, cand, matches.clone(), &k, &vcfg);
        pairs += 1;
        let mask: Vec<bool> = matches.iter().map(|m| v.inliers.contains(m)).collect();
        if v.accepted() && mask == truth {
            exact += 1;
        }
        let sub = |a: &[MatchPair], b: &[MatchPair]| a.iter().all(|m| b.contains(m));
        if sub(&v.inliers, &v.fundamental_inliers) && sub(&v.fundamental_inliers, &v.matches) && v.matches == matches {
            funnel_ok += 1;
        }
    }
    let detail = format!("pairs={pairs} exact_masks={exact} funnel_nested={funnel_ok}");
    if pairs == 50 && exact >= 49 && funnel_ok == pairs {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn pnp_trial(rng: &mut ChaCha8Rng, noise: f64) -> Option<(f64, f64)> {
    let k = CameraIntrinsics::default();
    let cam = Pose::new(
        Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-2.0..2.0)),
        UnitQuaternion::from_scaled_axis(Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))),
    );
    let nrm = Normal::new(0.0, noise.max(1e-300)).unwrap();
    let mut points = Vec::new();
    let mut obs = Vec::new();
    while points.len() < 60 {
        let pc = Vector3::new(rng.random_range(-4.0..4.0), rng.random_range(-3.0..3.0), rng.random_range(4.0..12.0));
        let Some(uv) = k.project(&pc) else { continue };
        if !k.contains(&uv, 0.0) {
            continue;
        }
        let jitter = if noise > 0.0 { Vector2::new(nrm.sample(rng), nrm.sample(rng)) } else { Vector2::zeros() };
        points.push(cam.transform_point(&pc));
        obs.push(uv + jitter);
    }
    let r = pnp_ransac(&points, &obs, &k, &RansacSettings::new(3.0, rng.next_u64()));
    let est = r.camera_pose?;
    Some(((est.position - cam.position).norm(), est.orientation.angle_to(&cam.orientation)))
}

fn c6_pnp_accuracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut clean_worst = (0.0f64, 0.0f64);
    let mut failures = 0;
    for _ in 0..100 {
        match pnp_trial(&mut rng, 0.0) {
            Some((p, r)) => clean_worst = (clean_worst.0.max(p), clean_worst.1.max(r)),
            None => failures += 1,
        }
    }
    let mut pos = Vec::new();
    let mut rot = Vec::new();
    for _ in 0..100 {
        match pnp_trial(&mut rng, 0.5) {
            Some((p, r)) => {
                pos.push(p);
                rot.push(r);
            }
            None => failures += 1,
        }
    }
    pos.sort_by(f64::total_cmp);
    rot.sort_by(f64::total_cmp);
    let med = |v: &[f64]| if v.is_empty() { f64::INFINITY } else { v[v.len() / 2] };
    let (mp, mr) = (med(&pos), med(&rot).to_degrees());
    let detail = format!(
        "noise_free_max_m={:.2e} noise_free_max_rad={:.2e} noisy_median_m={mp:.4} noisy_median_deg={mr:.4} failures={failures}",
        clean_worst.0, clean_worst.1
    );
    if failures == 0 && clean_worst.0 <= 1e-6 && clean_worst.1 <= 1e-6 && mp <= 0.01 && mr <= 0.2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn brute_force(db: &BowDatabase, q: &BowVector, exclude_last: usize) -> Vec<(u64, f64)> {
    let frames: Vec<(u64, &BowVector)> = db.frames().collect();
    let limit = frames.len().saturating_sub(exclude_last);
    let mut out: Vec<(u64, f64)> = frames[..limit]
        .iter()
        .map(|(id, v)| (*id, bow_score(q, v)))
        .filter(|(_, s)| *s > 0.0)
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

fn c7_retrieval(vocab: &Vocabulary) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut protos = Vec::new();
    for _ in 0..60 {
        let mut d = [0u8; 32];
        rng.fill_bytes(&mut d);
        protos.push(BriefDescriptor(d));
    }
    let noisy = |rng: &mut ChaCha8Rng, protos: &[BriefDescriptor]| {
        let mut d = protos[rng.random_range(0..protos.len())];
        for _ in 0..rng.random_range(0..20) {
            let b = rng.random_range(0..256);
            d.set_bit(b, !d.bit(b));
        }
        d
    };
    let training: Vec<Vec<BriefDescriptor>> = (0..40).map(|_| (0..50).map(|_| noisy(&mut rng, &protos)).collect()).collect();
    let small = build_vocabulary(&training, 6, 3, 1).unwrap();
    let mut equal = 0;
    for state in 0..100 {
        let mut db = BowDatabase::new();
        for f in 0..rng.random_range(1..60) {
            let descs: Vec<_> = (0..rng.random_range(1..40)).map(|_| noisy(&mut rng, &protos)).collect();
            db.add(1000 * state + f, small.transform(&descs)).unwrap();
        }
        let q = small.transform(&(0..30).map(|_| noisy(&mut rng, &protos)).collect::<Vec<_>>());
        let excl = rng.random_range(0..10);
        let fast = db.query(&q, excl, usize::MAX);
        let slow = brute_force(&db, &q, excl);
        let same = fast.len() == slow.len() && fast.iter().zip(&slow).all(|(a, b)| a.0 == b.0 && a.1.to_bits() == b.1.to_bits());
        if same {
            equal += 1;
        }
    }

    let s = Scenario::generate(&SimConfig {
        laps: 2.0,
        seed: 8,
        ..SimConfig::default()
    })
    .unwrap();
    let mut db = BowDatabase::new();
    let (mut hits, mut queries) = (0, 0);
    for kf in &s.keyframes {
        let v = vocab.transform(&kf.descriptors());
        if kf.id >= 100 {
            queries += 1;
            if db.query(&v, 30, 1).first().map(|r| r.0) == Some(kf.id - 100) {
                hits += 1;
            }
        }
        db.add(kf.id, v).unwrap();
    }
    let detail = format!("index_equals_brute_force={equal}/100 revisit_top1={hits}/{queries}");
    if equal == 100 && hits * 100 >= 95 * queries {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c8_relocalization() -> Outcome {
    let cfg = SimConfig {
        heading: Heading::Inward,
        keyframes: 60,
        landmarks: 200,
        landmark_inner: 0.0,
        landmark_outer: 6.0,
        yaw_drift: 0.0,
        position_drift: 0.0,
        pixel_noise: 0.0,
        ..SimConfig::default()
    };
    let s = Scenario::generate(&cfg).unwrap();
    let k = s.world.camera;
    let recent = &s.keyframes[40..50];
    let loop_kf = &s.keyframes[5];
    let query = recent.last().unwrap();
    let by_track: BTreeMap<u64, usize> = loop_kf.features.iter().enumerate().map(|(i, f)| (f.track.unwrap(), i)).collect();
    let ver = loopmap::verify::LoopVerification {
        candidate: loop_kf.id,
        matches: Vec::new(),
        fundamental_inliers: Vec::new(),
        inliers: query
            .features
            .iter()
            .enumerate()
            .filter_map(|(q, f)| by_track.get(&f.track.unwrap()).map(|&c| MatchPair { query: q, candidate: c, distance: 0 }))
            .collect(),
        candidate_pose: None,
        rejection: None,
    };
    let (window, attachment) = loopmap::pipeline::build_window(recent, &ver, loop_kf, s.world.poses[5]);
    let rcfg = RelocConfig::default();
    let truth: Vec<Pose> = s.world.poses[40..50].to_vec();

    let consistent = build_window_problem(window.clone(), Some(attachment.clone()), &k, &rcfg).map_err(|e| e.to_string())?;
    let (out, _) = optimize_window(&consistent);
    let fixed = out
        .poses
        .iter()
        .zip(&truth)
        .map(|(a, b)| (a.position - b.position).norm().max(a.orientation.angle_to(&b.orientation)))
        .fold(0.0, f64::max);

    let mut shifted = window.clone();
    for p in shifted.poses.iter_mut() {
        *p = Pose::new(p.position + Vector3::new(1.0, 0.0, 0.0), p.orientation);
    }
    let loop_before = attachment.pose;
    let problem = build_window_problem(shifted, Some(attachment), &k, &rcfg).map_err(|e| e.to_string())?;
    let (out, _) = optimize_window(&problem);
    let err = out.poses.iter().zip(&truth).map(|(a, b)| (a.position - b.position).norm()).fold(0.0, f64::max);
    let loop_after = problem.attachment().unwrap().pose;
    let untouched = loop_after.position == loop_before.position && loop_after.orientation == loop_before.orientation;
    let detail = format!("consistent_max_change={fixed:.2e} offset_window_max_err_m={err:.2e} loop_pose_unchanged={untouched}");
    if fixed <= 1e-10 && err <= 1e-3 && untouched {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c9_persistence(vocab: &Vocabulary) -> Outcome {
    let s = Scenario::generate(&SimConfig {
        keyframes: 120,
        ..drift_circle()
    })
    .unwrap();
    let (g, _) = run_pipeline(vocab, &s, false);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("map.vpg1");
    g.save(&path).map_err(|e| e.to_string())?;
    let loaded = PoseGraph::load(&path, GraphConfig::default()).map_err(|e| e.to_string())?;
    let fields_equal = g.len() == loaded.len()
        && g.fixed() == loaded.fixed()
        && g.vertices().zip(loaded.vertices()).all(|(a, b)| {
            a.id == b.id && a.sequence == b.sequence && a.odometry() == b.odometry() && a.features == b.features
        });
    let mut la: Vec<_> = g.loop_edges().map(|e| (e.from, e.to, e.rel_position, e.rel_yaw)).collect();
    let mut lb: Vec<_> = loaded.loop_edges().map(|e| (e.from, e.to, e.rel_position, e.rel_yaw)).collect();
    la.sort_by_key(|e| (e.0, e.1));
    lb.sort_by_key(|e| (e.0, e.1));
    let loops_equal = la == lb;
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let idempotent = loaded.to_bytes().map_err(|e| e.to_string())? == bytes;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let features: Vec<MapFeature> = (0..500)
        .map(|_| {
            let mut d = [0u8; 32];
            rng.fill_bytes(&mut d);
            MapFeature {
                u: rng.random_range(0.0..640.0),
                v: rng.random_range(0.0..480.0),
                descriptor: BriefDescriptor(d),
            }
        })
        .collect();
    let mut two = PoseGraph::new();
    two.add_keyframe(Vertex::new(0, 0, 0.0, Pose::identity(), Vec::new())).unwrap();
    let p1 = Pose::from_ypr(Vector3::new(1.0, 0.0, 0.0), &YprAngles::ZERO);
    two.add_keyframe(Vertex::new(1, 0, 1.0, p1, features)).unwrap();
    two.add_loop_edge(1, 0, Vector3::new(-1.0, 0.0, 0.0), 0.0).unwrap();
    let mut one = PoseGraph::new();
    one.add_keyframe(Vertex::new(0, 0, 0.0, Pose::identity(), Vec::new())).unwrap();
    let record = two.to_bytes().unwrap().len() - one.to_bytes().unwrap().len();
    let detail = format!("fields_equal={fields_equal} loops_equal={loops_equal} resave_identical={idempotent} record_500_features_bytes={record}");
    if fields_equal && loops_equal && idempotent && (16_000..=21_000).contains(&record) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c10_map_merging(vocab: &Vocabulary) -> Outcome {
    let a = Scenario::generate(&drift_circle()).unwrap();
    let b = Scenario::generate(&SimConfig {
        keyframes: 120,
        radius: 30.0,
        center: Vector2::new(4.0, 2.0),
        seed: 11,
        first_id: 1000,
        sequence: 1,
        origin_at_start: true,
        ..drift_circle()
    })
    .unwrap();
    let (ga, _) = run_pipeline(vocab, &a, false);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("a.vpg1");
    ga.save(&path).map_err(|e| e.to_string())?;
    let prior = PoseGraph::load(&path, GraphConfig::default()).map_err(|e| e.to_string())?;
    let mut p = Pipeline::with_map(prior, vocab.clone(), PipelineConfig::default()).map_err(|e| e.to_string())?;
    audit_frozen(p.graph());
    p.run(b.keyframes.clone(), 1).map_err(|e| e.to_string())?;
    let (g, r) = p.finish().map_err(|e| e.to_string())?;
    audit_frozen(&g);
    let mut gt = a.world.trajectory();
    gt.extend(b.world.trajectory());
    let connected = g.is_connected() && g.sequences().len() == 2;
    let cross = g
        .loop_edges()
        .filter(|e| g.vertex(e.from).unwrap().sequence != g.vertex(e.to).unwrap().sequence)
        .count();
    let post = ate(&g.trajectory(), &gt).map_err(|e| e.to_string())?.rmse;
    let detail = format!("connected={connected} cross_sequence_loops={cross} loops_b={} merged_ate={post:.4}", r.accepted);
    if connected && cross > 0 && post <= 0.08 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c11_wrong_loop(s: &Scenario) -> Outcome {
    let gt = s.world.trajectory();
    let loops: Vec<(usize, usize)> = (1..=10).map(|j| (19 + 18 * j, 0)).collect();
    let mut clean = graph_with_truth_loops(s, &s.track.poses, &loops);
    clean.optimize().map_err(|e| e.to_string())?;
    audit_frozen(&clean);
    let clean_ate = ate(&clean.trajectory(), &gt).map_err(|e| e.to_string())?.rmse;
    let mut adv = graph_with_truth_loops(s, &s.track.poses, &loops);
    // Claims keyframes 120 and 60, on opposite sides of the circle, coincide.
    adv.add_loop_edge(120, 60, Vector3::zeros(), 0.0).unwrap();
    adv.optimize().map_err(|e| e.to_string())?;
    audit_frozen(&adv);
    let adv_ate = ate(&adv.trajectory(), &gt).map_err(|e| e.to_string())?.rmse;
    let detail = format!("ate_clean={clean_ate:.4} ate_with_wrong_loop={adv_ate:.4} ratio={:.2}", adv_ate / clean_ate);
    if adv_ate <= 2.0 * clean_ate {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c12_downsampling(vocab: &Vocabulary) -> Outcome {
    let s = Scenario::generate(&drift_circle()).unwrap();
    let gt = s.world.trajectory();
    let (g, _) = run_pipeline(vocab, &s, false);
    let pre = ate(&g.odometry_trajectory(), &gt).map_err(|e| e.to_string())?.rmse;
    let loop_ends: std::collections::BTreeSet<u64> = g.loop_edges().flat_map(|e| [e.from, e.to]).collect();
    let mut d = g.clone();
    let removed = d.downsample(0.3, 0.2);
    let kept_loops = loop_ends.iter().all(|id| d.vertex(*id).is_some());
    // Composition oracle: each new sequential edge equals the odometry composition
    // across the removed keyframes between its endpoints.
    let mut worst: f64 = 0.0;
    for e in d.edges().iter().filter(|e| e.kind == loopmap::posegraph::EdgeKind::Sequential) {
        let (i, j) = (e.from as usize, e.to as usize);
        let mut acc = s.track.poses[i];
        for k in i..j {
            acc = acc.compose(&s.track.relative[k]);
        }
        let a = s.track.poses[i].ypr();
        let rel = s.track.poses[i].rotation().transpose() * (acc.position - s.track.poses[i].position);
        let ry = wrap_angle(acc.ypr().yaw - a.yaw);
        worst = worst.max((rel - e.rel_position).norm()).max(wrap_angle(ry - e.rel_yaw).abs());
    }
    d.optimize().map_err(|e| e.to_string())?;
    audit_frozen(&d);
    let post = ate(&d.trajectory(), &gt).map_err(|e| e.to_string())?.rmse;
    let detail = format!(
        "removed={} remaining={} loop_keyframes_kept={kept_loops} restitch_max_err={worst:.2e} pre_ate={pre:.4} post_ate={post:.4} ratio={:.3}",
        removed.len(),
        d.len(),
        post / pre
    );
    if !removed.is_empty() && kept_loops && worst <= 1e-9 && post <= 0.1 * pre && post <= 0.05 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let vocab = training_vocabulary();
    let wrong_loop_scene = Scenario::generate(&drift_circle()).unwrap();
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "drift correction", c1_drift_correction(&vocab)),
        (3, "jacobian correctness", c3_jacobians()),
        (4, "fixed points and gauge", c4_fixed_points_and_gauge()),
        (5, "two-step verification funnel", c5_verification_funnel()),
        (6, "pnp accuracy", c6_pnp_accuracy()),
        (7, "retrieval correctness", c7_retrieval(&vocab)),
        (8, "relocalization", c8_relocalization()),
        (9, "map persistence", c9_persistence(&vocab)),
        (10, "map merging", c10_map_merging(&vocab)),
        (11, "robustness to wrong loops", c11_wrong_loop(&wrong_loop_scene)),
        (12, "downsampling", c12_downsampling(&vocab)),
    ];
    // Runs last so that it covers every optimization above.
    results.push((2, "4-dof invariance", c2_four_dof_invariance()));
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, r) in &results {
        match r {
            Ok(d) => println!("criterion {n:>2} {name}: PASS {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL {d}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
