//! Keyframe-by-keyframe driver: retrieval, verification, relocalization and pose-graph
//! optimization, serially or with optimization on a worker thread.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread::JoinHandle;
use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::camera::CameraIntrinsics;
use crate::geom::{Correction4, Pose};
use crate::keyframe::{Feature, Keyframe};
use crate::posegraph::{GraphConfig, GraphError, MapFeature, OptReport, PoseGraph, Vertex};
use crate::reloc::{
    build_window_problem, compute_loop_edge, default_odometry_information, optimize_window, Landmark, LoopAttachment,
    LoopEdgeResult, Observation, OdometryFactor, RelocConfig, Term, WindowState,
};
use crate::retrieval::{detect_candidates, BowDatabase, DetectionConfig, RetrievalError, Vocabulary};
use crate::verify::{verify_loop, LoopVerification, VerifyConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("keyframe {0} has more than 65535 features")]
    TooManyFeatures(u64),
    #[error("optimizer thread stopped")]
    Worker,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub camera: CameraIntrinsics,
    pub detection: DetectionConfig,
    pub verify: VerifyConfig,
    pub reloc: RelocConfig,
    pub graph: GraphConfig,
    /// Optimize on a worker thread and reconcile snapshots.
    pub concurrent: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            camera: CameraIntrinsics::default(),
            detection: DetectionConfig::default(),
            verify: VerifyConfig::default(),
            reloc: RelocConfig::default(),
            graph: GraphConfig::default(),
            concurrent: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub retrieval_ms: f64,
    pub verify_ms: f64,
    pub reloc_ms: f64,
    pub optimize_ms: f64,
    pub max_optimize_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopEvent {
    pub query: u64,
    pub candidate: u64,
    pub inliers: usize,
    pub rel_position: Vector3<f64>,
    pub rel_yaw: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub keyframes: usize,
    /// Candidates handed to verification.
    pub attempted: usize,
    /// Candidates passing verification.
    pub verified: usize,
    /// Verified candidates whose relocalization did not fit the loop observations.
    pub reloc_rejected: usize,
    pub accepted: usize,
    pub optimizations: usize,
    pub times: StageTimes,
    pub loops: Vec<LoopEvent>,
}

impl RunReport {
    /// `key=value` lines; timings last so that the rest can be compared verbatim.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let t = &self.times;
        writeln!(s, "keyframes={}", self.keyframes).unwrap();
        writeln!(s, "loops_attempted={}", self.attempted).unwrap();
        writeln!(s, "loops_verified={}", self.verified).unwrap();
        writeln!(s, "loops_reloc_rejected={}", self.reloc_rejected).unwrap();
        writeln!(s, "loops_accepted={}", self.accepted).unwrap();
        writeln!(s, "optimizations={}", self.optimizations).unwrap();
        writeln!(s, "time_retrieval_ms={:.3}", t.retrieval_ms).unwrap();
        writeln!(s, "time_verify_ms={:.3}", t.verify_ms).unwrap();
        writeln!(s, "time_reloc_ms={:.3}", t.reloc_ms).unwrap();
        writeln!(s, "time_optimize_ms={:.3}", t.optimize_ms).unwrap();
        writeln!(s, "time_optimize_max_ms={:.3}", t.max_optimize_ms).unwrap();
        s
    }
}

struct Worker {
    tx: Option<Sender<PoseGraph>>,
    rx: Receiver<(PoseGraph, Result<OptReport, GraphError>)>,
    handle: Option<JoinHandle<()>>,
    busy: bool,
}

impl Worker {
    fn spawn() -> Self {
        let (tx, job_rx) = channel::<PoseGraph>();
        let (done_tx, rx) = channel();
        let handle = std::thread::spawn(move || {
            for mut g in job_rx {
                let r = g.optimize();
                if done_tx.send((g, r)).is_err() {
                    break;
                }
            }
        });
        Self {
            tx: Some(tx),
            rx,
            handle: Some(handle),
            busy: false,
        }
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    vocab: Vocabulary,
    db: BowDatabase,
    graph: PoseGraph,
    recent: VecDeque<Keyframe>,
    recent_sequence: Option<u32>,
    /// Full-precision pixels of keyframes processed in this session; map
    /// vertices only keep them as f32.
    session_uv: BTreeMap<u64, Vec<Vector2<f64>>>,
    report: RunReport,
    worker: Option<Worker>,
    /// Loop edges added since the last optimization started.
    dirty: bool,
}

fn map_features(kf: &Keyframe) -> Result<Vec<MapFeature>, PipelineError> {
    if kf.features.len() > u16::MAX as usize {
        return Err(PipelineError::TooManyFeatures(kf.id));
    }
    Ok(kf
        .features
        .iter()
        .map(|f| MapFeature {
            u: f.uv.x as f32,
            v: f.uv.y as f32,
            descriptor: f.descriptor,
        })
        .collect())
}

/// A map vertex as a verification candidate: stored pixels and descriptors only.
pub fn vertex_keyframe(v: &Vertex) -> Keyframe {
    Keyframe {
        id: v.id,
        timestamp: v.timestamp,
        pose: v.pose(),
        features: v
            .features
            .iter()
            .map(|f| Feature {
                uv: Vector2::new(f.u as f64, f.v as f64),
                descriptor: f.descriptor,
                point: None,
                track: None,
            })
            .collect(),
    }
}

/// Window structure for relocalizing the newest keyframe of `recent` against the
/// verified candidate. Window poses are the odometry poses; landmarks are the
/// front-end tracks with triangulated points, expressed in the newest window frame
/// that observes them.
pub fn build_window(recent: &[Keyframe], ver: &LoopVerification, candidate: &Keyframe, loop_pose: Pose) -> (WindowState, LoopAttachment) {
    let info = default_odometry_information();
    let mut landmarks = Vec::new();
    let mut index: BTreeMap<u64, usize> = BTreeMap::new();
    let mut observations = Vec::new();
    // Newest frames first, so each landmark is anchored in the newest frame seeing it
    // and the loop observations constrain the query pose directly.
    for (f, kf) in recent.iter().enumerate().rev() {
        for feat in &kf.features {
            let (Some(t), Some(p)) = (feat.track, feat.point) else { continue };
            let l = *index.entry(t).or_insert_with(|| {
                landmarks.push(Landmark {
                    anchor: f,
                    point: kf.pose.inverse_transform_point(&p),
                });
                landmarks.len() - 1
            });
            observations.push(Observation {
                frame: f,
                landmark: l,
                uv: feat.uv,
            });
        }
    }
    let query = recent.last().expect("window is not empty");
    let loop_obs = ver
        .inliers
        .iter()
        .filter_map(|m| {
            let t = query.features[m.query].track?;
            Some((*index.get(&t)?, candidate.features[m.candidate].uv))
        })
        .collect();
    let window = WindowState {
        ids: recent.iter().map(|k| k.id).collect(),
        poses: recent.iter().map(|k| k.pose).collect(),
        odometry: recent.windows(2).map(|w| OdometryFactor::between(&w[0].pose, &w[1].pose, info)).collect(),
        landmarks,
        observations,
    };
    (
        window,
        LoopAttachment {
            frame_id: candidate.id,
            pose: loop_pose,
            observations: loop_obs,
        },
    )
}

impl Pipeline {
    pub fn new(vocab: Vocabulary, cfg: PipelineConfig) -> Self {
        let graph = PoseGraph::with_config(cfg.graph.clone());
        let worker = cfg.concurrent.then(Worker::spawn);
        Self {
            cfg,
            vocab,
            db: BowDatabase::new(),
            graph,
            recent: VecDeque::new(),
            recent_sequence: None,
            session_uv: BTreeMap::new(),
            report: RunReport::default(),
            worker,
            dirty: false,
        }
    }

    /// Starts from a prior map: optimizes it once and indexes its keyframes for
    /// retrieval.
    pub fn with_map(map: PoseGraph, vocab: Vocabulary, cfg: PipelineConfig) -> Result<Self, PipelineError> {
        let mut p = Self::new(vocab, cfg);
        p.graph = map;
        if p.graph.is_connected() && p.graph.len() > 1 {
            p.optimize_now()?;
        }
        for v in p.graph.vertices() {
            let descs: Vec<_> = v.features.iter().map(|f| f.descriptor).collect();
            p.db.add(v.id, p.vocab.transform(&descs))?;
        }
        Ok(p)
    }

    pub fn graph(&self) -> &PoseGraph {
        &self.graph
    }

    pub fn report(&self) -> &RunReport {
        &self.report
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    fn optimize_now(&mut self) -> Result<(), PipelineError> {
        let r = self.graph.optimize()?;
        self.report.optimizations += 1;
        self.report.times.optimize_ms += r.elapsed_ms;
        self.report.times.max_optimize_ms = self.report.times.max_optimize_ms.max(r.elapsed_ms);
        Ok(())
    }

    fn poll_worker(&mut self, block: bool) -> Result<(), PipelineError> {
        let Some(w) = self.worker.as_mut() else { return Ok(()) };
        if !w.busy {
            return Ok(());
        }
        let msg = if block {
            Some(w.rx.recv().map_err(|_| PipelineError::Worker)?)
        } else {
            w.rx.try_recv().ok()
        };
        if let Some((snapshot, r)) = msg {
            w.busy = false;
            if let Ok(r) = r {
                self.report.optimizations += 1;
                self.report.times.optimize_ms += r.elapsed_ms;
                self.report.times.max_optimize_ms = self.report.times.max_optimize_ms.max(r.elapsed_ms);
                self.graph.adopt(&snapshot);
            }
        }
        Ok(())
    }

    fn schedule(&mut self) -> Result<(), PipelineError> {
        if !self.dirty || !self.graph.is_connected() {
            return Ok(());
        }
        match self.worker.as_mut() {
            Some(w) => {
                if !w.busy {
                    w.tx.as_ref().ok_or(PipelineError::Worker)?.send(self.graph.clone()).map_err(|_| PipelineError::Worker)?;
                    w.busy = true;
                    self.dirty = false;
                }
            }
            None => {
                self.optimize_now()?;
                self.dirty = false;
            }
        }
        Ok(())
    }

    /// Adds one keyframe and looks for a loop closure for it.
    pub fn process(&mut self, kf: Keyframe, sequence: u32) -> Result<Option<LoopEvent>, PipelineError> {
        self.poll_worker(false)?;
        let vertex = Vertex::new(kf.id, sequence, kf.timestamp, kf.pose, map_features(&kf)?);
        self.graph.add_keyframe(vertex)?;
        self.report.keyframes += 1;

        let t0 = Instant::now();
        let bow = self.vocab.transform(&kf.descriptors());
        let candidates = detect_candidates(&self.db, &bow, &self.cfg.detection);
        self.db.add(kf.id, bow)?;
        self.report.times.retrieval_ms += t0.elapsed().as_secs_f64() * 1e3;
        self.session_uv.insert(kf.id, kf.features.iter().map(|f| f.uv).collect());

        if self.recent_sequence != Some(sequence) {
            self.recent.clear();
            self.recent_sequence = Some(sequence);
        }
        self.recent.push_back(kf);
        while self.recent.len() > self.cfg.reloc.window_size.max(2) {
            self.recent.pop_front();
        }

        let mut event = None;
        for (cand_id, _) in candidates {
            let Some(cand_vertex) = self.graph.vertex(cand_id) else { continue };
            let mut candidate = vertex_keyframe(cand_vertex);
            if let Some(uv) = self.session_uv.get(&cand_id) {
                for (f, uv) in candidate.features.iter_mut().zip(uv) {
                    f.uv = *uv;
                }
            }
            let query = self.recent.back().unwrap();
            self.report.attempted += 1;
            let t1 = Instant::now();
            let ver = verify_loop(query, &candidate, &self.cfg.camera, &self.cfg.verify);
            self.report.times.verify_ms += t1.elapsed().as_secs_f64() * 1e3;
            if !ver.accepted() {
                continue;
            }
            self.report.verified += 1;
            let t2 = Instant::now();
            let edge = self.relocalize(&ver, &candidate);
            self.report.times.reloc_ms += t2.elapsed().as_secs_f64() * 1e3;
            match edge {
                Some(e) => {
                    self.attach_loop(&e, sequence)?;
                    let ev = LoopEvent {
                        query: e.from,
                        candidate: e.to,
                        inliers: e.inliers,
                        rel_position: e.rel_position,
                        rel_yaw: e.rel_yaw,
                    };
                    self.report.loops.push(ev.clone());
                    event = Some(ev);
                    break;
                }
                None => self.report.reloc_rejected += 1,
            }
        }
        self.schedule()?;
        Ok(event)
    }

    /// Relocalizes the current window against the candidate and derives the loop edge.
    fn relocalize(&self, ver: &LoopVerification, candidate: &Keyframe) -> Option<LoopEdgeResult> {
        let recent: Vec<Keyframe> = self.recent.iter().cloned().collect();
        let query = recent.last()?;
        let loop_pose = self.graph.vertex(candidate.id)?.pose();
        let (mut window, attachment) = build_window(&recent, ver, candidate, loop_pose);
        if attachment.observations.is_empty() {
            return None;
        }
        // Odometry frame to map frame, from the PnP estimate of the candidate.
        let pnp = ver.candidate_pose?;
        let d = loop_pose.compose(&pnp.inverse());
        for p in window.poses.iter_mut() {
            *p = d.compose(p);
        }
        let cfg = &self.cfg.reloc;
        if recent.len() < 2 {
            let pose_i = d.compose(&query.pose);
            return Some(compute_loop_edge(query.id, &pose_i, candidate.id, &loop_pose, ver.inliers.len()));
        }
        let problem = build_window_problem(window, Some(attachment), &self.cfg.camera, cfg).ok()?;
        let (out, _) = optimize_window(&problem);
        let mut errs: Vec<f64> = problem
            .terms()
            .into_iter()
            .filter(|t| matches!(t, Term::Loop(_)))
            .filter_map(|t| problem.evaluate(&out.poses, t))
            .map(|(r, _)| r.norm() * cfg.pixel_sigma)
            .collect();
        if errs.is_empty() {
            return None;
        }
        errs.sort_by(f64::total_cmp);
        if errs[errs.len() / 2] > self.cfg.verify.reprojection_threshold_px {
            return None;
        }
        let pose_i = *out.poses.last()?;
        Some(compute_loop_edge(query.id, &pose_i, candidate.id, &loop_pose, ver.inliers.len()))
    }

    fn attach_loop(&mut self, e: &LoopEdgeResult, sequence: u32) -> Result<(), PipelineError> {
        if !self.graph.connected(e.from, e.to) {
            // First link of this sequence into the map: place the whole sequence so
            // that the query sits where the loop edge puts it.
            let target = self.graph.vertex(e.to).ok_or(GraphError::MissingVertex(e.to))?;
            let yaw_q = crate::geom::wrap_angle(target.yaw - e.rel_yaw);
            let q = self.graph.vertex(e.from).ok_or(GraphError::MissingVertex(e.from))?;
            let r = crate::geom::YprAngles::new(yaw_q, q.pitch(), q.roll()).to_rotation();
            let p_q = target.position - r * e.rel_position;
            let c = Correction4::between(&q.position, q.yaw, &p_q, yaw_q);
            self.graph.shift_sequence(sequence, &c);
        }
        self.graph.add_loop_edge(e.from, e.to, e.rel_position, e.rel_yaw)?;
        self.report.accepted += 1;
        self.dirty = true;
        Ok(())
    }

    pub fn run(&mut self, keyframes: impl IntoIterator<Item = Keyframe>, sequence: u32) -> Result<(), PipelineError> {
        for kf in keyframes {
            self.process(kf, sequence)?;
        }
        Ok(())
    }

    /// Waits for in-flight optimization, runs a final one when loops arrived since,
    /// and hands back the graph and report.
    pub fn finish(mut self) -> Result<(PoseGraph, RunReport), PipelineError> {
        self.poll_worker(true)?;
        // Final solve from odometry, so a saved and reloaded map optimizes to the same result.
        if self.graph.loop_edges().next().is_some() && self.graph.is_connected() {
            self.graph.reset_to_odometry();
            self.optimize_now()?;
            self.dirty = false;
        }
        self.worker.take();
        Ok((std::mem::take(&mut self.graph), std::mem::take(&mut self.report)))
    }
}
