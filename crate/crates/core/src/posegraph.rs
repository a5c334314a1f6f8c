//! 4-DOF pose graph.
//!
//! Vertices optimize position and yaw only; roll and pitch come from odometry and stay
//! frozen. Sequential edges link each keyframe to a few predecessors of the same
//! sequence, loop edges link a keyframe to a recognized place (possibly in another
//! sequence, which is how maps get merged).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DVector, Matrix4, Vector3, Vector4};
use thiserror::Error;

use crate::binio::{ByteReader, Truncated};
use crate::geom::{quat_to_ypr, rot_x, rot_y, rot_z, rot_z_derivative, wrap_angle, Correction4, Pose, YprAngles};
use crate::imgproc::BriefDescriptor;
use crate::solver::{huber, levenberg_marquardt, LeastSquares, Linearization, LmReport, LmSettings, NormalMatrix, SparseSymmetric};

const MAP_MAGIC: &[u8; 4] = b"VPG1";
const MAP_VERSION: u16 = 1;
const NO_VERTEX: u64 = u64::MAX;
pub const MAP_HEADER_LEN: usize = 22;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("vertex {0} already exists")]
    DuplicateId(u64),
    #[error("vertex {0} does not exist")]
    MissingVertex(u64),
    #[error("edge from vertex {0} to itself")]
    SelfLoop(u64),
    #[error("graph has {} components: {}", .components.len(), summarize(.components))]
    Disconnected { components: Vec<Vec<u64>> },
}

fn summarize(components: &[Vec<u64>]) -> String {
    components
        .iter()
        .map(|c| match (c.first(), c.last()) {
            (Some(a), Some(b)) => format!("[{a}..{b}] ({} vertices)", c.len()),
            _ => "[]".into(),
        })
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Error)]
pub enum MapError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a map file (bad magic)")]
    BadMagic,
    #[error("unsupported map version {0}")]
    UnsupportedVersion(u16),
    #[error("map file is truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("map file is inconsistent: {0}")]
    Corrupt(String),
    #[error("keyframe {id} has {count} features, at most 65535 can be stored")]
    TooManyFeatures { id: u64, count: usize },
}

impl From<Truncated> for MapError {
    fn from(_: Truncated) -> Self {
        MapError::Truncated
    }
}

/// 2D observation and descriptor kept with a vertex for later relocalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapFeature {
    pub u: f32,
    pub v: f32,
    pub descriptor: BriefDescriptor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vertex {
    pub id: u64,
    pub sequence: u32,
    /// Seconds. Not persisted; loaded vertices use their id.
    pub timestamp: f64,
    pub position: Vector3<f64>,
    pub yaw: f64,
    pitch: f64,
    roll: f64,
    odometry: Pose,
    pub features: Vec<MapFeature>,
}

impl Vertex {
    /// A vertex whose estimate starts at the odometry pose.
    pub fn new(id: u64, sequence: u32, timestamp: f64, odometry: Pose, features: Vec<MapFeature>) -> Self {
        let odometry = Pose::new(odometry.position, odometry.orientation);
        let a = quat_to_ypr(&odometry.orientation);
        Self {
            id,
            sequence,
            timestamp,
            position: odometry.position,
            yaw: a.yaw,
            pitch: a.pitch,
            roll: a.roll,
            odometry,
            features,
        }
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn roll(&self) -> f64 {
        self.roll
    }

    pub fn odometry(&self) -> &Pose {
        &self.odometry
    }

    pub fn angles(&self) -> YprAngles {
        YprAngles::new(self.yaw, self.pitch, self.roll)
    }

    /// Current estimate with the frozen roll and pitch.
    pub fn pose(&self) -> Pose {
        Pose::from_ypr(self.position, &self.angles())
    }

    fn apply(&mut self, c: &Correction4) {
        self.position = c.apply_point(&self.position);
        self.yaw = wrap_angle(self.yaw + c.yaw);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    Sequential,
    Loop,
}

/// Relative position in the frame of `from` plus relative yaw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub from: u64,
    pub to: u64,
    pub kind: EdgeKind,
    pub rel_position: Vector3<f64>,
    pub rel_yaw: f64,
}

/// Relative measurement between two odometry poses, expressed in the frame of `a`.
pub fn relative_measurement(a: &Pose, b: &Pose) -> (Vector3<f64>, f64) {
    (
        a.rotation().transpose() * (b.position - a.position),
        wrap_angle(quat_to_ypr(&b.orientation).yaw - quat_to_ypr(&a.orientation).yaw),
    )
}

/// Edge residual and its Jacobians with respect to `[p_i, yaw_i]` and `[p_j, yaw_j]`.
#[allow(clippy::too_many_arguments)]
pub fn edge_residual(
    p_i: &Vector3<f64>,
    yaw_i: f64,
    pitch_i: f64,
    roll_i: f64,
    p_j: &Vector3<f64>,
    yaw_j: f64,
    rel_position: &Vector3<f64>,
    rel_yaw: f64,
) -> (Vector4<f64>, Matrix4<f64>, Matrix4<f64>) {
    let rp = rot_y(pitch_i) * rot_x(roll_i);
    let rt = (rot_z(yaw_i) * rp).transpose();
    let d = p_j - p_i;
    let r3 = rt * d - rel_position;
    let r = Vector4::new(r3.x, r3.y, r3.z, wrap_angle(yaw_j - yaw_i - rel_yaw));
    let dyaw = rp.transpose() * rot_z_derivative(yaw_i).transpose() * d;
    let mut ji = Matrix4::zeros();
    ji.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rt));
    ji.fixed_view_mut::<3, 1>(0, 3).copy_from(&dyaw);
    ji[(3, 3)] = -1.0;
    let mut jj = Matrix4::zeros();
    jj.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    jj[(3, 3)] = 1.0;
    (r, ji, jj)
}

/// Residual of `e` between `vi` (its `from`) and `vj` (its `to`).
pub fn residual_4dof(vi: &Vertex, vj: &Vertex, e: &Edge) -> Vector4<f64> {
    edge_residual(&vi.position, vi.yaw, vi.pitch, vi.roll, &vj.position, vj.yaw, &e.rel_position, e.rel_yaw).0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphConfig {
    /// Sequential edges per new keyframe.
    pub seq_connect: usize,
    pub huber_delta: f64,
    pub lm: LmSettings,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            seq_connect: 4,
            huber_delta: 1.0,
            lm: LmSettings::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptReport {
    pub lm: LmReport,
    pub elapsed_ms: f64,
    pub vertices: usize,
    pub edges: usize,
}

#[derive(Clone, Debug, Default)]
pub struct PoseGraph {
    pub config: GraphConfig,
    vertices: BTreeMap<u64, Vertex>,
    edges: Vec<Edge>,
    fixed: Option<u64>,
    next_id: u64,
    /// Latest odometry-to-graph correction per sequence.
    drift: BTreeMap<u32, Correction4>,
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_config(config: GraphConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn fixed(&self) -> Option<u64> {
        self.fixed
    }

    /// Smallest id not yet handed out.
    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn vertex(&self, id: u64) -> Option<&Vertex> {
        self.vertices.get(&id)
    }

    /// Mutable access to the estimate; frozen angles and odometry stay read-only.
    pub fn vertex_mut(&mut self, id: u64) -> Option<&mut Vertex> {
        self.vertices.get_mut(&id)
    }

    /// Vertices in id order.
    pub fn vertices(&self) -> impl Iterator<Item = &Vertex> {
        self.vertices.values()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn loop_edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(|e| e.kind == EdgeKind::Loop)
    }

    pub fn sequences(&self) -> BTreeSet<u32> {
        self.vertices.values().map(|v| v.sequence).collect()
    }

    pub fn drift(&self, sequence: u32) -> Correction4 {
        self.drift.get(&sequence).copied().unwrap_or_default()
    }

    /// Inserts a vertex, initializing its estimate by the sequence's current drift
    /// correction, and links it to its predecessors in the same sequence.
    pub fn add_keyframe(&mut self, mut v: Vertex) -> Result<u64, GraphError> {
        if self.vertices.contains_key(&v.id) {
            return Err(GraphError::DuplicateId(v.id));
        }
        let c = self.drift(v.sequence);
        v.position = c.apply_point(&v.odometry.position);
        v.yaw = wrap_angle(quat_to_ypr(&v.odometry.orientation).yaw + c.yaw);
        let preds: Vec<u64> = self
            .vertices
            .range(..v.id)
            .rev()
            .filter(|(_, p)| p.sequence == v.sequence)
            .take(self.config.seq_connect)
            .map(|(&id, _)| id)
            .collect();
        for p in preds.into_iter().rev() {
            let (rel_position, rel_yaw) = relative_measurement(&self.vertices[&p].odometry, &v.odometry);
            self.edges.push(Edge {
                from: p,
                to: v.id,
                kind: EdgeKind::Sequential,
                rel_position,
                rel_yaw,
            });
        }
        let id = v.id;
        if self.fixed.is_none() {
            self.fixed = Some(id);
        }
        self.next_id = self.next_id.max(id + 1);
        self.vertices.insert(id, v);
        Ok(id)
    }

    pub fn add_loop_edge(&mut self, from: u64, to: u64, rel_position: Vector3<f64>, rel_yaw: f64) -> Result<(), GraphError> {
        if from == to {
            return Err(GraphError::SelfLoop(from));
        }
        for id in [from, to] {
            if !self.vertices.contains_key(&id) {
                return Err(GraphError::MissingVertex(id));
            }
        }
        self.edges.push(Edge {
            from,
            to,
            kind: EdgeKind::Loop,
            rel_position,
            rel_yaw,
        });
        Ok(())
    }

    /// Connected components (vertex ids, ascending), ordered by their smallest id.
    pub fn components(&self) -> Vec<Vec<u64>> {
        let ids: Vec<u64> = self.vertices.keys().copied().collect();
        let index: BTreeMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut parent: Vec<usize> = (0..ids.len()).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for e in &self.edges {
            let a = find(&mut parent, index[&e.from]);
            let b = find(&mut parent, index[&e.to]);
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
        let mut groups: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
        for (i, &id) in ids.iter().enumerate() {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(id);
        }
        groups.into_values().collect()
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() <= 1
    }

    /// Whether `a` and `b` are linked by some chain of edges.
    pub fn connected(&self, a: u64, b: u64) -> bool {
        self.components().iter().any(|c| c.binary_search(&a).is_ok() && c.binary_search(&b).is_ok())
    }

    /// Levenberg-Marquardt over position and yaw of every vertex but the fixed one.
    pub fn optimize(&mut self) -> Result<OptReport, GraphError> {
        let start = Instant::now();
        let components = self.components();
        if components.len() > 1 {
            return Err(GraphError::Disconnected { components });
        }
        let ids: Vec<u64> = self.vertices.keys().copied().collect();
        let index: BTreeMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut blocks = vec![None; ids.len()];
        let mut nvar = 0;
        for (i, id) in ids.iter().enumerate() {
            if Some(*id) != self.fixed {
                blocks[i] = Some(nvar);
                nvar += 1;
            }
        }
        let mut edges: Vec<GraphTerm> = self
            .edges
            .iter()
            .map(|e| GraphTerm {
                i: index[&e.from],
                j: index[&e.to],
                rel_position: e.rel_position,
                rel_yaw: e.rel_yaw,
                robust: e.kind == EdgeKind::Loop,
            })
            .collect();
        // Insertion order must not change the floating-point result.
        edges.sort_by_key(|t| (t.robust, t.i, t.j));
        let problem = GraphProblem {
            frozen: ids.iter().map(|id| (self.vertices[id].pitch, self.vertices[id].roll)).collect(),
            blocks,
            nvar,
            edges,
            delta: self.config.huber_delta,
        };
        let initial: Vec<(Vector3<f64>, f64)> = ids.iter().map(|id| (self.vertices[id].position, self.vertices[id].yaw)).collect();
        let (state, lm) = levenberg_marquardt(&problem, initial, &self.config.lm);
        for (id, (p, yaw)) in ids.iter().zip(state) {
            let v = self.vertices.get_mut(id).unwrap();
            v.position = p;
            v.yaw = wrap_angle(yaw);
        }
        self.update_drift();
        Ok(OptReport {
            lm,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
            vertices: ids.len(),
            edges: self.edges.len(),
        })
    }

    /// Puts every estimate back on its odometry pose, the state a loaded map starts from.
    pub fn reset_to_odometry(&mut self) {
        for v in self.vertices.values_mut() {
            v.position = v.odometry.position;
            v.yaw = quat_to_ypr(&v.odometry.orientation).yaw;
        }
        self.drift.clear();
    }

    fn update_drift(&mut self) {
        let mut last: BTreeMap<u32, &Vertex> = BTreeMap::new();
        for v in self.vertices.values() {
            last.insert(v.sequence, v);
        }
        self.drift = last
            .into_iter()
            .map(|(s, v)| {
                let odo_yaw = quat_to_ypr(&v.odometry.orientation).yaw;
                (s, Correction4::between(&v.odometry.position, odo_yaw, &v.position, v.yaw))
            })
            .collect();
    }

    /// Moves every vertex of `sequence` by `c` and records it as that sequence's drift.
    pub fn shift_sequence(&mut self, sequence: u32, c: &Correction4) {
        for v in self.vertices.values_mut().filter(|v| v.sequence == sequence) {
            v.apply(c);
        }
        let d = c.then(&self.drift(sequence));
        self.drift.insert(sequence, d);
    }

    /// Applies `c` to every vertex added after `anchor` in the anchor's sequence.
    pub fn propagate_correction(&mut self, anchor: u64, c: &Correction4) -> Result<(), GraphError> {
        let seq = self.vertices.get(&anchor).ok_or(GraphError::MissingVertex(anchor))?.sequence;
        for (_, v) in self.vertices.range_mut(anchor + 1..) {
            if v.sequence == seq {
                v.apply(c);
            }
        }
        Ok(())
    }

    /// Takes the estimates of an optimized snapshot of this graph. Vertices added since
    /// the snapshot follow the correction of the newest snapshot vertex of their sequence.
    pub fn adopt(&mut self, optimized: &PoseGraph) {
        let mut anchors: BTreeMap<u32, u64> = BTreeMap::new();
        for v in optimized.vertices.values() {
            anchors.insert(v.sequence, v.id);
        }
        let mut corrections = Vec::new();
        for (&seq, &anchor) in &anchors {
            let (Some(now), Some(opt)) = (self.vertices.get(&anchor), optimized.vertices.get(&anchor)) else {
                continue;
            };
            corrections.push((seq, anchor, Correction4::between(&now.position, now.yaw, &opt.position, opt.yaw)));
        }
        for v in optimized.vertices.values() {
            if let Some(live) = self.vertices.get_mut(&v.id) {
                live.position = v.position;
                live.yaw = v.yaw;
            }
        }
        for (seq, anchor, c) in corrections {
            let _ = self.propagate_correction(anchor, &c);
            let d = c.then(&self.drift(seq));
            self.drift.insert(seq, d);
        }
    }

    /// Adds all of `other`. Ids clashing with this graph are shifted above its counter,
    /// clashing sequence tags above its largest tag. Returns the id mapping.
    pub fn merge(&mut self, other: &PoseGraph) -> BTreeMap<u64, u64> {
        let clash = other.vertices.keys().any(|id| self.vertices.contains_key(id));
        let id_offset = match (clash, other.vertices.keys().next()) {
            (true, Some(&min)) => self.next_id - min,
            _ => 0,
        };
        let ours = self.sequences();
        let seq_offset = if other.sequences().iter().any(|s| ours.contains(s)) {
            ours.last().map_or(0, |s| s + 1)
        } else {
            0
        };
        let map: BTreeMap<u64, u64> = other.vertices.keys().map(|&id| (id, id + id_offset)).collect();
        for v in other.vertices.values() {
            let mut v = v.clone();
            v.id = map[&v.id];
            v.sequence += seq_offset;
            self.next_id = self.next_id.max(v.id + 1);
            self.vertices.insert(v.id, v);
        }
        for e in &other.edges {
            self.edges.push(Edge {
                from: map[&e.from],
                to: map[&e.to],
                ..*e
            });
        }
        for (&s, c) in &other.drift {
            self.drift.insert(s + seq_offset, *c);
        }
        if self.fixed.is_none() {
            self.fixed = other.fixed.map(|f| map[&f]);
        }
        map
    }

    fn rebuild_sequential_edges(&mut self) {
        self.edges.retain(|e| e.kind == EdgeKind::Loop);
        let mut chains: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
        for v in self.vertices.values() {
            chains.entry(v.sequence).or_default().push(v.id);
        }
        let mut seq_edges = Vec::new();
        for chain in chains.values() {
            for (k, &j) in chain.iter().enumerate() {
                for &i in &chain[k.saturating_sub(self.config.seq_connect)..k] {
                    let (rel_position, rel_yaw) = relative_measurement(&self.vertices[&i].odometry, &self.vertices[&j].odometry);
                    seq_edges.push(Edge {
                        from: i,
                        to: j,
                        kind: EdgeKind::Sequential,
                        rel_position,
                        rel_yaw,
                    });
                }
            }
        }
        seq_edges.sort_by_key(|e| (e.to, e.from));
        seq_edges.append(&mut self.edges);
        self.edges = seq_edges;
    }

    /// Removes keyframes too close in position or yaw to the previous kept keyframe of
    /// their sequence. Loop-edge endpoints and the fixed vertex stay. Sequential edges
    /// are rebuilt over the survivors.
    pub fn downsample(&mut self, dist_thresh: f64, yaw_thresh: f64) -> Vec<u64> {
        let in_loop: BTreeSet<u64> = self.loop_edges().flat_map(|e| [e.from, e.to]).collect();
        let mut last_kept: BTreeMap<u32, (Vector3<f64>, f64)> = BTreeMap::new();
        let mut removed = Vec::new();
        for v in self.vertices.values() {
            let yaw = quat_to_ypr(&v.pose().orientation).yaw;
            let keep = match last_kept.get(&v.sequence) {
                None => true,
                Some((p, y)) => {
                    in_loop.contains(&v.id)
                        || Some(v.id) == self.fixed
                        || !((v.position - p).norm() < dist_thresh || wrap_angle(yaw - y).abs() < yaw_thresh)
                }
            };
            if keep {
                last_kept.insert(v.sequence, (v.position, yaw));
            } else {
                removed.push(v.id);
            }
        }
        if removed.is_empty() {
            return removed;
        }
        for id in &removed {
            self.vertices.remove(id);
        }
        self.rebuild_sequential_edges();
        removed
    }

    /// Estimated trajectory `(timestamp, pose)` in id order.
    pub fn trajectory(&self) -> Vec<(f64, Pose)> {
        self.vertices.values().map(|v| (v.timestamp, v.pose())).collect()
    }

    pub fn odometry_trajectory(&self) -> Vec<(f64, Pose)> {
        self.vertices.values().map(|v| (v.timestamp, v.odometry)).collect()
    }

    /// Map file bytes. Each vertex stores its odometry pose, features and most recent
    /// outgoing loop edge.
    pub fn to_bytes(&self) -> Result<Vec<u8>, MapError> {
        let mut last_loop: BTreeMap<u64, &Edge> = BTreeMap::new();
        for e in self.loop_edges() {
            last_loop.insert(e.from, e);
        }
        let mut payload = Vec::new();
        for v in self.vertices.values() {
            if v.features.len() > u16::MAX as usize {
                return Err(MapError::TooManyFeatures {
                    id: v.id,
                    count: v.features.len(),
                });
            }
            payload.extend_from_slice(&v.id.to_le_bytes());
            for x in v.odometry.position.iter() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
            let q = v.odometry.orientation.quaternion();
            for x in [q.w, q.i, q.j, q.k] {
                payload.extend_from_slice(&x.to_le_bytes());
            }
            payload.extend_from_slice(&v.sequence.to_le_bytes());
            match last_loop.get(&v.id) {
                Some(e) => {
                    payload.push(1);
                    payload.extend_from_slice(&e.to.to_le_bytes());
                    for x in e.rel_position.iter() {
                        payload.extend_from_slice(&x.to_le_bytes());
                    }
                    payload.extend_from_slice(&e.rel_yaw.to_le_bytes());
                }
                None => payload.push(0),
            }
            payload.extend_from_slice(&(v.features.len() as u16).to_le_bytes());
            for f in &v.features {
                payload.extend_from_slice(&f.u.to_le_bytes());
                payload.extend_from_slice(&f.v.to_le_bytes());
                payload.extend_from_slice(&f.descriptor.0);
            }
        }
        let mut out = Vec::with_capacity(MAP_HEADER_LEN + payload.len());
        out.extend_from_slice(MAP_MAGIC);
        out.extend_from_slice(&MAP_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.vertices.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.fixed.unwrap_or(NO_VERTEX).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Rebuilds a graph from map bytes: sequential edges are recomputed from the stored
    /// odometry poses, loop edges come from the stored loop fields.
    pub fn from_bytes(bytes: &[u8], config: GraphConfig) -> Result<Self, MapError> {
        let mut r = ByteReader::new(bytes);
        if &r.array::<4>()? != MAP_MAGIC {
            return Err(MapError::BadMagic);
        }
        let version = r.u16()?;
        if version != MAP_VERSION {
            return Err(MapError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let fixed = r.u64()?;
        let stored = r.u32()?;
        let payload = &bytes[MAP_HEADER_LEN..];
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(MapError::Checksum { stored, computed });
        }
        let mut g = PoseGraph::with_config(config);
        let mut loops = Vec::new();
        let mut prev_id = None;
        for _ in 0..count {
            let id = r.u64()?;
            if prev_id.is_some_and(|p| p >= id) {
                return Err(MapError::Corrupt(format!("vertex {id} out of order")));
            }
            prev_id = Some(id);
            let position = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
            let (w, x, y, z) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            let norm = (w * w + x * x + y * y + z * z).sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
                return Err(MapError::Corrupt(format!("vertex {id} has a non-unit orientation")));
            }
            let sequence = r.u32()?;
            if r.u8()? != 0 {
                let to = r.u64()?;
                let rel = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
                loops.push((id, to, rel, r.f64()?));
            }
            let n = r.u16()? as usize;
            let mut features = Vec::with_capacity(n);
            for _ in 0..n {
                features.push(MapFeature {
                    u: r.f32()?,
                    v: r.f32()?,
                    descriptor: BriefDescriptor(r.array()?),
                });
            }
            let odometry = Pose::from_wxyz(position, w, x, y, z);
            g.add_keyframe(Vertex::new(id, sequence, id as f64, odometry, features))
                .map_err(|e| MapError::Corrupt(e.to_string()))?;
        }
        if r.remaining() != 0 {
            return Err(MapError::Corrupt(format!("{} trailing bytes", r.remaining())));
        }
        for (from, to, rel, yaw) in loops {
            g.add_loop_edge(from, to, rel, yaw).map_err(|e| MapError::Corrupt(e.to_string()))?;
        }
        g.fixed = if fixed == NO_VERTEX {
            None
        } else if g.vertices.contains_key(&fixed) {
            Some(fixed)
        } else {
            return Err(MapError::Corrupt(format!("fixed vertex {fixed} missing")));
        };
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MapError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, config: GraphConfig) -> Result<Self, MapError> {
        Self::from_bytes(&fs::read(path)?, config)
    }
}

struct GraphTerm {
    i: usize,
    j: usize,
    rel_position: Vector3<f64>,
    rel_yaw: f64,
    robust: bool,
}

struct GraphProblem {
    /// (pitch, roll) per vertex.
    frozen: Vec<(f64, f64)>,
    blocks: Vec<Option<usize>>,
    nvar: usize,
    edges: Vec<GraphTerm>,
    delta: f64,
}

impl GraphProblem {
    fn term(&self, e: &GraphTerm, x: &[(Vector3<f64>, f64)]) -> (Vector4<f64>, Matrix4<f64>, Matrix4<f64>) {
        let (pitch, roll) = self.frozen[e.i];
        edge_residual(&x[e.i].0, x[e.i].1, pitch, roll, &x[e.j].0, x[e.j].1, &e.rel_position, e.rel_yaw)
    }

    fn loss(&self, e: &GraphTerm, s: f64) -> (f64, f64) {
        if e.robust {
            huber(s, self.delta)
        } else {
            (s, 1.0)
        }
    }
}

impl LeastSquares for GraphProblem {
    type State = Vec<(Vector3<f64>, f64)>;

    fn cost(&self, x: &Self::State) -> f64 {
        self.edges
            .iter()
            .map(|e| {
                let (r, _, _) = self.term(e, x);
                self.loss(e, r.norm_squared()).0
            })
            .sum()
    }

    fn linearize(&self, x: &Self::State) -> Linearization {
        let mut h = SparseSymmetric::new(4 * self.nvar);
        let mut g = DVector::zeros(4 * self.nvar);
        let mut cost = 0.0;
        for e in &self.edges {
            let (r, ji, jj) = self.term(e, x);
            let (rho, w) = self.loss(e, r.norm_squared());
            cost += rho;
            let parts = [(self.blocks[e.i], ji), (self.blocks[e.j], jj)];
            for (bi, ja) in &parts {
                let Some(a) = bi else { continue };
                let ga = ja.transpose() * r * w;
                for k in 0..4 {
                    g[4 * a + k] += ga[k];
                }
                for (bj, jb) in &parts {
                    let Some(b) = bj else { continue };
                    if b > a {
                        continue;
                    }
                    let hab = ja.transpose() * jb * w;
                    for rr in 0..4 {
                        for cc in 0..4 {
                            if a == b && cc > rr {
                                continue;
                            }
                            h.add(4 * a + rr, 4 * b + cc, hab[(rr, cc)]);
                        }
                    }
                }
            }
        }
        Linearization {
            cost,
            hessian: NormalMatrix::Sparse(h),
            gradient: g,
        }
    }

    fn retract(&self, x: &Self::State, delta: &DVector<f64>) -> Self::State {
        x.iter()
            .zip(&self.blocks)
            .map(|(&(p, yaw), b)| match b {
                Some(k) => (p + Vector3::new(delta[4 * k], delta[4 * k + 1], delta[4 * k + 2]), yaw + delta[4 * k + 3]),
                None => (p, yaw),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pose(x: f64, y: f64, z: f64, yaw: f64) -> Pose {
        Pose::from_ypr(Vector3::new(x, y, z), &YprAngles::new(yaw, 0.0, 0.0))
    }

    fn vtx(id: u64, p: Pose) -> Vertex {
        Vertex::new(id, 0, id as f64, p, Vec::new())
    }

    #[test]
    fn first_keyframe_is_fixed() {
        let mut g = PoseGraph::new();
        g.add_keyframe(vtx(0, Pose::identity())).unwrap();
        assert_eq!(g.fixed(), Some(0));
        assert!(g.edges().is_empty());
        assert_eq!(g.add_keyframe(vtx(0, Pose::identity())), Err(GraphError::DuplicateId(0)));
    }

    #[test]
    fn sequential_measurements() {
        let mut g = PoseGraph::new();
        g.add_keyframe(vtx(0, pose(0.0, 0.0, 0.0, 0.0))).unwrap();
        g.add_keyframe(vtx(1, pose(1.0, 0.0, 0.0, 0.0))).unwrap();
        assert_eq!(g.edges().len(), 1);
        let e = g.edges()[0];
        assert!((e.rel_position - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        assert_eq!(e.rel_yaw, 0.0);

        let mut g = PoseGraph::new();
        g.add_keyframe(vtx(0, pose(0.0, 0.0, 0.0, FRAC_PI_2))).unwrap();
        g.add_keyframe(vtx(1, pose(0.0, 1.0, 0.0, FRAC_PI_2))).unwrap();
        assert!((g.edges()[0].rel_position - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);

        let mut g = PoseGraph::new();
        for i in 0..7 {
            g.add_keyframe(vtx(i, pose(i as f64, 0.0, 0.0, 0.0))).unwrap();
        }
        let into6: Vec<u64> = g.edges().iter().filter(|e| e.to == 6).map(|e| e.from).collect();
        assert_eq!(into6, vec![2, 3, 4, 5]);
    }

    #[test]
    fn loop_edge_rules() {
        let mut g = PoseGraph::new();
        g.add_keyframe(vtx(0, Pose::identity())).unwrap();
        g.add_keyframe(Vertex::new(5, 1, 0.0, Pose::identity(), Vec::new())).unwrap();
        assert!(g.add_loop_edge(5, 0, Vector3::zeros(), 0.0).is_ok());
        assert!(g.add_loop_edge(5, 0, Vector3::zeros(), 0.0).is_ok());
        assert_eq!(g.loop_edges().count(), 2);
        assert_eq!(g.add_loop_edge(0, 0, Vector3::zeros(), 0.0), Err(GraphError::SelfLoop(0)));
        assert_eq!(g.add_loop_edge(0, 9, Vector3::zeros(), 0.0), Err(GraphError::MissingVertex(9)));
    }

    #[test]
    fn residual_examples() {
        let mut vi = vtx(0, pose(0.0, 0.0, 0.0, FRAC_PI_2));
        let vj = vtx(1, pose(0.0, 1.0, 0.0, FRAC_PI_2));
        let e = Edge {
            from: 0,
            to: 1,
            kind: EdgeKind::Loop,
            rel_position: Vector3::new(1.0, 0.0, 0.0),
            rel_yaw: 0.0,
        };
        assert!(residual_4dof(&vi, &vj, &e).norm() < 1e-15);
        vi.yaw = FRAC_PI_2 - 2.0 * PI - 0.1;
        let r = residual_4dof(&vi, &vj, &e);
        assert!((r[3] - 0.1).abs() < 1e-12);
    }

    fn fd_check(rng: &mut ChaCha8Rng) -> f64 {
        let p_i = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
        let p_j = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
        let (yi, yj) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let (pitch, roll) = (rng.random_range(-1.2..1.2), rng.random_range(-3.0..3.0));
        let mp = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
        // keep the yaw residual away from the wrap discontinuity
        let my = wrap_angle(yj - yi - rng.random_range(-2.5..2.5));
        let (_, ji, jj) = edge_residual(&p_i, yi, pitch, roll, &p_j, yj, &mp, my);
        let h = 1e-6;
        let f = |x: &[f64; 8]| {
            edge_residual(&Vector3::new(x[0], x[1], x[2]), x[3], pitch, roll, &Vector3::new(x[4], x[5], x[6]), x[7], &mp, my).0
        };
        let x0 = [p_i.x, p_i.y, p_i.z, yi, p_j.x, p_j.y, p_j.z, yj];
        let mut worst: f64 = 0.0;
        for k in 0..8 {
            let (mut a, mut b) = (x0, x0);
            a[k] += h;
            b[k] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            let an = if k < 4 { ji.column(k).into_owned() } else { jj.column(k - 4).into_owned() };
            worst = worst.max((fd - an).norm() / an.norm().max(1.0));
        }
        worst
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            assert!(fd_check(&mut rng) < 1e-6);
        }
    }

    fn chain_with_loop() -> PoseGraph {
        let mut g = PoseGraph::new();
        for i in 0..3 {
            g.add_keyframe(vtx(i, pose(i as f64, 0.0, 0.0, 0.0))).unwrap();
        }
        g.add_loop_edge(2, 0, Vector3::new(-2.0, 0.0, 0.0), 0.0).unwrap();
        g
    }

    #[test]
    fn three_vertex_chain_recovers_truth() {
        let mut g = chain_with_loop();
        g.vertex_mut(1).unwrap().position.x += 0.1;
        g.vertex_mut(2).unwrap().position.x += 0.2;
        g.optimize().unwrap();
        for i in 0..3 {
            assert!((g.vertex(i).unwrap().position - Vector3::new(i as f64, 0.0, 0.0)).norm() < 1e-6);
        }
    }

    #[test]
    fn zero_residual_graph_is_fixed_point() {
        let mut g = chain_with_loop();
        let before = g.clone();
        let rep = g.optimize().unwrap();
        assert_eq!(rep.lm.final_cost, 0.0);
        for (a, b) in g.vertices().zip(before.vertices()) {
            assert!((a.position - b.position).norm() <= 1e-10);
            assert!((a.yaw - b.yaw).abs() <= 1e-10);
        }
    }

    #[test]
    fn disconnected_graph_is_reported() {
        let mut g = PoseGraph::new();
        g.add_keyframe(vtx(0, Pose::identity())).unwrap();
        g.add_keyframe(Vertex::new(1, 1, 0.0, Pose::identity(), Vec::new())).unwrap();
        let err = g.optimize().unwrap_err();
        assert_eq!(err, GraphError::Disconnected { components: vec![vec![0], vec![1]] });
    }

    fn drifted_ring(seed: u64, n: u64) -> PoseGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = PoseGraph::new();
        for i in 0..n {
            let a = i as f64 * 2.0 * PI / n as f64;
            let p = Pose::from_ypr(
                Vector3::new(5.0 * a.cos(), 5.0 * a.sin(), 0.1 * i as f64 * rng.random_range(0.9..1.1)),
                &YprAngles::new(a + FRAC_PI_2 + 0.01 * i as f64, rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)),
            );
            g.add_keyframe(Vertex::new(i, 0, i as f64, p, Vec::new())).unwrap();
        }
        let last = g.vertex(n - 1).unwrap().pose();
        let first = g.vertex(0).unwrap().pose();
        let (rel, _) = relative_measurement(&last, &first);
        g.add_loop_edge(n - 1, 0, rel + Vector3::new(0.5, -0.3, -0.4), -0.2).unwrap();
        g.add_loop_edge(n / 2, 0, Vector3::new(0.2, 0.1, 0.0), 0.05).unwrap();
        g
    }

    #[test]
    fn roll_pitch_frozen_and_cost_monotone() {
        let mut g = drifted_ring(4, 40);
        let before: Vec<(u64, u64)> = g.vertices().map(|v| (v.pitch().to_bits(), v.roll().to_bits())).collect();
        let rep = g.optimize().unwrap();
        let after: Vec<(u64, u64)> = g.vertices().map(|v| (v.pitch().to_bits(), v.roll().to_bits())).collect();
        assert_eq!(before, after);
        assert!(rep.lm.cost_history.windows(2).all(|w| w[1] <= w[0]));
        for v in g.vertices() {
            let a = quat_to_ypr(&v.pose().orientation);
            assert!((a.pitch - v.pitch()).abs() < 1e-12 && (a.roll - v.roll()).abs() < 1e-12);
        }
    }

    #[test]
    fn gauge_equivariance() {
        let g0 = drifted_ring(5, 30);
        let c = Correction4::new(0.7, Vector3::new(3.0, -2.0, 1.0));
        let mut moved = g0.clone();
        for id in 0..30 {
            moved.vertex_mut(id).unwrap().apply(&c);
        }
        let mut a = g0.clone();
        a.optimize().unwrap();
        moved.optimize().unwrap();
        for (va, vb) in a.vertices().zip(moved.vertices()) {
            assert!((c.apply_point(&va.position) - vb.position).norm() < 1e-8);
            assert!(wrap_angle(va.yaw + c.yaw - vb.yaw).abs() < 1e-8);
        }
    }

    #[test]
    fn merge_rules() {
        let mut g = chain_with_loop();
        let before = g.clone();
        assert!(g.merge(&PoseGraph::new()).is_empty());
        assert_eq!(g.len(), before.len());

        let other = chain_with_loop();
        let map = g.merge(&other);
        assert_eq!(g.len(), 6);
        assert_eq!(map[&0], 3);
        assert_eq!(g.fixed(), Some(0));
        assert_eq!(g.vertex(3).unwrap().sequence, 1);
        assert_eq!(g.components().len(), 2);
    }

    #[test]
    fn merge_then_cross_loop_places_second_map() {
        let mut a = PoseGraph::new();
        for i in 0..5 {
            a.add_keyframe(vtx(i, pose(i as f64, 0.0, 0.0, 0.0))).unwrap();
        }
        let mut b = PoseGraph::new();
        for i in 0..5 {
            b.add_keyframe(vtx(i, pose(0.0, i as f64, 0.0, FRAC_PI_2))).unwrap();
        }
        let map = a.merge(&b);
        // b's first keyframe is 1 m ahead of a's vertex 2, same heading.
        let (from, to) = (map[&0], 2);
        a.add_loop_edge(from, to, Vector3::new(-1.0, 0.0, 0.0), 0.0).unwrap();
        a.optimize().unwrap();
        let vf = a.vertex(from).unwrap().clone();
        let vt = a.vertex(to).unwrap().clone();
        let e = *a.loop_edges().next().unwrap();
        assert!(residual_4dof(&vf, &vt, &e).norm() < 1e-6);
        assert!((vf.position - Vector3::new(3.0, 0.0, 0.0)).norm() < 1e-6);
    }

    #[test]
    fn downsample_rules() {
        let mut g = PoseGraph::new();
        for i in 0..51 {
            g.add_keyframe(vtx(i, pose(0.1 * i as f64, 0.0, 0.0, 0.0))).unwrap();
        }
        let original = g.clone();
        let removed = g.downsample(1.0, 0.0);
        let kept: Vec<u64> = g.vertices().map(|v| v.id).collect();
        assert_eq!(kept.len() + removed.len(), 51);
        assert!(kept.len() >= 5 && kept.len() <= 7, "{kept:?}");
        // Re-stitched edge equals the composition of the original one-step edges.
        for e in g.edges() {
            let (mut p, mut yaw) = (Vector3::zeros(), 0.0);
            for k in e.from..e.to {
                let step = original.edges().iter().find(|s| s.from == k && s.to == k + 1).unwrap();
                let rk = original.vertex(e.from).unwrap().odometry().rotation().transpose()
                    * original.vertex(k).unwrap().odometry().rotation();
                p += rk * step.rel_position;
                yaw += step.rel_yaw;
            }
            assert!((p - e.rel_position).norm() < 1e-9);
            assert!(wrap_angle(yaw - e.rel_yaw).abs() < 1e-9);
        }

        let mut single = PoseGraph::new();
        single.add_keyframe(vtx(0, Pose::identity())).unwrap();
        assert!(single.downsample(1.0, 1.0).is_empty());

        let mut looped = PoseGraph::new();
        for i in 0..4 {
            looped.add_keyframe(vtx(i, pose(0.01 * i as f64, 0.0, 0.0, 0.0))).unwrap();
        }
        looped.add_loop_edge(1, 0, Vector3::zeros(), 0.0).unwrap();
        looped.add_loop_edge(3, 2, Vector3::zeros(), 0.0).unwrap();
        assert!(looped.downsample(1.0, 1.0).is_empty());
    }

    fn featureful(seed: u64, n: u64, nfeat: usize) -> PoseGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = drifted_ring(seed, n);
        let mut h = PoseGraph::new();
        for v in g.vertices() {
            let feats = (0..nfeat)
                .map(|_| {
                    let mut d = BriefDescriptor::ZERO;
                    rng.fill(&mut d.0[..]);
                    MapFeature {
                        u: rng.random_range(0.0..640.0),
                        v: rng.random_range(0.0..480.0),
                        descriptor: d,
                    }
                })
                .collect();
            h.add_keyframe(Vertex::new(v.id, v.sequence, v.id as f64, *v.odometry(), feats)).unwrap();
        }
        for e in g.loop_edges() {
            h.add_loop_edge(e.from, e.to, e.rel_position, e.rel_yaw).unwrap();
        }
        g = h;
        g
    }

    #[test]
    fn map_round_trip() {
        let g = featureful(6, 20, 30);
        let bytes = g.to_bytes().unwrap();
        let back = PoseGraph::from_bytes(&bytes, GraphConfig::default()).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.fixed(), g.fixed());
        for (a, b) in g.vertices().zip(back.vertices()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.odometry(), b.odometry());
            assert_eq!(a.pitch().to_bits(), b.pitch().to_bits());
            assert_eq!(a.roll().to_bits(), b.roll().to_bits());
            assert_eq!(a.position, b.position);
            assert_eq!(a.yaw.to_bits(), b.yaw.to_bits());
            assert_eq!(a.features, b.features);
        }
        let sorted = |g: &PoseGraph| {
            let mut e = g.edges().to_vec();
            e.sort_by(|a, b| (a.kind, a.from, a.to).cmp(&(b.kind, b.from, b.to)));
            e
        };
        assert_eq!(sorted(&g), sorted(&back));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vpg");
        g.save(&path).unwrap();
        let loaded = PoseGraph::load(&path, GraphConfig::default()).unwrap();
        let mut a = g.clone();
        let mut b = loaded;
        a.optimize().unwrap();
        b.optimize().unwrap();
        for (x, y) in a.vertices().zip(b.vertices()) {
            assert!((x.position - y.position).norm() <= 1e-10);
        }
    }

    #[test]
    fn empty_map_is_header_only() {
        let bytes = PoseGraph::new().to_bytes().unwrap();
        assert_eq!(bytes.len(), MAP_HEADER_LEN);
        assert!(PoseGraph::from_bytes(&bytes, GraphConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn record_size_with_500_features() {
        // Two vertices; both loop edges leave vertex 1, only the later one is stored.
        let g = featureful(7, 2, 500);
        let payload = g.to_bytes().unwrap().len() - MAP_HEADER_LEN;
        let plain = 71 + 500 * 40;
        let with_loop = plain + 40;
        assert_eq!(payload, plain + with_loop);
        assert!((16_000..=21_000).contains(&with_loop));
    }

    #[test]
    fn map_errors_are_distinct() {
        let g = featureful(8, 5, 3);
        let bytes = g.to_bytes().unwrap();
        let cfg = GraphConfig::default();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(PoseGraph::from_bytes(&bad, cfg), Err(MapError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(PoseGraph::from_bytes(&bad, cfg), Err(MapError::UnsupportedVersion(2))));
        assert!(matches!(PoseGraph::from_bytes(&bytes[..10], cfg), Err(MapError::Truncated)));
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 1;
        assert!(matches!(PoseGraph::from_bytes(&bad, cfg), Err(MapError::Checksum { .. })));
        // consistent checksum, missing records
        let mut short = bytes[..bytes.len() - 5].to_vec();
        let crc = crc32fast::hash(&short[MAP_HEADER_LEN..]);
        short[18..22].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(PoseGraph::from_bytes(&short, cfg), Err(MapError::Truncated)));
    }

    #[test]
    fn propagate_correction_cases() {
        let mut g = PoseGraph::new();
        for i in 0..4 {
            g.add_keyframe(vtx(i, pose(i as f64, 0.0, 0.0, 0.0))).unwrap();
        }
        let before = g.clone();
        g.propagate_correction(1, &Correction4::identity()).unwrap();
        assert_eq!(g.vertices().collect::<Vec<_>>(), before.vertices().collect::<Vec<_>>());
        g.propagate_correction(3, &Correction4::new(1.0, Vector3::new(1.0, 1.0, 1.0))).unwrap();
        assert_eq!(g.vertices().collect::<Vec<_>>(), before.vertices().collect::<Vec<_>>());
        let anchor = g.vertex(1).unwrap().position;
        let c = Correction4::between(&anchor, 0.0, &anchor, FRAC_PI_2);
        g.propagate_correction(1, &c).unwrap();
        assert!((g.vertex(2).unwrap().position - Vector3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
        assert!((g.vertex(3).unwrap().position - Vector3::new(1.0, 2.0, 0.0)).norm() < 1e-12);
        assert!((g.vertex(3).unwrap().yaw - FRAC_PI_2).abs() < 1e-12);
        assert_eq!(g.propagate_correction(9, &c), Err(GraphError::MissingVertex(9)));
    }

    #[test]
    fn adopt_reconciles_late_vertices() {
        let mut live = drifted_ring(9, 20);
        let mut snapshot = live.clone();
        snapshot.optimize().unwrap();
        let late_odo = live.vertex(19).unwrap().odometry().compose(&pose(1.0, 0.0, 0.0, 0.1));
        live.add_keyframe(Vertex::new(20, 0, 20.0, late_odo, Vec::new())).unwrap();
        live.adopt(&snapshot);
        let e = live.edges().iter().find(|e| e.from == 19 && e.to == 20).copied().unwrap();
        let r = residual_4dof(live.vertex(19).unwrap(), live.vertex(20).unwrap(), &e);
        assert!(r.norm() < 1e-9);
        assert_eq!(live.vertex(5).unwrap().position, snapshot.vertex(5).unwrap().position);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn consistent_graphs_do_not_move(seed in 0u64..1000, n in 2u64..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = PoseGraph::new();
            for i in 0..n {
                let p = Pose::from_ypr(
                    Vector3::from_fn(|_, _| rng.random_range(-10.0..10.0)),
                    &YprAngles::new(rng.random_range(-3.0..3.0), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
                );
                g.add_keyframe(Vertex::new(i, 0, i as f64, p, Vec::new())).unwrap();
            }
            let before = g.clone();
            g.optimize().unwrap();
            for (a, b) in g.vertices().zip(before.vertices()) {
                prop_assert!((a.position - b.position).norm() <= 1e-10);
                prop_assert!(wrap_angle(a.yaw - b.yaw).abs() <= 1e-10);
                prop_assert_eq!(a.pitch().to_bits(), b.pitch().to_bits());
            }
        }

        #[test]
        fn map_bytes_round_trip(seed in 0u64..1000, n in 0u64..8, nfeat in 0usize..5) {
            let g = if n == 0 { PoseGraph::new() } else { featureful(seed, n.max(3), nfeat) };
            let bytes = g.to_bytes().unwrap();
            let back = PoseGraph::from_bytes(&bytes, GraphConfig::default()).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
