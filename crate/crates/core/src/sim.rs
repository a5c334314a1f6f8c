//! Synthetic worlds: ground-truth trajectories, landmarks, drifted odometry and the
//! keyframes a visual-inertial front end would hand over.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::camera::{world_to_camera, CameraIntrinsics};
use crate::geom::{rot_z, wrap_angle, Pose, YprAngles};
use crate::imgproc::{compute_brief, detect_fast, BriefDescriptor, GrayImage, Keypoint, BORDER, DEFAULT_FAST_THRESHOLD};
use crate::keyframe::{Feature, Keyframe};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("waypoint file {path}: {message}")]
    Waypoints { path: PathBuf, message: String },
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrajectoryKind {
    Circle,
    FigureEight,
    Waypoints(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Heading {
    /// Camera looks along the direction of travel.
    Tangent,
    /// Camera looks at the trajectory center.
    Inward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DescriptorMode {
    /// BRIEF on rendered sprite images.
    Rendered,
    /// Descriptor derived from the landmark id; identical across views.
    IdHash,
}

impl FromStr for DescriptorMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rendered" => Ok(Self::Rendered),
            "idhash" => Ok(Self::IdHash),
            _ => Err(format!("unknown descriptor mode {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub trajectory: TrajectoryKind,
    pub heading: Heading,
    pub keyframes: usize,
    /// Circle and figure-eight size.
    pub radius: f64,
    pub laps: f64,
    /// Distance between keyframes along a waypoint path.
    pub spacing: f64,
    pub center: Vector2<f64>,
    pub height: f64,
    /// Amplitude of the sinusoidal roll and pitch motion.
    pub tilt: f64,
    pub landmarks: usize,
    /// Landmarks are drawn uniformly from an annulus around `landmark_center`.
    pub landmark_inner: f64,
    pub landmark_outer: f64,
    pub landmark_center: Vector2<f64>,
    pub landmark_zmin: f64,
    pub landmark_zmax: f64,
    /// Seeds the landmark field separately so that several runs can share a world.
    pub landmark_seed: u64,
    pub yaw_drift: f64,
    pub position_drift: f64,
    pub pixel_noise: f64,
    pub camera: CameraIntrinsics,
    pub seed: u64,
    pub first_id: u64,
    pub sequence: u32,
    /// Start odometry at the origin with zero yaw instead of at the true pose.
    pub origin_at_start: bool,
    pub mode: DescriptorMode,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            trajectory: TrajectoryKind::Circle,
            heading: Heading::Tangent,
            keyframes: 200,
            radius: 20.0,
            laps: 1.0,
            spacing: 0.6,
            center: Vector2::zeros(),
            height: 1.5,
            tilt: 0.02,
            landmarks: 800,
            landmark_inner: 4.0,
            landmark_outer: 40.0,
            landmark_center: Vector2::zeros(),
            landmark_zmin: -1.0,
            landmark_zmax: 5.0,
            landmark_seed: 0,
            yaw_drift: 0.003,
            position_drift: 0.01,
            pixel_noise: 0.5,
            camera: CameraIntrinsics::default(),
            seed: 0,
            first_id: 0,
            sequence: 0,
            origin_at_start: false,
            mode: DescriptorMode::IdHash,
        }
    }
}

/// Horizontal field of view used for visibility.
pub const FOV: f64 = PI / 3.0;
pub const MIN_DEPTH: f64 = 0.5;
pub const MAX_DEPTH: f64 = 50.0;
pub const SPRITE: i32 = 5;

fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, SimError> {
    v.parse().map_err(|_| SimError::Parse {
        line,
        message: format!("bad value {v:?} for {key}"),
    })
}

fn parse_pair(line: usize, key: &str, v: &str) -> Result<Vector2<f64>, SimError> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(SimError::Parse {
            line,
            message: format!("{key} expects x,y"),
        });
    }
    Ok(Vector2::new(parse_value(line, key, parts[0])?, parse_value(line, key, parts[1])?))
}

impl SimConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep defaults.
    /// A relative waypoint path is resolved against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self, SimError> {
        let mut c = SimConfig::default();
        let mut waypoints = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(SimError::Parse {
                    line,
                    message: format!("expected key = value, got {content:?}"),
                });
            };
            let (key, v) = (key.trim(), value.trim());
            match key {
                "trajectory" => {
                    c.trajectory = match v {
                        "circle" => TrajectoryKind::Circle,
                        "figure-eight" => TrajectoryKind::FigureEight,
                        "waypoints" => TrajectoryKind::Waypoints(PathBuf::new()),
                        _ => {
                            return Err(SimError::Parse {
                                line,
                                message: format!("unknown trajectory {v:?}"),
                            })
                        }
                    }
                }
                "waypoint_file" => waypoints = Some(PathBuf::from(v)),
                "heading" => {
                    c.heading = match v {
                        "tangent" => Heading::Tangent,
                        "inward" => Heading::Inward,
                        _ => {
                            return Err(SimError::Parse {
                                line,
                                message: format!("unknown heading {v:?}"),
                            })
                        }
                    }
                }
                "mode" => {
                    c.mode = v.parse().map_err(|message| SimError::Parse { line, message })?;
                }
                "keyframes" => c.keyframes = parse_value(line, key, v)?,
                "radius" => c.radius = parse_value(line, key, v)?,
                "laps" => c.laps = parse_value(line, key, v)?,
                "spacing" => c.spacing = parse_value(line, key, v)?,
                "center" => c.center = parse_pair(line, key, v)?,
                "height" => c.height = parse_value(line, key, v)?,
                "tilt" => c.tilt = parse_value(line, key, v)?,
                "landmarks" => c.landmarks = parse_value(line, key, v)?,
                "landmark_inner" => c.landmark_inner = parse_value(line, key, v)?,
                "landmark_outer" => c.landmark_outer = parse_value(line, key, v)?,
                "landmark_center" => c.landmark_center = parse_pair(line, key, v)?,
                "landmark_zmin" => c.landmark_zmin = parse_value(line, key, v)?,
                "landmark_zmax" => c.landmark_zmax = parse_value(line, key, v)?,
                "landmark_seed" => c.landmark_seed = parse_value(line, key, v)?,
                "yaw_drift" => c.yaw_drift = parse_value(line, key, v)?,
                "position_drift" => c.position_drift = parse_value(line, key, v)?,
                "pixel_noise" => c.pixel_noise = parse_value(line, key, v)?,
                "fx" => c.camera.fx = parse_value(line, key, v)?,
                "fy" => c.camera.fy = parse_value(line, key, v)?,
                "cx" => c.camera.cx = parse_value(line, key, v)?,
                "cy" => c.camera.cy = parse_value(line, key, v)?,
                "width" => c.camera.width = parse_value(line, key, v)?,
                "height_px" => c.camera.height = parse_value(line, key, v)?,
                "seed" => c.seed = parse_value(line, key, v)?,
                "first_id" => c.first_id = parse_value(line, key, v)?,
                "sequence" => c.sequence = parse_value(line, key, v)?,
                "origin_at_start" => c.origin_at_start = parse_value(line, key, v)?,
                _ => {
                    return Err(SimError::Parse {
                        line,
                        message: format!("unknown key {key:?}"),
                    })
                }
            }
        }
        if let TrajectoryKind::Waypoints(_) = c.trajectory {
            let Some(p) = waypoints else {
                return Err(SimError::Invalid("trajectory = waypoints needs waypoint_file".into()));
            };
            let p = match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            };
            c.trajectory = TrajectoryKind::Waypoints(p);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path.parent())
    }

    /// Serializes every field in the format read by [`SimConfig::parse`].
    pub fn to_text(&self) -> String {
        let (traj, file) = match &self.trajectory {
            TrajectoryKind::Circle => ("circle", None),
            TrajectoryKind::FigureEight => ("figure-eight", None),
            TrajectoryKind::Waypoints(p) => ("waypoints", Some(p.display().to_string())),
        };
        let mut s = format!("trajectory = {traj}\n");
        if let Some(f) = file {
            s += &format!("waypoint_file = {f}\n");
        }
        let heading = match self.heading {
            Heading::Tangent => "tangent",
            Heading::Inward => "inward",
        };
        let mode = match self.mode {
            DescriptorMode::Rendered => "rendered",
            DescriptorMode::IdHash => "idhash",
        };
        let k = &self.camera;
        s += &format!(
            "heading = {heading}\nmode = {mode}\nkeyframes = {}\nradius = {}\nlaps = {}\nspacing = {}\n\
             center = {},{}\nheight = {}\ntilt = {}\nlandmarks = {}\nlandmark_inner = {}\n\
             landmark_outer = {}\nlandmark_center = {},{}\nlandmark_zmin = {}\nlandmark_zmax = {}\n\
             landmark_seed = {}\nyaw_drift = {}\nposition_drift = {}\npixel_noise = {}\n\
             fx = {}\nfy = {}\ncx = {}\ncy = {}\nwidth = {}\nheight_px = {}\nseed = {}\nfirst_id = {}\n\
             sequence = {}\norigin_at_start = {}\n",
            self.keyframes,
            self.radius,
            self.laps,
            self.spacing,
            self.center.x,
            self.center.y,
            self.height,
            self.tilt,
            self.landmarks,
            self.landmark_inner,
            self.landmark_outer,
            self.landmark_center.x,
            self.landmark_center.y,
            self.landmark_zmin,
            self.landmark_zmax,
            self.landmark_seed,
            self.yaw_drift,
            self.position_drift,
            self.pixel_noise,
            k.fx,
            k.fy,
            k.cx,
            k.cy,
            k.width,
            k.height,
            self.seed,
            self.first_id,
            self.sequence,
            self.origin_at_start,
        );
        s
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Invalid(m.to_string()));
        if self.keyframes == 0 {
            return bad("keyframes must be positive");
        }
        if !(self.yaw_drift >= 0.0 && self.position_drift >= 0.0 && self.pixel_noise >= 0.0) {
            return bad("drift rates and pixel noise must be non-negative");
        }
        if !(self.radius > 0.0 && self.laps > 0.0 && self.spacing > 0.0) {
            return bad("radius, laps and spacing must be positive");
        }
        if !(self.landmark_inner >= 0.0 && self.landmark_outer >= self.landmark_inner) {
            return bad("landmark annulus must satisfy 0 <= inner <= outer");
        }
        if self.landmark_zmax < self.landmark_zmin {
            return bad("landmark_zmax below landmark_zmin");
        }
        if !self.camera.is_valid() {
            return bad("camera intrinsics must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimWorld {
    pub camera: CameraIntrinsics,
    pub first_id: u64,
    /// Angles the ground-truth poses were built from.
    pub angles: Vec<YprAngles>,
    pub poses: Vec<Pose>,
    pub landmarks: Vec<Vector3<f64>>,
    /// Per keyframe: `(landmark, noise-free pixel)`.
    pub visible: Vec<Vec<(usize, Vector2<f64>)>>,
}

impl SimWorld {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn id(&self, index: usize) -> u64 {
        self.first_id + index as u64
    }

    /// Ground truth as `(timestamp, pose)` with timestamps equal to keyframe ids.
    pub fn trajectory(&self) -> Vec<(f64, Pose)> {
        self.poses.iter().enumerate().map(|(i, p)| (self.id(i) as f64, *p)).collect()
    }

    /// Landmarks seen by both keyframes.
    pub fn covisible(&self, a: usize, b: usize) -> usize {
        let sb: std::collections::BTreeSet<usize> = self.visible[b].iter().map(|(l, _)| *l).collect();
        self.visible[a].iter().filter(|(l, _)| sb.contains(l)).count()
    }
}

/// Pixel of a landmark when it passes the frustum test.
pub fn visible_projection(k: &CameraIntrinsics, body: &Pose, p: &Vector3<f64>) -> Option<Vector2<f64>> {
    let pc = world_to_camera(body, p);
    if !(MIN_DEPTH..=MAX_DEPTH).contains(&pc.z) || pc.x.atan2(pc.z).abs() > FOV / 2.0 {
        return None;
    }
    k.project(&pc).filter(|uv| k.contains(uv, BORDER as f64))
}

fn read_waypoints(path: &Path) -> Result<Vec<Vector3<f64>>, SimError> {
    let err = |message: String| SimError::Waypoints {
        path: path.to_path_buf(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| err(format!("line {}: {e}", i + 1)))?;
        match v.as_slice() {
            [x, y] => pts.push(Vector3::new(*x, *y, 0.0)),
            [x, y, z] => pts.push(Vector3::new(*x, *y, *z)),
            _ => return Err(err(format!("line {}: expected 2 or 3 numbers", i + 1))),
        }
    }
    if pts.len() < 2 {
        return Err(err("need at least two waypoints".into()));
    }
    if pts.windows(2).any(|w| (w[1] - w[0]).norm() == 0.0) {
        return Err(err("consecutive waypoints coincide".into()));
    }
    Ok(pts)
}

/// Positions along the closed waypoint polygon every `spacing` meters.
fn sample_polygon(pts: &[Vector3<f64>], spacing: f64, n: usize) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let m = pts.len();
    let segs: Vec<(Vector3<f64>, Vector3<f64>)> = (0..m).map(|i| (pts[i], pts[(i + 1) % m])).collect();
    let lengths: Vec<f64> = segs.iter().map(|(a, b)| (b - a).norm()).collect();
    let total: f64 = lengths.iter().sum();
    (0..n)
        .map(|k| {
            let mut s = (k as f64 * spacing) % total;
            let mut i = 0;
            while s > lengths[i] && i + 1 < m {
                s -= lengths[i];
                i += 1;
            }
            let (a, b) = segs[i];
            let dir = (b - a) / lengths[i];
            (a + dir * s.min(lengths[i]), dir)
        })
        .collect()
}

pub fn generate_world(cfg: &SimConfig) -> Result<SimWorld, SimError> {
    cfg.validate()?;
    let n = cfg.keyframes;
    let c = Vector3::new(cfg.center.x, cfg.center.y, cfg.height);
    // Position and direction of travel per keyframe.
    let path: Vec<(Vector3<f64>, Vector3<f64>)> = match &cfg.trajectory {
        TrajectoryKind::Circle => (0..n)
            .map(|k| {
                let t = TAU * cfg.laps * k as f64 / n as f64;
                let p = c + cfg.radius * Vector3::new(t.cos(), t.sin(), 0.0);
                (p, Vector3::new(-t.sin(), t.cos(), 0.0))
            })
            .collect(),
        TrajectoryKind::FigureEight => (0..n)
            .map(|k| {
                let t = TAU * cfg.laps * k as f64 / n as f64;
                let p = c + cfg.radius * Vector3::new(t.sin(), t.sin() * t.cos(), 0.0);
                let d = Vector3::new(t.cos(), (2.0 * t).cos(), 0.0);
                (p, d.normalize())
            })
            .collect(),
        TrajectoryKind::Waypoints(file) => {
            let pts = read_waypoints(file)?;
            sample_polygon(&pts, cfg.spacing, n)
                .into_iter()
                .map(|(p, d)| (p + Vector3::new(cfg.center.x, cfg.center.y, cfg.height), d))
                .collect()
        }
    };
    let mut angles = Vec::with_capacity(n);
    let mut poses = Vec::with_capacity(n);
    for (k, (p, d)) in path.iter().enumerate() {
        let yaw = match cfg.heading {
            Heading::Tangent => d.y.atan2(d.x),
            Heading::Inward => (c.y - p.y).atan2(c.x - p.x),
        };
        let a = YprAngles::new(
            wrap_angle(yaw),
            cfg.tilt * (0.37 * k as f64).sin(),
            cfg.tilt * (0.23 * k as f64).cos(),
        );
        angles.push(a);
        poses.push(Pose::from_ypr(*p, &a));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.landmark_seed ^ 0x4c41_4e44);
    let (r0, r1) = (cfg.landmark_inner, cfg.landmark_outer);
    let landmarks: Vec<Vector3<f64>> = (0..cfg.landmarks)
        .map(|_| {
            // Uniform in area over the annulus.
            let r = (r0 * r0 + rng.random::<f64>() * (r1 * r1 - r0 * r0)).sqrt();
            let t = rng.random::<f64>() * TAU;
            let z = cfg.landmark_zmin + rng.random::<f64>() * (cfg.landmark_zmax - cfg.landmark_zmin);
            Vector3::new(cfg.landmark_center.x + r * t.cos(), cfg.landmark_center.y + r * t.sin(), z)
        })
        .collect();

    let visible = poses
        .iter()
        .map(|pose| {
            landmarks
                .iter()
                .enumerate()
                .filter_map(|(l, p)| visible_projection(&cfg.camera, pose, p).map(|uv| (l, uv)))
                .collect()
        })
        .collect();
    Ok(SimWorld {
        camera: cfg.camera,
        first_id: cfg.first_id,
        angles,
        poses,
        landmarks,
        visible,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdometryTrack {
    /// Angles of the drifted poses; pitch and roll are copies of the ground truth.
    pub angles: Vec<YprAngles>,
    pub poses: Vec<Pose>,
    /// `poses[k].between(poses[k + 1])`.
    pub relative: Vec<Pose>,
    /// Per keyframe, aligned with `SimWorld::visible`: landmark positions in the
    /// drifted world frame.
    pub points: Vec<Vec<Vector3<f64>>>,
}

impl OdometryTrack {
    pub fn trajectory(&self, first_id: u64) -> Vec<(f64, Pose)> {
        self.poses.iter().enumerate().map(|(i, p)| ((first_id + i as u64) as f64, *p)).collect()
    }
}

/// Random walks on the x, y, z and yaw increments of the true trajectory.
pub fn simulate_odometry(world: &SimWorld, cfg: &SimConfig) -> OdometryTrack {
    let n = world.len();
    let mut angles = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    if n > 0 {
        let exact = cfg.yaw_drift == 0.0 && cfg.position_drift == 0.0 && !cfg.origin_at_start;
        if exact {
            angles = world.angles.clone();
            positions = world.poses.iter().map(|p| p.position).collect();
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4452_4946);
            let yaw_noise = Normal::new(0.0, cfg.yaw_drift).unwrap();
            let pos_noise = Normal::new(0.0, cfg.position_drift).unwrap();
            let a0 = world.angles[0];
            let (mut yaw, mut p) = if cfg.origin_at_start {
                (0.0, Vector3::zeros())
            } else {
                (a0.yaw, world.poses[0].position)
            };
            angles.push(YprAngles::new(yaw, a0.pitch, a0.roll));
            positions.push(p);
            for k in 0..n - 1 {
                let (ya, yb) = (world.angles[k].yaw, world.angles[k + 1].yaw);
                let d = rot_z(ya).transpose() * (world.poses[k + 1].position - world.poses[k].position);
                let dyaw = wrap_angle(yb - ya);
                let np = Vector3::new(pos_noise.sample(&mut rng), pos_noise.sample(&mut rng), pos_noise.sample(&mut rng));
                let ny = yaw_noise.sample(&mut rng);
                p += rot_z(yaw) * (d + np);
                yaw = wrap_angle(yaw + dyaw + ny);
                let a = world.angles[k + 1];
                angles.push(YprAngles::new(yaw, a.pitch, a.roll));
                positions.push(p);
            }
        }
    }
    let poses: Vec<Pose> = angles.iter().zip(&positions).map(|(a, p)| Pose::from_ypr(*p, a)).collect();
    let relative = poses.windows(2).map(|w| w[0].between(&w[1])).collect();
    let points = world
        .visible
        .iter()
        .enumerate()
        .map(|(k, vis)| {
            let to_drift = poses[k].compose(&world.poses[k].inverse());
            vis.iter().map(|(l, _)| to_drift.transform_point(&world.landmarks[*l])).collect()
        })
        .collect();
    OdometryTrack {
        angles,
        poses,
        relative,
        points,
    }
}

/// Descriptor used in id-hash mode.
pub fn landmark_descriptor(landmark: usize) -> BriefDescriptor {
    let mut rng = ChaCha8Rng::seed_from_u64((landmark as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x4445_5343);
    let mut d = [0u8; 32];
    rng.fill_bytes(&mut d);
    BriefDescriptor(d)
}

/// Intensities of the 5x5 sprite of a landmark, row-major. The center pixel is
/// saturated so that it always passes the segment test on a black background.
pub fn sprite(landmark: usize) -> [u8; 25] {
    let mut rng = ChaCha8Rng::seed_from_u64((landmark as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93) ^ 0x5350_5249);
    let mut s = [0u8; 25];
    for v in s.iter_mut() {
        *v = rng.random_range(40..=200);
    }
    s[12] = 255;
    s
}

fn sprite_origin(uv: &Vector2<f64>) -> (i32, i32) {
    (uv.x.round() as i32, uv.y.round() as i32)
}

/// Black image with each visible landmark drawn as its sprite, centered at the
/// rounded noise-free projection. Nearer landmarks are drawn last.
pub fn render_sprite_frame(world: &SimWorld, index: usize) -> GrayImage {
    let k = &world.camera;
    let mut img = GrayImage::new(k.width, k.height);
    let pose = &world.poses[index];
    let mut order: Vec<&(usize, Vector2<f64>)> = world.visible[index].iter().collect();
    let depth = |l: usize| world_to_camera(pose, &world.landmarks[l]).z;
    order.sort_by(|a, b| depth(b.0).total_cmp(&depth(a.0)).then(a.0.cmp(&b.0)));
    let h = SPRITE / 2;
    for (l, uv) in order {
        let (cu, cv) = sprite_origin(uv);
        let s = sprite(*l);
        for dv in -h..=h {
            for du in -h..=h {
                let (u, v) = (cu + du, cv + dv);
                if u >= 0 && v >= 0 && (u as u32) < k.width && (v as u32) < k.height {
                    img.set(u as u32, v as u32, s[((dv + h) * SPRITE + du + h) as usize]);
                }
            }
        }
    }
    img
}

/// BRIEF descriptors of the sprite centers found by FAST in a rendered frame,
/// aligned with `world.visible[index]`; `None` where no corner lies within 1 px.
pub fn rendered_descriptors(world: &SimWorld, index: usize) -> Vec<Option<BriefDescriptor>> {
    let img = render_sprite_frame(world, index);
    let kps = detect_fast(&img, DEFAULT_FAST_THRESHOLD, 8192).unwrap_or_default();
    let mut grid = std::collections::HashMap::new();
    for kp in &kps {
        grid.insert((kp.u as i32, kp.v as i32), *kp);
    }
    let chosen: Vec<Option<Keypoint>> = world.visible[index]
        .iter()
        .map(|(_, uv)| {
            let (cu, cv) = sprite_origin(uv);
            let mut best: Option<Keypoint> = None;
            for dv in -1..=1 {
                for du in -1..=1 {
                    if let Some(kp) = grid.get(&(cu + du, cv + dv)) {
                        if best.is_none_or(|b| kp.score > b.score) {
                            best = Some(*kp);
                        }
                    }
                }
            }
            best
        })
        .collect();
    let found: Vec<Keypoint> = chosen.iter().flatten().copied().collect();
    let descs = compute_brief(&img, &found).unwrap_or_default();
    let mut it = descs.into_iter();
    chosen.iter().map(|c| c.and_then(|_| it.next())).collect()
}

/// Keyframes with drifted poses, noisy observations, drifted 3D points and
/// descriptors in the configured mode. Ids start at `cfg.first_id`; timestamps
/// equal ids.
pub fn make_keyframes(world: &SimWorld, track: &OdometryTrack, cfg: &SimConfig) -> Vec<Keyframe> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5049_5845);
    let noise = (cfg.pixel_noise > 0.0).then(|| Normal::new(0.0, cfg.pixel_noise).unwrap());
    (0..world.len())
        .map(|k| {
            let descs: Vec<Option<BriefDescriptor>> = match cfg.mode {
                DescriptorMode::IdHash => world.visible[k].iter().map(|(l, _)| Some(landmark_descriptor(*l))).collect(),
                DescriptorMode::Rendered => rendered_descriptors(world, k),
            };
            let features = world.visible[k]
                .iter()
                .zip(&track.points[k])
                .zip(descs)
                .filter_map(|(((l, uv), p), d)| {
                    let jitter = match &noise {
                        Some(n) => Vector2::new(n.sample(&mut rng), n.sample(&mut rng)),
                        None => Vector2::zeros(),
                    };
                    Some(Feature {
                        uv: uv + jitter,
                        descriptor: d?,
                        point: Some(*p),
                        track: Some(*l as u64),
                    })
                })
                .collect();
            let id = world.id(k);
            Keyframe {
                id,
                timestamp: id as f64,
                pose: track.poses[k],
                features,
            }
        })
        .collect()
}

/// Everything a run needs from one simulated sequence.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: SimConfig,
    pub world: SimWorld,
    pub track: OdometryTrack,
    pub keyframes: Vec<Keyframe>,
}

impl Scenario {
    pub fn generate(cfg: &SimConfig) -> Result<Self, SimError> {
        let world = generate_world(cfg)?;
        let track = simulate_odometry(&world, cfg);
        let keyframes = make_keyframes(&world, &track, cfg);
        Ok(Self {
            config: cfg.clone(),
            world,
            track,
            keyframes,
        })
    }
}

/// Rotation taking the true world into the drifted frame at keyframe `k`.
pub fn drift_rotation(world: &SimWorld, track: &OdometryTrack, k: usize) -> Matrix3<f64> {
    track.poses[k].rotation() * world.poses[k].rotation().transpose()
}
