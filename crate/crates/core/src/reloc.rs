//! Sliding-window relocalization against a fixed loop-closure frame.
//!
//! The window's body poses are optimized jointly under three kinds of terms:
//! relative-pose odometry factors between consecutive frames, reprojections of
//! window landmarks into window frames, and reprojections of the same landmarks
//! into the loop frame, whose pose never changes. Landmarks are rigidly attached to
//! the first window frame that observes them, so the loop term can move the window
//! as a whole while local observations keep its shape.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, UnitQuaternion, Vector2, Vector3, Vector6};
use thiserror::Error;

use crate::camera::{body_from_camera, CameraIntrinsics};
use crate::geom::{right_jacobian_inv, skew, so3_log, wrap_angle, Pose};
use crate::solver::{huber, levenberg_marquardt, LeastSquares, Linearization, LmReport, LmSettings, NormalMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum RelocError {
    #[error("window needs at least 2 frames, got {0}")]
    WindowTooSmall(usize),
    #[error("expected {expected} odometry factors, got {found}")]
    FactorCount { expected: usize, found: usize },
    #[error("observation refers to missing frame {frame} or landmark {landmark}")]
    DanglingObservation { frame: usize, landmark: usize },
    #[error("loop attachment has no observations")]
    EmptyLoop,
}

/// Relative-pose measurement between window frames `k` and `k + 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdometryFactor {
    /// `T_k^-1 T_{k+1}` as reported by odometry.
    pub measurement: Pose,
    /// Information of the residual `[translation, rotation]`.
    pub information: Matrix6<f64>,
}

impl OdometryFactor {
    pub fn between(a: &Pose, b: &Pose, information: Matrix6<f64>) -> Self {
        Self {
            measurement: a.between(b),
            information,
        }
    }
}

/// Default odometry information: 1 cm and 0.003 rad standard deviations.
pub fn default_odometry_information() -> Matrix6<f64> {
    let t = 1.0 / (0.01 * 0.01);
    let r = 1.0 / (0.003 * 0.003);
    Matrix6::from_diagonal(&Vector6::new(t, t, t, r, r, r))
}

/// A landmark expressed in the body frame of its anchor frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Landmark {
    pub anchor: usize,
    pub point: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub frame: usize,
    pub landmark: usize,
    pub uv: Vector2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowState {
    pub ids: Vec<u64>,
    /// Body poses, optimized.
    pub poses: Vec<Pose>,
    /// `odometry[k]` links frames `k` and `k + 1`.
    pub odometry: Vec<OdometryFactor>,
    pub landmarks: Vec<Landmark>,
    pub observations: Vec<Observation>,
}

impl WindowState {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// World position of landmark `l` under `poses`.
    pub fn landmark_world(&self, poses: &[Pose], l: usize) -> Vector3<f64> {
        let lm = &self.landmarks[l];
        poses[lm.anchor].transform_point(&lm.point)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopAttachment {
    pub frame_id: u64,
    /// Body pose of the loop frame; held constant.
    pub pose: Pose,
    /// `(landmark, pixel observation in the loop frame)`.
    pub observations: Vec<(usize, Vector2<f64>)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelocConfig {
    pub window_size: usize,
    /// Pixel standard deviation of both reprojection terms.
    pub pixel_sigma: f64,
    pub huber_delta: f64,
    pub lm: LmSettings,
}

impl Default for RelocConfig {
    fn default() -> Self {
        Self {
            window_size: 10,
            pixel_sigma: 1.0,
            huber_delta: 1.0,
            lm: LmSettings {
                max_iterations: 50,
                ..LmSettings::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Odometry(usize),
    Local(usize),
    Loop(usize),
}

pub struct RelocProblem {
    window: WindowState,
    attachment: Option<LoopAttachment>,
    k: CameraIntrinsics,
    cfg: RelocConfig,
    /// Parameter block of each frame; `None` for frames held constant.
    blocks: Vec<Option<usize>>,
}

/// Checks the window against its loop attachment and sets up the cost.
pub fn build_window_problem(
    window: WindowState,
    attachment: Option<LoopAttachment>,
    k: &CameraIntrinsics,
    cfg: &RelocConfig,
) -> Result<RelocProblem, RelocError> {
    let n = window.poses.len();
    if n < 2 {
        return Err(RelocError::WindowTooSmall(n));
    }
    if window.odometry.len() != n - 1 {
        return Err(RelocError::FactorCount {
            expected: n - 1,
            found: window.odometry.len(),
        });
    }
    let nl = window.landmarks.len();
    for lm in window.landmarks.iter() {
        if lm.anchor >= n {
            return Err(RelocError::DanglingObservation {
                frame: lm.anchor,
                landmark: nl,
            });
        }
    }
    for o in &window.observations {
        if o.frame >= n || o.landmark >= nl {
            return Err(RelocError::DanglingObservation {
                frame: o.frame,
                landmark: o.landmark,
            });
        }
    }
    if let Some(a) = &attachment {
        if a.observations.is_empty() {
            return Err(RelocError::EmptyLoop);
        }
        if let Some(&(l, _)) = a.observations.iter().find(|(l, _)| *l >= nl) {
            return Err(RelocError::DanglingObservation { frame: n, landmark: l });
        }
    }
    // The fixed loop frame provides the gauge; without it the first frame is held.
    let blocks = (0..n)
        .map(|i| if attachment.is_none() && i == 0 { None } else { Some(i - attachment.is_none() as usize) })
        .collect();
    Ok(RelocProblem {
        window,
        attachment,
        k: *k,
        cfg: *cfg,
        blocks,
    })
}

type Block = (usize, DMatrix<f64>);

impl RelocProblem {
    pub fn window(&self) -> &WindowState {
        &self.window
    }

    pub fn attachment(&self) -> Option<&LoopAttachment> {
        self.attachment.as_ref()
    }

    fn nvar(&self) -> usize {
        6 * self.blocks.iter().flatten().count()
    }

    pub fn terms(&self) -> Vec<Term> {
        let mut t: Vec<Term> = (0..self.window.odometry.len()).map(Term::Odometry).collect();
        t.extend((0..self.window.observations.len()).map(Term::Local));
        if let Some(a) = &self.attachment {
            t.extend((0..a.observations.len()).map(Term::Loop));
        }
        t
    }

    fn robust(&self, t: Term) -> bool {
        !matches!(t, Term::Odometry(_))
    }

    /// Jacobian of the world position of landmark `l` with respect to its anchor's
    /// `[dp, dtheta]` increment.
    fn landmark_jacobian(&self, poses: &[Pose], l: usize) -> (usize, Vector3<f64>, DMatrix<f64>) {
        let lm = &self.window.landmarks[l];
        let anchor = &poses[lm.anchor];
        let r = anchor.rotation();
        let pw = anchor.position + r * lm.point;
        let mut j = DMatrix::zeros(3, 6);
        j.view_mut((0, 0), (3, 3)).copy_from(&Matrix3::identity());
        j.view_mut((0, 3), (3, 3)).copy_from(&(-r * skew(&lm.point)));
        (lm.anchor, pw, j)
    }

    /// Whitened pixel residual of a world point seen from `body`, with Jacobians
    /// with respect to the point and to the body increment.
    fn reprojection(
        &self,
        body: &Pose,
        pw: &Vector3<f64>,
        uv: &Vector2<f64>,
    ) -> Option<(Vector2<f64>, nalgebra::Matrix2x3<f64>, nalgebra::Matrix2x6<f64>)> {
        let rk = body.rotation();
        let pb = rk.transpose() * (pw - body.position);
        let rbc_t = body_from_camera().transpose();
        let pc = rbc_t * pb;
        if pc.z <= 1e-3 {
            return None;
        }
        let s = 1.0 / self.cfg.pixel_sigma;
        let r = (self.k.project_unchecked(&pc) - uv) * s;
        let jpc = self.k.project_jacobian(&pc) * rbc_t * s;
        let jpoint = jpc * rk.transpose();
        let mut jbody = nalgebra::Matrix2x6::zeros();
        jbody.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-jpoint));
        jbody.fixed_view_mut::<2, 3>(0, 3).copy_from(&(jpc * skew(&pb)));
        Some((r, jpoint, jbody))
    }

    /// Residual of one term with its Jacobian blocks, keyed by window frame.
    pub fn evaluate(&self, poses: &[Pose], t: Term) -> Option<(DVector<f64>, Vec<Block>)> {
        match t {
            Term::Odometry(k) => {
                let f = &self.window.odometry[k];
                let (a, b) = (&poses[k], &poses[k + 1]);
                let (ra, rb) = (a.rotation(), b.rotation());
                let zr = f.measurement.rotation();
                let d = ra.transpose() * (b.position - a.position);
                let dr = ra.transpose() * rb;
                let et = zr.transpose() * (d - f.measurement.position);
                let phi = so3_log(&(zr.transpose() * dr));
                let jr_inv = right_jacobian_inv(&phi);
                let raw = Vector6::new(et.x, et.y, et.z, phi.x, phi.y, phi.z);
                let l = f.information.cholesky()?.l().transpose();
                let r = l * raw;
                let mut ja = Matrix6::zeros();
                ja.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-zr.transpose() * ra.transpose()));
                ja.fixed_view_mut::<3, 3>(0, 3).copy_from(&(zr.transpose() * skew(&d)));
                ja.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-jr_inv * dr.transpose()));
                let mut jb = Matrix6::zeros();
                jb.fixed_view_mut::<3, 3>(0, 0).copy_from(&(zr.transpose() * ra.transpose()));
                jb.fixed_view_mut::<3, 3>(3, 3).copy_from(&jr_inv);
                let to_d = |m: Matrix6<f64>| DMatrix::from_iterator(6, 6, (l * m).iter().copied());
                Some((DVector::from_iterator(6, r.iter().copied()), vec![(k, to_d(ja)), (k + 1, to_d(jb))]))
            }
            Term::Local(i) => {
                let o = &self.window.observations[i];
                let (anchor, pw, jl) = self.landmark_jacobian(poses, o.landmark);
                if anchor == o.frame {
                    return None;
                }
                let (r, jpoint, jbody) = self.reprojection(&poses[o.frame], &pw, &o.uv)?;
                let ja = DMatrix::from_iterator(2, 3, jpoint.iter().copied()) * jl;
                Some((
                    DVector::from_iterator(2, r.iter().copied()),
                    vec![(anchor, ja), (o.frame, DMatrix::from_iterator(2, 6, jbody.iter().copied()))],
                ))
            }
            Term::Loop(i) => {
                let a = self.attachment.as_ref()?;
                let (l, uv) = a.observations[i];
                let (anchor, pw, jl) = self.landmark_jacobian(poses, l);
                let (r, jpoint, _) = self.reprojection(&a.pose, &pw, &uv)?;
                let ja = DMatrix::from_iterator(2, 3, jpoint.iter().copied()) * jl;
                Some((DVector::from_iterator(2, r.iter().copied()), vec![(anchor, ja)]))
            }
        }
    }

    fn term_cost(&self, poses: &[Pose], t: Term) -> f64 {
        match self.evaluate(poses, t) {
            None => 0.0,
            Some((r, _)) => {
                let s = r.norm_squared();
                if self.robust(t) {
                    huber(s, self.cfg.huber_delta).0
                } else {
                    s
                }
            }
        }
    }

    /// Total cost split into odometry, local-vision and loop-vision parts.
    pub fn cost_parts(&self, poses: &[Pose]) -> (f64, f64, f64) {
        let mut parts = (0.0, 0.0, 0.0);
        for t in self.terms() {
            let c = self.term_cost(poses, t);
            match t {
                Term::Odometry(_) => parts.0 += c,
                Term::Local(_) => parts.1 += c,
                Term::Loop(_) => parts.2 += c,
            }
        }
        parts
    }

    /// Right-perturbation retraction: `p + dp`, `R Exp(dtheta)` for frame `f`.
    pub fn perturb(pose: &Pose, d: &Vector6<f64>) -> Pose {
        let dq = UnitQuaternion::from_scaled_axis(Vector3::new(d[3], d[4], d[5]));
        Pose::new(pose.position + Vector3::new(d[0], d[1], d[2]), pose.orientation * dq)
    }
}

impl LeastSquares for RelocProblem {
    type State = Vec<Pose>;

    fn cost(&self, poses: &Vec<Pose>) -> f64 {
        self.terms().into_iter().map(|t| self.term_cost(poses, t)).sum()
    }

    fn linearize(&self, poses: &Vec<Pose>) -> Linearization {
        let n = self.nvar();
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        let mut cost = 0.0;
        for t in self.terms() {
            let Some((r, blocks)) = self.evaluate(poses, t) else { continue };
            let s = r.norm_squared();
            let (rho, w) = if self.robust(t) { huber(s, self.cfg.huber_delta) } else { (s, 1.0) };
            cost += rho;
            for (fa, ja) in &blocks {
                let Some(a) = self.blocks[*fa] else { continue };
                let mut ga = g.rows_mut(6 * a, 6);
                ga += ja.transpose() * &r * w;
                for (fb, jb) in &blocks {
                    let Some(b) = self.blocks[*fb] else { continue };
                    let mut hab = h.view_mut((6 * a, 6 * b), (6, 6));
                    hab += ja.transpose() * jb * w;
                }
            }
        }
        Linearization {
            cost,
            hessian: NormalMatrix::Dense(h),
            gradient: g,
        }
    }

    fn retract(&self, poses: &Vec<Pose>, delta: &DVector<f64>) -> Vec<Pose> {
        poses
            .iter()
            .zip(&self.blocks)
            .map(|(p, b)| match b {
                Some(k) => Self::perturb(p, &Vector6::from_iterator(delta.rows(6 * k, 6).iter().copied())),
                None => *p,
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct RelocReport {
    pub lm: LmReport,
    pub converged: bool,
}

/// Levenberg-Marquardt over the window poses. Returns the best iterate even when the
/// iteration cap is hit; `converged` tells which.
pub fn optimize_window(problem: &RelocProblem) -> (WindowState, RelocReport) {
    let (poses, lm) = levenberg_marquardt(problem, problem.window.poses.clone(), &problem.cfg.lm);
    let mut w = problem.window.clone();
    w.poses = poses;
    let converged = lm.converged();
    (w, RelocReport { lm, converged })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopEdgeResult {
    pub from: u64,
    pub to: u64,
    pub rel_position: Vector3<f64>,
    pub rel_yaw: f64,
    pub inliers: usize,
}

/// Loop-edge measurement from the relocalized pose of `i` to the loop frame `v`,
/// using the full rotation of `i`.
pub fn compute_loop_edge(i: u64, pose_i: &Pose, v: u64, pose_v: &Pose, inliers: usize) -> LoopEdgeResult {
    LoopEdgeResult {
        from: i,
        to: v,
        rel_position: pose_i.rotation().transpose() * (pose_v.position - pose_i.position),
        rel_yaw: wrap_angle(pose_v.yaw() - pose_i.yaw()),
        inliers,
    }
}
