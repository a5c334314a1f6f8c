//! Loop-candidate verification: descriptor matching, then a 2D-2D fundamental-matrix
//! RANSAC, then a 3D-2D PnP RANSAC. Each stage only sees the survivors of the previous one.

use nalgebra::{DMatrix, Matrix3, Matrix6, Vector2, Vector3, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::{body_pose, CameraIntrinsics};
use crate::geom::{so3_exp, Pose};
use crate::imgproc::{hamming, BriefDescriptor};
use crate::keyframe::Keyframe;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchPair {
    pub query: usize,
    pub candidate: usize,
    pub distance: u32,
}

/// Nearest candidate for each query descriptor, kept when within `max_hamming`.
/// A candidate claimed by several queries keeps only its closest one (ties to the lower query index).
pub fn match_descriptors(query: &[BriefDescriptor], candidate: &[BriefDescriptor], max_hamming: u32) -> Vec<MatchPair> {
    let mut owner: Vec<Option<MatchPair>> = vec![None; candidate.len()];
    for (qi, q) in query.iter().enumerate() {
        let Some((ci, d)) = candidate
            .iter()
            .enumerate()
            .map(|(ci, c)| (ci, hamming(q, c)))
            .min_by_key(|&(ci, d)| (d, ci))
        else {
            continue;
        };
        if d > max_hamming {
            continue;
        }
        let m = MatchPair {
            query: qi,
            candidate: ci,
            distance: d,
        };
        match owner[ci] {
            Some(prev) if prev.distance <= d => {}
            _ => owner[ci] = Some(m),
        }
    }
    let mut out: Vec<MatchPair> = owner.into_iter().flatten().collect();
    out.sort_by_key(|m| m.query);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rejection {
    TooFewCorrespondences { found: usize, required: usize },
    TooFewInliers { found: usize, required: usize },
    NoModel,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacSettings {
    pub max_iterations: usize,
    pub threshold_px: f64,
    pub confidence: f64,
    pub seed: u64,
}

impl RansacSettings {
    pub fn new(threshold_px: f64, seed: u64) -> Self {
        Self {
            max_iterations: 200,
            threshold_px,
            confidence: 0.99,
            seed,
        }
    }

    fn required_iterations(&self, inlier_ratio: f64, sample_size: usize) -> usize {
        let good = inlier_ratio.powi(sample_size as i32);
        if good >= 1.0 {
            return 0;
        }
        if good <= 0.0 {
            return self.max_iterations;
        }
        let n = (1.0 - self.confidence).ln() / (1.0 - good).ln();
        (n.ceil() as usize).min(self.max_iterations)
    }
}

fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&b| b).count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FundamentalResult {
    pub matrix: Option<Matrix3<f64>>,
    pub inliers: Vec<bool>,
    pub rejection: Option<Rejection>,
}

impl FundamentalResult {
    pub fn accepted(&self) -> bool {
        self.rejection.is_none()
    }

    pub fn inlier_count(&self) -> usize {
        count(&self.inliers)
    }
}

fn hartley(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector2<f64>>() / n;
    let mean_dist = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

/// Unit vector spanning the (approximate) null space of `a`, rows padded to the column count.
fn null_vector(a: DMatrix<f64>) -> Option<nalgebra::DVector<f64>> {
    let cols = a.ncols();
    let a = if a.nrows() < cols {
        let mut padded = DMatrix::zeros(cols, cols);
        padded.rows_mut(0, a.nrows()).copy_from(&a);
        padded
    } else {
        a
    };
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    Some(v_t.row(k).transpose())
}

/// Normalized eight-point algorithm with rank-2 enforcement; `x2ᵀ F x1 = 0`.
pub fn eight_point(x1: &[Vector2<f64>], x2: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    if x1.len() < 8 || x1.len() != x2.len() {
        return None;
    }
    let t1 = hartley(x1);
    let t2 = hartley(x2);
    let mut a = DMatrix::zeros(x1.len(), 9);
    for (i, (p, q)) in x1.iter().zip(x2).enumerate() {
        let p = t1 * p.push(1.0);
        let q = t2 * q.push(1.0);
        let row = [
            q.x * p.x,
            q.x * p.y,
            q.x,
            q.y * p.x,
            q.y * p.y,
            q.y,
            p.x,
            p.y,
            1.0,
        ];
        for (j, v) in row.iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    let f = null_vector(a)?;
    let f = Matrix3::from_row_slice(f.as_slice());
    let svd = f.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut s = svd.singular_values;
    let (kmin, _) = s.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    s[kmin] = 0.0;
    let f = t2.transpose() * (u * Matrix3::from_diagonal(&s) * v_t) * t1;
    let norm = f.norm();
    if !norm.is_finite() || norm == 0.0 {
        return None;
    }
    Some(f / norm)
}

/// First-order geometric (Sampson) distance of a correspondence to `f`, in pixels.
pub fn sampson_distance(f: &Matrix3<f64>, x1: &Vector2<f64>, x2: &Vector2<f64>) -> f64 {
    let p = x1.push(1.0);
    let q = x2.push(1.0);
    let fp = f * p;
    let ftq = f.transpose() * q;
    let e = q.dot(&fp);
    let den = fp.x * fp.x + fp.y * fp.y + ftq.x * ftq.x + ftq.y * ftq.y;
    if den <= 0.0 {
        return if e == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (e * e / den).sqrt()
}

/// Inlier mask and truncated quadratic (MSAC) cost of `f`.
fn fundamental_score(f: &Matrix3<f64>, pairs: &[(Vector2<f64>, Vector2<f64>)], thr: f64) -> (Vec<bool>, f64) {
    let mut cost = 0.0;
    let mask = pairs
        .iter()
        .map(|(a, b)| {
            let d = sampson_distance(f, a, b);
            cost += d.min(thr).powi(2);
            d <= thr
        })
        .collect();
    (mask, cost)
}

/// RANSAC over pixel correspondences `(query, candidate)`, models ranked by MSAC cost.
pub fn fundamental_ransac(pairs: &[(Vector2<f64>, Vector2<f64>)], settings: &RansacSettings) -> FundamentalResult {
    const SAMPLE: usize = 8;
    if pairs.len() < SAMPLE {
        return FundamentalResult {
            matrix: None,
            inliers: vec![false; pairs.len()],
            rejection: Some(Rejection::TooFewCorrespondences {
                found: pairs.len(),
                required: SAMPLE,
            }),
        };
    }
    let thr = settings.threshold_px;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut best: Option<(Matrix3<f64>, Vec<bool>, f64)> = None;
    let mut needed = settings.max_iterations;
    let mut it = 0;
    while it < needed {
        it += 1;
        let idx = sample(&mut rng, pairs.len(), SAMPLE);
        let (x1, x2): (Vec<_>, Vec<_>) = idx.iter().map(|i| pairs[i]).unzip();
        let Some(f) = eight_point(&x1, &x2) else { continue };
        let (mask, cost) = fundamental_score(&f, pairs, thr);
        if best.as_ref().is_none_or(|b| cost < b.2) {
            needed = needed.min(settings.required_iterations(count(&mask) as f64 / pairs.len() as f64, SAMPLE));
            best = Some((f, mask, cost));
        }
    }
    let Some((mut f, mut mask, mut cost)) = best else {
        return FundamentalResult {
            matrix: None,
            inliers: vec![false; pairs.len()],
            rejection: Some(Rejection::NoModel),
        };
    };
    for _ in 0..5 {
        if count(&mask) < SAMPLE {
            break;
        }
        let (x1, x2): (Vec<_>, Vec<_>) = pairs.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).unzip();
        let Some(refit) = eight_point(&x1, &x2) else { break };
        let (refit_mask, refit_cost) = fundamental_score(&refit, pairs, thr);
        if refit_cost >= cost {
            break;
        }
        (f, mask, cost) = (refit, refit_mask, refit_cost);
    }
    let n = count(&mask);
    let rejection = (n < SAMPLE).then_some(Rejection::TooFewInliers {
        found: n,
        required: SAMPLE,
    });
    FundamentalResult {
        matrix: Some(f),
        inliers: mask,
        rejection,
    }
}

/// World-to-camera transform `x_c = R x_w + t`.
#[derive(Clone, Copy, Debug)]
struct CamFromWorld {
    r: Matrix3<f64>,
    t: Vector3<f64>,
}

impl CamFromWorld {
    fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r * x + self.t
    }

    fn reprojection_error(&self, k: &CameraIntrinsics, x: &Vector3<f64>, uv: &Vector2<f64>) -> f64 {
        let c = self.apply(x);
        if c.z <= 1e-9 {
            return f64::INFINITY;
        }
        (k.project_unchecked(&c) - uv).norm()
    }

    fn camera_pose(&self) -> Pose {
        Pose::from_rotation(-self.r.transpose() * self.t, &self.r.transpose())
    }
}

fn nearest_rotation(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * v_t;
    }
    Some(r)
}

/// Six-point DLT on normalized image coordinates.
fn pnp_dlt(world: &[Vector3<f64>], rays: &[Vector3<f64>]) -> Option<CamFromWorld> {
    let n = world.len() as f64;
    let c = world.iter().sum::<Vector3<f64>>() / n;
    let s = world.iter().map(|x| (x - c).norm()).sum::<f64>() / n;
    if s <= 1e-12 {
        return None;
    }
    let mut a = DMatrix::zeros(2 * world.len(), 12);
    for (i, (x, ray)) in world.iter().zip(rays).enumerate() {
        let xn = (x - c) / s;
        let h = [xn.x, xn.y, xn.z, 1.0];
        let (u, v) = (ray.x / ray.z, ray.y / ray.z);
        for j in 0..4 {
            a[(2 * i, j)] = h[j];
            a[(2 * i, 8 + j)] = -u * h[j];
            a[(2 * i + 1, 4 + j)] = h[j];
            a[(2 * i + 1, 8 + j)] = -v * h[j];
        }
    }
    let p = null_vector(a)?;
    let mut m = Matrix3::from_fn(|r, col| p[4 * r + col]);
    let mut tn = Vector3::new(p[3], p[7], p[11]);
    if m.determinant() < 0.0 {
        m = -m;
        tn = -tn;
    }
    let r = nearest_rotation(&m)?;
    let scale = m.svd(false, false).singular_values.mean();
    if scale <= 1e-12 {
        return None;
    }
    // Undo the point normalization: x_c ∝ M (x - c)/s + tn.
    let r_w = r;
    let t = (tn / scale) * s - r_w * c;
    Some(CamFromWorld { r: r_w, t })
}

fn quartic_real_roots(c: [f64; 5]) -> Vec<f64> {
    let lead = c[0];
    if lead.abs() < 1e-14 {
        return Vec::new();
    }
    let mut comp = nalgebra::Matrix4::zeros();
    for j in 0..4 {
        comp[(0, j)] = -c[j + 1] / lead;
    }
    for i in 1..4 {
        comp[(i, i - 1)] = 1.0;
    }
    let poly = |x: f64| (((c[0] * x + c[1]) * x + c[2]) * x + c[3]) * x + c[4];
    let dpoly = |x: f64| ((4.0 * c[0] * x + 3.0 * c[1]) * x + 2.0 * c[2]) * x + c[3];
    comp.complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() < 1e-6 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..5 {
                let d = dpoly(x);
                if d == 0.0 {
                    break;
                }
                x -= poly(x) / d;
            }
            x
        })
        .collect()
}

/// Least-squares rigid transform mapping `src` onto `dst`.
fn rigid_align(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<CamFromWorld> {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - cd) * (s - cs).transpose();
    }
    let r = nearest_rotation(&h)?;
    Some(CamFromWorld { r, t: cd - r * cs })
}

/// Grunert's three-point solution; returns up to four poses.
fn p3p(world: &[Vector3<f64>; 3], rays: &[Vector3<f64>; 3]) -> Vec<CamFromWorld> {
    let j: Vec<Vector3<f64>> = rays.iter().map(|r| r.normalize()).collect();
    let a2 = (world[1] - world[2]).norm_squared();
    let b2 = (world[0] - world[2]).norm_squared();
    let c2 = (world[0] - world[1]).norm_squared();
    if a2 < 1e-12 || b2 < 1e-12 || c2 < 1e-12 {
        return Vec::new();
    }
    let ca = j[1].dot(&j[2]);
    let cb = j[0].dot(&j[2]);
    let cg = j[0].dot(&j[1]);
    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let coeffs = [
        (amc - 1.0).powi(2) - 4.0 * c2 / b2 * ca * ca,
        4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb),
        2.0 * (amc * amc - 1.0 + 2.0 * amc * amc * cb * cb + 2.0 * (b2 - c2) / b2 * ca * ca
            - 4.0 * apc * ca * cb * cg
            + 2.0 * (b2 - a2) / b2 * cg * cg),
        4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - apc) * ca * cg),
        (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cg * cg,
    ];
    let mut out = Vec::new();
    for v in quartic_real_roots(coeffs) {
        if v <= 0.0 {
            continue;
        }
        let den = 2.0 * (cg - v * ca);
        if den.abs() < 1e-12 {
            continue;
        }
        let u = ((-1.0 + amc) * v * v - 2.0 * amc * cb * v + 1.0 + amc) / den;
        if u <= 0.0 {
            continue;
        }
        let d = 1.0 + u * u - 2.0 * u * cg;
        if d <= 0.0 {
            continue;
        }
        let s1 = (c2 / d).sqrt();
        let cam = [j[0] * s1, j[1] * (u * s1), j[2] * (v * s1)];
        if let Some(t) = rigid_align(world, &cam) {
            out.push(t);
        }
    }
    out
}

/// Three points solve, the fourth picks among the solutions.
fn p3p_four(world: &[Vector3<f64>], rays: &[Vector3<f64>], k: &CameraIntrinsics, uv4: &Vector2<f64>) -> Option<CamFromWorld> {
    p3p(&[world[0], world[1], world[2]], &[rays[0], rays[1], rays[2]])
        .into_iter()
        .map(|t| (t.reprojection_error(k, &world[3], uv4), t))
        .filter(|(e, _)| e.is_finite())
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, t)| t)
}

fn reprojection_cost(t: &CamFromWorld, k: &CameraIntrinsics, world: &[Vector3<f64>], obs: &[Vector2<f64>]) -> f64 {
    world
        .iter()
        .zip(obs)
        .map(|(x, uv)| {
            let c = t.apply(x);
            if c.z <= 1e-9 {
                f64::INFINITY
            } else {
                (k.project_unchecked(&c) - uv).norm_squared()
            }
        })
        .sum()
}

/// Gauss-Newton on the summed squared reprojection error, left-multiplicative rotation update.
fn refine_pose(init: CamFromWorld, k: &CameraIntrinsics, world: &[Vector3<f64>], obs: &[Vector2<f64>]) -> CamFromWorld {
    let mut t = init;
    let mut cost = reprojection_cost(&t, k, world, obs);
    for _ in 0..30 {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (x, uv) in world.iter().zip(obs) {
            let c = t.apply(x);
            if c.z <= 1e-9 {
                continue;
            }
            let r = k.project_unchecked(&c) - uv;
            let jp = k.project_jacobian(&c);
            let mut jc = nalgebra::Matrix3x6::zeros();
            jc.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-crate::geom::skew(&c)));
            jc.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            let j = jp * jc;
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let Some(delta) = h.cholesky().map(|c| -c.solve(&g)) else { break };
        let mut step = delta;
        let mut improved = false;
        for _ in 0..10 {
            let w = Vector3::new(step[0], step[1], step[2]);
            let rot = so3_exp(&w);
            let cand = CamFromWorld {
                r: rot * t.r,
                t: rot * t.t + Vector3::new(step[3], step[4], step[5]),
            };
            let c = reprojection_cost(&cand, k, world, obs);
            if c <= cost {
                t = cand;
                improved = cost - c > 1e-15 * cost.max(1e-300);
                cost = c;
                break;
            }
            step *= 0.5;
        }
        if !improved || delta.norm() < 1e-14 {
            break;
        }
    }
    t.r = nearest_rotation(&t.r).unwrap_or(t.r);
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnpResult {
    /// World pose of the camera that took the observations.
    pub camera_pose: Option<Pose>,
    pub inliers: Vec<bool>,
    pub rejection: Option<Rejection>,
}

impl PnpResult {
    pub fn accepted(&self) -> bool {
        self.rejection.is_none()
    }

    pub fn inlier_count(&self) -> usize {
        count(&self.inliers)
    }
}

/// Camera pose from world points and their pixel observations.
pub fn pnp_ransac(points: &[Vector3<f64>], obs: &[Vector2<f64>], k: &CameraIntrinsics, settings: &RansacSettings) -> PnpResult {
    const MIN: usize = 4;
    let n = points.len().min(obs.len());
    let reject = |r| PnpResult {
        camera_pose: None,
        inliers: vec![false; n],
        rejection: Some(r),
    };
    if n < MIN {
        return reject(Rejection::TooFewCorrespondences { found: n, required: MIN });
    }
    let rays: Vec<Vector3<f64>> = obs.iter().map(|uv| k.unproject(uv)).collect();
    let sample_size = if n >= 6 { 6 } else { MIN };
    let thr = settings.threshold_px;
    let classify = |t: &CamFromWorld| -> (Vec<bool>, f64) {
        let mut err = 0.0;
        let mask = (0..n)
            .map(|i| {
                let e = t.reprojection_error(k, &points[i], &obs[i]);
                let inl = e <= thr;
                if inl {
                    err += e;
                }
                inl
            })
            .collect();
        (mask, err)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut best: Option<(CamFromWorld, Vec<bool>, usize, f64)> = None;
    let mut needed = settings.max_iterations;
    let mut it = 0;
    while it < needed {
        it += 1;
        let idx: Vec<usize> = sample(&mut rng, n, sample_size).into_vec();
        let w: Vec<Vector3<f64>> = idx.iter().map(|&i| points[i]).collect();
        let r: Vec<Vector3<f64>> = idx.iter().map(|&i| rays[i]).collect();
        let hyp = if sample_size == 6 {
            pnp_dlt(&w, &r).or_else(|| p3p_four(&w, &r, k, &obs[idx[3]]))
        } else {
            p3p_four(&w, &r, k, &obs[idx[3]])
        };
        let Some(hyp) = hyp else { continue };
        let (mask, err) = classify(&hyp);
        let c = count(&mask);
        let better = match &best {
            None => true,
            Some(b) => c > b.2 || (c == b.2 && err < b.3),
        };
        if better {
            needed = needed.min(settings.required_iterations(c as f64 / n as f64, sample_size));
            best = Some((hyp, mask, c, err));
        }
    }
    let Some((mut pose, mut mask, mut c, _)) = best else {
        return reject(Rejection::NoModel);
    };
    for _ in 0..3 {
        if c < MIN {
            break;
        }
        let (w, o): (Vec<_>, Vec<_>) = (0..n).filter(|&i| mask[i]).map(|i| (points[i], obs[i])).unzip();
        let refined = refine_pose(pose, k, &w, &o);
        let (rmask, _) = classify(&refined);
        let rc = count(&rmask);
        if rc < c {
            break;
        }
        let same = rmask == mask;
        pose = refined;
        mask = rmask;
        c = rc;
        if same {
            break;
        }
    }
    let rejection = (c < MIN).then_some(Rejection::TooFewInliers { found: c, required: MIN });
    PnpResult {
        camera_pose: Some(pose.camera_pose()),
        inliers: mask,
        rejection,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyConfig {
    pub max_hamming: u32,
    pub epipolar_threshold_px: f64,
    pub reprojection_threshold_px: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub min_loop_inliers: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            max_hamming: 80,
            epipolar_threshold_px: 1.0,
            reprojection_threshold_px: 3.0,
            max_iterations: 200,
            confidence: 0.99,
            min_loop_inliers: 25,
            seed: 0,
        }
    }
}

impl VerifyConfig {
    fn ransac(&self, threshold_px: f64, salt: u64) -> RansacSettings {
        RansacSettings {
            max_iterations: self.max_iterations,
            threshold_px,
            confidence: self.confidence,
            seed: self.seed ^ salt,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Matching,
    Fundamental,
    Pnp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopVerification {
    pub candidate: u64,
    /// Descriptor matches entering the geometric checks.
    pub matches: Vec<MatchPair>,
    /// Survivors of the 2D-2D test.
    pub fundamental_inliers: Vec<MatchPair>,
    /// Survivors of the 3D-2D test.
    pub inliers: Vec<MatchPair>,
    /// Body pose of the candidate expressed in the query's odometry frame.
    pub candidate_pose: Option<Pose>,
    pub rejection: Option<(Stage, Rejection)>,
}

impl LoopVerification {
    pub fn accepted(&self) -> bool {
        self.rejection.is_none()
    }

    /// Query pose in the candidate body frame.
    pub fn relative_pose(&self, query: &Keyframe) -> Option<Pose> {
        self.candidate_pose.map(|c| c.between(&query.pose))
    }
}

/// Runs both geometric stages on an externally supplied match list.
pub fn verify_matches(
    query: &Keyframe,
    candidate: &Keyframe,
    matches: Vec<MatchPair>,
    k: &CameraIntrinsics,
    cfg: &VerifyConfig,
) -> LoopVerification {
    let mut out = LoopVerification {
        candidate: candidate.id,
        matches,
        fundamental_inliers: Vec::new(),
        inliers: Vec::new(),
        candidate_pose: None,
        rejection: None,
    };
    let min = cfg.min_loop_inliers;
    if out.matches.len() < min.max(8) {
        out.rejection = Some((
            Stage::Matching,
            Rejection::TooFewCorrespondences {
                found: out.matches.len(),
                required: min.max(8),
            },
        ));
        return out;
    }
    let pairs: Vec<(Vector2<f64>, Vector2<f64>)> = out
        .matches
        .iter()
        .map(|m| (query.features[m.query].uv, candidate.features[m.candidate].uv))
        .collect();
    let f = fundamental_ransac(&pairs, &cfg.ransac(cfg.epipolar_threshold_px, 0x4632_4432));
    out.fundamental_inliers = out.matches.iter().zip(&f.inliers).filter(|(_, &b)| b).map(|(m, _)| *m).collect();
    if let Some(r) = f.rejection {
        out.rejection = Some((Stage::Fundamental, r));
        return out;
    }
    if out.fundamental_inliers.len() < min {
        out.rejection = Some((
            Stage::Fundamental,
            Rejection::TooFewInliers {
                found: out.fundamental_inliers.len(),
                required: min,
            },
        ));
        return out;
    }
    let with_points: Vec<(MatchPair, Vector3<f64>)> = out
        .fundamental_inliers
        .iter()
        .filter_map(|m| query.features[m.query].point.map(|p| (*m, p)))
        .collect();
    let points: Vec<Vector3<f64>> = with_points.iter().map(|(_, p)| *p).collect();
    let obs: Vec<Vector2<f64>> = with_points.iter().map(|(m, _)| candidate.features[m.candidate].uv).collect();
    let pnp = pnp_ransac(&points, &obs, k, &cfg.ransac(cfg.reprojection_threshold_px, 0x504e_5033));
    out.inliers = with_points.iter().zip(&pnp.inliers).filter(|(_, &b)| b).map(|((m, _), _)| *m).collect();
    if let Some(r) = pnp.rejection {
        out.rejection = Some((Stage::Pnp, r));
        return out;
    }
    if out.inliers.len() < min {
        out.rejection = Some((
            Stage::Pnp,
            Rejection::TooFewInliers {
                found: out.inliers.len(),
                required: min,
            },
        ));
        return out;
    }
    out.candidate_pose = pnp.camera_pose.map(|c| body_pose(&c));
    out
}

/// Matching followed by the two geometric stages.
pub fn verify_loop(query: &Keyframe, candidate: &Keyframe, k: &CameraIntrinsics, cfg: &VerifyConfig) -> LoopVerification {
    let matches = match_descriptors(&query.descriptors(), &candidate.descriptors(), cfg.max_hamming);
    verify_matches(query, candidate, matches, k, cfg)
}
