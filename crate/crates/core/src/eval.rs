//! Absolute trajectory error and TUM trajectory files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geom::Pose;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("only {0} timestamps matched, need at least 2")]
    NoOverlap(usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Maximum timestamp difference for two samples to be associated.
pub const MAX_TIME_DIFF: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct AteReport {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub aligned: bool,
    pub frames: usize,
    /// `(timestamp, error)` per matched estimate sample.
    pub errors: Vec<(f64, f64)>,
}

impl AteReport {
    /// `key=value` lines.
    pub fn to_text(&self, prefix: &str) -> String {
        format!(
            "{prefix}rmse={:.9}\n{prefix}mean={:.9}\n{prefix}median={:.9}\n{prefix}max={:.9}\n{prefix}aligned={}\n{prefix}frames={}\n",
            self.rmse, self.mean, self.median, self.max, self.aligned, self.frames
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("timestamp,error\n");
        for (t, e) in &self.errors {
            writeln!(s, "{t:.6},{e:.9}").unwrap();
        }
        s
    }
}

/// Pairs each estimate sample with the nearest ground-truth sample within
/// [`MAX_TIME_DIFF`]. Returns `(timestamp, estimate, ground truth)` positions.
pub fn associate(est: &[(f64, Pose)], gt: &[(f64, Pose)]) -> Vec<(f64, Vector3<f64>, Vector3<f64>)> {
    let mut sorted: Vec<&(f64, Pose)> = gt.iter().collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::new();
    for (t, p) in est {
        let i = sorted.partition_point(|g| g.0 < *t);
        let best = [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter_map(|j| sorted.get(j))
            .min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()));
        if let Some(g) = best {
            if (g.0 - t).abs() <= MAX_TIME_DIFF {
                out.push((*t, p.position, g.1.position));
            }
        }
    }
    out
}

/// Rotation and translation minimizing `sum |R a_i + t - b_i|^2`.
pub fn align_rigid(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vector3<f64>>() / n;
    let cb = b.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (x, y) in a.iter().zip(b) {
        cov += (y - cb) * (x - ca).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    (r, cb - r * ca)
}

/// ATE of `est` against `gt` after rigid alignment without scale.
pub fn ate(est: &[(f64, Pose)], gt: &[(f64, Pose)]) -> Result<AteReport, EvalError> {
    let pairs = associate(est, gt);
    if pairs.len() < 2 {
        return Err(EvalError::NoOverlap(pairs.len()));
    }
    let a: Vec<Vector3<f64>> = pairs.iter().map(|p| p.1).collect();
    let b: Vec<Vector3<f64>> = pairs.iter().map(|p| p.2).collect();
    let (r, t) = align_rigid(&a, &b);
    let errors: Vec<(f64, f64)> = pairs.iter().map(|(ts, x, y)| (*ts, (r * x + t - y).norm())).collect();
    let n = errors.len() as f64;
    let mut sorted: Vec<f64> = errors.iter().map(|e| e.1).collect();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    Ok(AteReport {
        rmse: (sorted.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        mean: sorted.iter().sum::<f64>() / n,
        median,
        max: sorted[m - 1],
        aligned: true,
        frames: m,
        errors,
    })
}

/// `timestamp tx ty tz qx qy qz qw` per line, with round-trip exact numbers.
pub fn format_tum(traj: &[(f64, Pose)]) -> String {
    let mut s = String::new();
    for (t, p) in traj {
        let q = p.orientation.quaternion();
        writeln!(
            s,
            "{t} {} {} {} {} {} {} {}",
            p.position.x, p.position.y, p.position.z, q.i, q.j, q.k, q.w
        )
        .unwrap();
    }
    s
}

pub fn parse_tum(text: &str) -> Result<Vec<(f64, Pose)>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| EvalError::Parse {
                line: i + 1,
                message: format!("{e}"),
            })?;
        if v.len() != 8 {
            return Err(EvalError::Parse {
                line: i + 1,
                message: format!("expected 8 fields, found {}", v.len()),
            });
        }
        let q = nalgebra::Quaternion::new(v[7], v[4], v[5], v[6]);
        if !(q.norm() > 0.0) {
            return Err(EvalError::Parse {
                line: i + 1,
                message: "zero quaternion".into(),
            });
        }
        out.push((v[0], Pose::new(Vector3::new(v[1], v[2], v[3]), UnitQuaternion::from_quaternion(q))));
    }
    Ok(out)
}

pub fn write_tum(path: impl AsRef<Path>, traj: &[(f64, Pose)]) -> Result<(), EvalError> {
    fs::write(path, format_tum(traj))?;
    Ok(())
}

pub fn read_tum(path: impl AsRef<Path>) -> Result<Vec<(f64, Pose)>, EvalError> {
    parse_tum(&fs::read_to_string(path)?)
}
