//! FAST-9/16 segment-test corners with 3x3 non-maximum suppression and an 8x8
//! spatial bucketing grid.

use super::{GrayImage, ImageError, BORDER, MIN_DETECT_SIZE};

pub const DEFAULT_FAST_THRESHOLD: u8 = 20;

/// Bresenham circle of radius 3, clockwise from the top.
pub const CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

const ARC: usize = 9;
const GRID: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Keypoint {
    pub u: u32,
    pub v: u32,
    /// Summed intensity excess over the threshold along the circle.
    pub score: u32,
}

/// Segment-test score at `(u, v)`, or `None` when the pixel is not a corner.
/// The caller guarantees the circle lies inside the image.
pub fn segment_test(img: &GrayImage, u: u32, v: u32, threshold: u8) -> Option<u32> {
    let c = img.get(u, v) as i32;
    let t = threshold as i32;
    let mut ring = [0i32; 16];
    for (k, (du, dv)) in CIRCLE.iter().enumerate() {
        ring[k] = img.get((u as i32 + du) as u32, (v as i32 + dv) as u32) as i32;
    }
    let brighter = ring.map(|p| p > c + t);
    let darker = ring.map(|p| p < c - t);
    if has_arc(&brighter) {
        Some(ring.iter().map(|&p| (p - c - t).max(0) as u32).sum())
    } else if has_arc(&darker) {
        Some(ring.iter().map(|&p| (c - t - p).max(0) as u32).sum())
    } else {
        None
    }
}

fn has_arc(flags: &[bool; 16]) -> bool {
    let mut run = 0;
    for k in 0..(16 + ARC - 1) {
        if flags[k % 16] {
            run += 1;
            if run >= ARC {
                return true;
            }
        } else {
            run = 0;
        }
    }
    false
}

fn beats(a: &Keypoint, b: &Keypoint) -> bool {
    a.score > b.score || (a.score == b.score && (a.v, a.u) < (b.v, b.u))
}

/// Detects at most `target` FAST-9 corners, bucketed over an 8x8 grid with a
/// per-cell cap of `ceil(target / 64)`, sorted by descending score.
pub fn detect_fast(img: &GrayImage, threshold: u8, target: usize) -> Result<Vec<Keypoint>, ImageError> {
    let (w, h) = (img.width(), img.height());
    if w < MIN_DETECT_SIZE || h < MIN_DETECT_SIZE {
        return Err(ImageError::TooSmall {
            width: w,
            height: h,
            min: MIN_DETECT_SIZE,
        });
    }
    if target == 0 {
        return Ok(Vec::new());
    }
    let mut scores = vec![0u32; (w * h) as usize];
    let mut corners = Vec::new();
    for v in BORDER..h - BORDER {
        for u in BORDER..w - BORDER {
            if let Some(score) = segment_test(img, u, v, threshold) {
                // Stored +1 so that zero marks "not a corner".
                scores[(v * w + u) as usize] = score + 1;
                corners.push(Keypoint { u, v, score });
            }
        }
    }
    let suppressed: Vec<Keypoint> = corners
        .into_iter()
        .filter(|kp| {
            for dv in -1i32..=1 {
                for du in -1i32..=1 {
                    if du == 0 && dv == 0 {
                        continue;
                    }
                    let (nu, nv) = ((kp.u as i32 + du) as u32, (kp.v as i32 + dv) as u32);
                    let s = scores[(nv * w + nu) as usize];
                    if s > 0 {
                        let other = Keypoint { u: nu, v: nv, score: s - 1 };
                        if !beats(kp, &other) {
                            return false;
                        }
                    }
                }
            }
            true
        })
        .collect();

    let cap = target.div_ceil((GRID * GRID) as usize);
    let mut cells: Vec<Vec<Keypoint>> = vec![Vec::new(); (GRID * GRID) as usize];
    for kp in suppressed {
        let cell = (kp.v * GRID / h) * GRID + kp.u * GRID / w;
        cells[cell as usize].push(kp);
    }
    let order = |a: &Keypoint, b: &Keypoint| b.score.cmp(&a.score).then((a.v, a.u).cmp(&(b.v, b.u)));
    let mut out = Vec::new();
    for mut cell in cells {
        cell.sort_by(order);
        cell.truncate(cap);
        out.extend(cell);
    }
    out.sort_by(order);
    out.truncate(target);
    Ok(out)
}
