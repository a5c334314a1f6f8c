//! 256-bit BRIEF descriptors on a 9x9 box-smoothed image.
//!
//! Box sums come from an integral image and are compared directly, so the
//! descriptor is exact integer arithmetic with no division or float rounding.

use super::{GrayImage, ImageError, Keypoint, BORDER, BRIEF_PATTERN};

/// Half-width of the 31x31 sampling patch.
pub const PATCH_HALF: i32 = 15;
/// Half-width of the 9x9 smoothing box.
pub const SMOOTH_HALF: i32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct BriefDescriptor(pub [u8; 32]);

impl BriefDescriptor {
    pub const ZERO: BriefDescriptor = BriefDescriptor([0; 32]);
    pub const ONES: BriefDescriptor = BriefDescriptor([0xFF; 32]);

    #[inline]
    pub fn bit(&self, b: usize) -> bool {
        self.0[b / 8] >> (b % 8) & 1 == 1
    }

    #[inline]
    pub fn set_bit(&mut self, b: usize, value: bool) {
        if value {
            self.0[b / 8] |= 1 << (b % 8);
        } else {
            self.0[b / 8] &= !(1 << (b % 8));
        }
    }

    fn words(&self) -> [u64; 4] {
        let mut w = [0u64; 4];
        for (k, chunk) in self.0.chunks_exact(8).enumerate() {
            w[k] = u64::from_le_bytes(chunk.try_into().unwrap());
        }
        w
    }

    pub fn complement(&self) -> BriefDescriptor {
        BriefDescriptor(self.0.map(|b| !b))
    }
}

/// Number of differing bits.
pub fn hamming(a: &BriefDescriptor, b: &BriefDescriptor) -> u32 {
    let (wa, wb) = (a.words(), b.words());
    (0..4).map(|k| (wa[k] ^ wb[k]).count_ones()).sum()
}

/// Summed-area table with a zero row and column in front.
pub struct IntegralImage {
    width: usize,
    sums: Vec<u64>,
}

impl IntegralImage {
    pub fn new(img: &GrayImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let stride = w + 1;
        let mut sums = vec![0u64; stride * (h + 1)];
        for v in 0..h {
            let mut row = 0u64;
            for u in 0..w {
                row += img.get(u as u32, v as u32) as u64;
                sums[(v + 1) * stride + u + 1] = sums[v * stride + u + 1] + row;
            }
        }
        Self { width: w, sums }
    }

    /// Sum over the inclusive rectangle `[u0, u1] x [v0, v1]`.
    pub fn rect(&self, u0: usize, v0: usize, u1: usize, v1: usize) -> u64 {
        let s = self.width + 1;
        self.sums[(v1 + 1) * s + u1 + 1] + self.sums[v0 * s + u0] - self.sums[v0 * s + u1 + 1] - self.sums[(v1 + 1) * s + u0]
    }
}

/// 9x9 box sum centred on `(u, v)`; the box must lie inside the image.
pub fn box_sum(ii: &IntegralImage, u: i32, v: i32) -> u64 {
    let r = SMOOTH_HALF;
    ii.rect((u - r) as usize, (v - r) as usize, (u + r) as usize, (v + r) as usize)
}

fn check_border(img: &GrayImage, kp: &Keypoint) -> Result<(), ImageError> {
    let ok = kp.u >= BORDER
        && kp.v >= BORDER
        && kp.u + BORDER < img.width()
        && kp.v + BORDER < img.height();
    if ok {
        Ok(())
    } else {
        Err(ImageError::KeypointOutsideBorder {
            u: kp.u,
            v: kp.v,
            border: BORDER,
        })
    }
}

/// Bit `b` is set iff the smoothed intensity at `p + x_b` is below that at `p + y_b`.
pub fn compute_brief(img: &GrayImage, kps: &[Keypoint]) -> Result<Vec<BriefDescriptor>, ImageError> {
    for kp in kps {
        check_border(img, kp)?;
    }
    let ii = IntegralImage::new(img);
    Ok(kps
        .iter()
        .map(|kp| {
            let (u, v) = (kp.u as i32, kp.v as i32);
            let mut d = BriefDescriptor::ZERO;
            for (b, t) in BRIEF_PATTERN.iter().enumerate() {
                let a = box_sum(&ii, u + t[0] as i32, v + t[1] as i32);
                let c = box_sum(&ii, u + t[2] as i32, v + t[3] as i32);
                d.set_bit(b, a < c);
            }
            d
        })
        .collect())
}
