//! Minimal grayscale image pipeline: PGM files, FAST-9 corners, BRIEF descriptors.

mod brief;
mod brief_pattern;
mod fast;
mod pgm;

use thiserror::Error;

pub use brief::{box_sum, compute_brief, hamming, BriefDescriptor, IntegralImage, PATCH_HALF, SMOOTH_HALF};
pub use brief_pattern::{BRIEF_PATTERN, BRIEF_PATTERN_SEED};
pub use fast::{detect_fast, segment_test, Keypoint, CIRCLE, DEFAULT_FAST_THRESHOLD};
pub use pgm::{decode_pgm, encode_pgm, load_pgm, save_pgm};

/// Keypoints must stay this many pixels away from every image edge.
pub const BORDER: u32 = 20;
/// Smallest width or height accepted by the detector.
pub const MIN_DETECT_SIZE: u32 = 64;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported image format {0:?}, only binary P5 PGM is accepted")]
    UnsupportedFormat(String),
    #[error("malformed PGM header: {0}")]
    MalformedHeader(String),
    #[error("unsupported maxval {0}, only 255 is accepted")]
    UnsupportedMaxval(u32),
    #[error("truncated pixel data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("image {width}x{height} is smaller than the {min}x{min} minimum")]
    TooSmall { width: u32, height: u32, min: u32 },
    #[error("keypoint ({u}, {v}) is inside the {border}-pixel image border")]
    KeypointOutsideBorder { u: u32, v: u32, border: u32 },
    #[error("buffer of {len} bytes does not match {width}x{height}")]
    SizeMismatch { width: u32, height: u32, len: usize },
}

/// Row-major 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self, ImageError> {
        if data.len() != width as usize * height as usize {
            return Err(ImageError::SizeMismatch {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> u8 {
        self.data[v as usize * self.width as usize + u as usize]
    }

    #[inline]
    pub fn set(&mut self, u: u32, v: u32, value: u8) {
        self.data[v as usize * self.width as usize + u as usize] = value;
    }

    /// Every intensity replaced by `255 - value`.
    pub fn inverted(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| 255 - p).collect(),
        }
    }
}
