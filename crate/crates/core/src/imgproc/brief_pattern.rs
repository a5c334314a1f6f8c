//! Frozen BRIEF sampling pattern.
//!
//! Each row is `[du1, dv1, du2, dv2]`: the two patch offsets compared for one bit.
//! Generated once from [`BRIEF_PATTERN_SEED`] (ChaCha8 stream, Box-Muller Gaussian with
//! sigma = 31/5, rounded, clamped to +-15, coincident pairs redrawn). Do not edit by hand.

pub const BRIEF_PATTERN_SEED: u64 = 0x4252_4945_465f_3235;

#[rustfmt::skip]
pub const BRIEF_PATTERN: [[i8; 4]; 256] = [
    [9, 6, 6, 0],
    [3, 8, -2, -4],
    [-8, 1, 7, -9],
    [5, -8, 4, -9],
    [0, 12, 1, -6],
    [-7, -11, -2, -1],
    [2, 3, -2, -13],
    [1, -8, 7, 1],
    [5, -11, 4, 0],
    [-3, 15, 1, -8],
    [7, -4, 3, -4],
    [0, 6, -2, 10],
    [-3, -9, -14, 9],
    [-7, -8, -5, -3],
    [-8, 7, 13, 0],
    [14, -5, -9, -3],
    [1, -1, 3, -5],
    [-1, 2, -4, -1],
    [-11, -1, 6, -6],
    [-6, 1, -3, 10],
    [-5, -3, 1, -6],
    [0, 7, 6, -6],
    [-1, 7, 1, 5],
    [-7, 4, 2, -5],
    [-10, 6, -11, -3],
    [-3, 2, 1, 1],
    [-1, 3, -4, -1],
    [10, 7, 10, -2],
    [1, -1, -8, -5],
    [-3, 0, -3, 8],
    [-10, 4, 3, -12],
    [2, 11, 1, 9],
    [2, 0, 5, 12],
    [-1, -2, -8, 13],
    [2, -4, 15, 2],
    [-3, -1, 5, 0],
    [1, 6, 3, 9],
    [-1, 5, 0, 5],
    [9, -4, -11, 5],
    [1, -1, 0, 8],
    [3, 9, 7, -1],
    [1, 4, 1, 10],
    [-3, -3, -3, 7],
    [3, 4, 5, -6],
    [-14, 0, 1, 11],
    [7, -1, 12, -9],
    [-5, 4, -2, -1],
    [0, 1, 6, -9],
    [0, 11, 5, 9],
    [2, -2, -8, 12],
    [15, -6, 2, -1],
    [-14, 2, -4, 0],
    [3, 3, -4, 6],
    [7, 2, -8, 3],
    [-4, 15, 3, -5],
    [-1, -3, 1, 1],
    [-7, 1, 4, 8],
    [-4, -2, 9, 1],
    [-3, 2, -12, 0],
    [2, -1, -11, 6],
    [3, -9, -7, -9],
    [7, -3, 3, -12],
    [-4, 10, -6, 8],
    [-7, 12, 1, 0],
    [-1, -10, -3, -5],
    [0, -3, -1, 3],
    [5, 6, -2, -1],
    [8, 0, -10, -3],
    [-2, -3, -1, 3],
    [3, 2, -3, 15],
    [-9, -5, -2, 5],
    [9, -8, 0, 7],
    [5, 15, 11, -2],
    [4, -3, 5, -14],
    [3, -2, -1, 4],
    [1, -2, 2, 8],
    [-1, 4, 6, 3],
    [-8, -7, 0, 4],
    [7, 4, -2, -4],
    [11, 6, 3, -8],
    [4, 5, -1, 4],
    [-6, -1, -3, -3],
    [-7, 2, -9, -5],
    [-2, -5, 4, 11],
    [8, -8, 5, -5],
    [-2, 9, -9, 9],
    [15, 11, -3, -1],
    [-12, -9, 6, 6],
    [0, -4, 0, -9],
    [-1, -1, -10, -4],
    [0, -5, 1, 5],
    [-4, 5, -1, 1],
    [3, 1, -2, 0],
    [-1, 12, 0, 5],
    [-2, -7, 8, 8],
    [3, 3, -2, 11],
    [-3, 9, -4, 9],
    [-8, -1, -4, 4],
    [-12, 12, 2, -4],
    [-2, 1, -2, 2],
    [-7, -12, 3, -7],
    [0, 11, 1, -12],
    [-5, -5, 2, -5],
    [3, 3, 5, -3],
    [-1, -6, -10, 9],
    [5, 5, -9, 0],
    [9, 1, -2, -5],
    [2, 0, -3, 1],
    [-5, 9, -7, 0],
    [-1, 9, 2, 1],
    [-4, 6, 10, 2],
    [8, -3, 4, 5],
    [-3, -15, 3, -6],
    [4, 7, 2, 7],
    [-5, 4, 7, 2],
    [6, -9, 3, -7],
    [-1, -2, -1, 8],
    [-4, -6, -8, 9],
    [4, -7, 7, -3],
    [-3, 10, 1, -6],
    [0, 6, 1, -3],
    [0, -1, -5, -3],
    [-15, 2, 2, -4],
    [-11, 8, 0, 0],
    [-3, 13, 10, -2],
    [0, -9, 11, 11],
    [-9, -3, 0, -4],
    [3, 0, 8, -6],
    [9, -9, 0, -11],
    [7, 0, 8, 4],
    [1, -2, -5, -4],
    [3, -4, 5, 6],
    [-8, -2, -8, -6],
    [-6, -11, -5, -12],
    [9, 2, -2, -4],
    [-7, -3, 6, 7],
    [1, 5, 3, -4],
    [6, 3, -8, 6],
    [-8, 3, 2, 2],
    [-4, 6, 5, -2],
    [-6, -9, 1, 6],
    [-1, -1, -11, 7],
    [-1, 5, 1, -1],
    [0, -8, 7, -4],
    [0, 4, -6, 9],
    [1, 3, 0, -1],
    [-3, 0, -3, 1],
    [-8, 0, 0, 12],
    [13, -6, -15, -1],
    [2, -2, -5, 3],
    [-5, 8, 4, -2],
    [-11, 10, 2, -8],
    [1, 2, -6, 0],
    [-1, 15, 12, -3],
    [4, -5, 14, -4],
    [-10, 4, 0, 6],
    [-6, -9, -12, 2],
    [-5, -7, 1, -6],
    [8, -10, 3, 2],
    [4, -6, -6, 4],
    [-5, 0, 1, -3],
    [3, 9, -2, 0],
    [-15, 4, 0, -3],
    [0, -11, -5, -3],
    [15, -12, 9, 12],
    [6, -3, -6, 1],
    [-1, -2, 4, 1],
    [-13, 5, 0, -12],
    [-4, -7, 1, 4],
    [-9, 15, 10, 1],
    [-8, -1, -2, 1],
    [6, 0, -12, -1],
    [-5, -7, -2, 2],
    [-5, 1, -10, 9],
    [-6, -1, 7, 1],
    [14, -1, -2, 2],
    [8, -1, 2, -5],
    [-1, 7, -1, 2],
    [-7, -6, -3, 11],
    [-8, -9, 4, 5],
    [-3, 7, 8, 0],
    [-7, -14, -4, -10],
    [8, -6, -9, 5],
    [-8, 0, -2, -11],
    [-2, 2, -2, 5],
    [2, -1, -13, -11],
    [-2, 0, -5, 5],
    [14, 7, -2, 9],
    [8, 6, -2, -1],
    [-12, 1, -15, 2],
    [13, 5, -3, -13],
    [-3, -1, -2, 1],
    [6, 0, -1, 5],
    [-4, -2, 4, 2],
    [10, 15, 5, 6],
    [-3, 9, 5, -10],
    [-5, 2, 7, -4],
    [1, 9, -14, -13],
    [-2, 7, 0, -1],
    [7, -2, 0, 5],
    [1, 3, 13, -5],
    [-7, -3, 14, -2],
    [-3, -8, 8, -7],
    [-1, 2, 3, 1],
    [-2, 1, 4, -3],
    [-6, -2, -1, -14],
    [-12, -5, -3, 1],
    [9, 4, 0, 4],
    [-4, 2, 2, -9],
    [13, 0, 9, 1],
    [-1, -10, 12, 6],
    [-2, -3, -1, -15],
    [9, 0, 6, 2],
    [-15, 1, -4, -7],
    [2, -2, -6, -9],
    [-5, -7, 1, -9],
    [6, 12, 1, -2],
    [-10, -5, -6, 6],
    [0, 13, -4, -4],
    [-4, -3, 1, 2],
    [-7, -11, 0, 0],
    [-9, 5, 5, 2],
    [-1, -4, 3, 2],
    [-2, -1, 11, 0],
    [0, 1, -2, -14],
    [8, 3, 1, -3],
    [-1, -12, -10, 0],
    [-6, 7, -9, -15],
    [-1, 0, 11, -2],
    [4, 9, -5, -5],
    [1, -5, 5, 3],
    [-15, 1, 3, -4],
    [-7, 11, -9, 5],
    [-5, 1, 0, 4],
    [0, -2, 1, -1],
    [-3, 9, -2, -4],
    [-7, -3, 13, -1],
    [-2, 2, -10, -5],
    [-2, 11, -3, 1],
    [-1, 9, -1, 3],
    [0, 3, -10, -1],
    [-6, -6, -3, -3],
    [-8, -3, -8, 4],
    [10, -4, 2, 3],
    [-5, -13, -12, -1],
    [-14, 3, 1, 14],
    [-1, 2, 3, -2],
    [-1, 0, 4, 0],
    [-1, 12, 15, -13],
    [-6, -1, -2, -10],
    [-1, 6, -7, -15],
    [1, -2, 3, 1],
    [-2, 9, -4, 4],
    [-9, -4, 5, 1],
    [0, 11, 13, -1],
    [4, 0, 4, 7],
];
