//! Relocalization and global-consistency back end for monocular visual-inertial SLAM.
//!
//! The crate covers the loop-closure side of a keyframe SLAM system:
//!
//! - [`imgproc`]: grayscale PGM I/O, FAST-9 corners and 256-bit BRIEF descriptors.
//! - [`retrieval`]: a hierarchical binary bag-of-words vocabulary and inverted-index database.
//! - [`verify`]: descriptor matching followed by fundamental-matrix and PnP RANSAC.
//! - [`reloc`]: sliding-window relocalization against a fixed loop-closure frame.
//! - [`posegraph`]: the 4-DOF (x, y, z, yaw) pose graph, merging, downsampling and map files.
//! - [`sim`]: a deterministic world/odometry simulator whose drift lives only in x, y, z and yaw.
//! - [`eval`]: absolute trajectory error and TUM trajectory files.
//! - [`pipeline`]: the end-to-end driver used by the command-line tool.

mod binio;
pub mod camera;
pub mod eval;
pub mod geom;
pub mod imgproc;
pub mod keyframe;
pub mod pipeline;
pub mod posegraph;
pub mod reloc;
pub mod retrieval;
pub mod sim;
pub mod solver;
pub mod verify;

pub use camera::CameraIntrinsics;
pub use geom::{Correction4, Pose, YprAngles};
pub use imgproc::{BriefDescriptor, GrayImage, Keypoint};
pub use keyframe::{Feature, Keyframe};
