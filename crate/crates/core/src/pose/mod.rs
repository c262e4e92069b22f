//! Keypoint-space geometry: skeleton layout, anchor selection, scale
//! estimation, pose-guided translation of a reference into the driving
//! canvas, face region enhancement, and skeleton rasterization.

mod frame;
mod io;
pub(crate) mod layout;
mod ops;
mod raster;
#[cfg(test)]
pub(crate) mod test_poses;

pub use frame::{PoseFrame, PoseSequence, ReferenceTriplet};
pub use io::{read_pose_file, write_pose_file};
pub use layout::{keypoint, SkeletonLayout};
pub use ops::{
    estimate_scale_ratio, face_region_enhance, pose_guided_translate, select_anchor_frame,
    shoulder_axis_angle, similarity_score, VISIBILITY_THRESHOLD,
};
pub use raster::{rasterize_pose, HEAD_LIGHTEN_FACTOR};

use thiserror::Error;

/// Errors from keypoint-space operations.
#[derive(Debug, Error)]
pub enum PoseError {
    #[error("driving sequence is empty")]
    EmptySequence,
    #[error("reference pose has no visible scale pair (shoulders or ears)")]
    NoVisibleScalePair,
    #[error("no scale pair is visible in both poses")]
    NoCommonScalePair,
    #[error("scale pair distance below 1 pixel: {0}")]
    DegenerateDistance(f64),
    #[error("neck or ears not visible in {0} frame")]
    MissingHeadAnchors(&'static str),
    #[error("pose file parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}
