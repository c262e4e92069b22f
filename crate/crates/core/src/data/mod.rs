//! Procedural stick-figure corpus with exact keypoints, outpainting masks,
//! region-weighted-loss masks, and the bucket-based multi-resolution sampler.

mod bucket;
mod clip;
mod identity;
mod mask;
mod store;

pub use bucket::{bucket_epoch, Bucket, BucketSet, Emission, EmissionKind};
pub use clip::{generate_clip, render_figure, resample_record, ClipRecord, TextBox};
pub use identity::{IdentitySpec, TorsoPattern};
pub use mask::{build_region_masks, face_centered_mask, RegionMasks};
pub use store::{
    generate_dataset, load_clip, load_index, save_clip, ClipEntry, DataGenConfig, DatasetIndex,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("frame count {0} not in {{1}} ∪ {{1+4k}}")]
    InvalidFrameCount(usize),
    #[error("no visible face keypoints")]
    NoVisibleFace,
    #[error("empty bucket: {0}")]
    EmptyBucket(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("pose: {0}")]
    Pose(#[from] crate::pose::PoseError),
    #[error("image: {0}")]
    Image(String),
}
