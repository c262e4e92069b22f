//! Pose-driven character animation from spatially misaligned references,
//! small enough to train and verify on one machine.
//!
//! The crate covers the full loop: a procedural stick-figure corpus with
//! exact keypoints, an exactly invertible latent codec, a text-free diffusion
//! transformer with a parallel reference extractor and fusion attention,
//! identity-robust pose control, rectified-flow training in three stages, and
//! an Euler sampler with cumulative guidance and token-replace long-video
//! stitching.
//!
//! All numeric code is generic over the scalar type ([`scalar::Scalar`]);
//! f32 is the training default and f64 backs the finite-difference gradient
//! checks. Concrete aliases live at the crate root.

pub mod codec;
pub mod img;
pub mod model;
pub mod nn;
pub mod pose;
pub mod scalar;
pub mod tape;

pub use scalar::Scalar;

/// Default training scalar.
pub type Real = f32;

/// f32 pose frame, the common case in pipelines.
pub type PoseFrame32 = pose::PoseFrame<f32>;
pub type PoseSequence32 = pose::PoseSequence<f32>;

#[doc(hidden)]
pub fn cli_unavailable() -> anyhow::Result<()> {
    anyhow::bail!("cli not wired up yet")
}
