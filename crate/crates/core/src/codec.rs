//! Exactly invertible latent codec.
//!
//! Spatial space-to-depth by `spatial_factor` plus temporal folding: pixel
//! frame 0 becomes latent frame 0 on its own (replicated across the four
//! temporal channel slots so every latent frame has the same channel count),
//! and each following group of four pixel frames folds into one latent frame.
//! Legal clip lengths are F = 1 or F = 1 + 4k; a five-frame clip encodes to
//! two latent frames, a 29-frame clip to eight.
//!
//! Because encode/decode and patchify/unpatchify are exact mutual inverses,
//! several model-level claims (token-replace boundaries, mask handling)
//! become bit-exact tests instead of approximations.

use ndarray::{Array2, Array3, Array4};
use thiserror::Error;

use crate::scalar::Scalar;

/// Pixel frames folded into one latent frame (after the lone first frame).
pub const TEMPORAL_GROUP: usize = 4;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("shape error: {0}")]
    Shape(String),
}

/// Latent representation of a clip: `F' x H' x W' x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVolume<S: Scalar> {
    pub data: Array4<S>,
    /// Pixel-frame count of the source clip (needed to invert the temporal
    /// grouping; F' = 1 encodes both F = 1 and nothing else).
    pub source_frames: usize,
}

impl<S: Scalar> LatentVolume<S> {
    pub fn latent_frames(&self) -> usize {
        self.data.shape()[0]
    }
    pub fn spatial(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }
    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }
}

/// Raw patch tokens with their integer (frame, row, col) grid coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid<S: Scalar> {
    /// `T x D` token matrix, `D = C * p_h * p_w`; order is frame-major then
    /// row-major over the patch grid.
    pub data: Array2<S>,
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
    pub patch: (usize, usize, usize),
}

impl<S: Scalar> TokenGrid<S> {
    pub fn token_count(&self) -> usize {
        self.frames * self.rows * self.cols
    }
    /// (f, h, w) grid coordinate of token `i`.
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let per_frame = self.rows * self.cols;
        (i / per_frame, (i % per_frame) / self.cols, i % self.cols)
    }
    pub fn tokens_per_frame(&self) -> usize {
        self.rows * self.cols
    }
}

/// The invertible codec; all methods are pure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Codec {
    pub spatial_factor: usize,
}

impl Codec {
    pub fn new(spatial_factor: usize) -> Self {
        assert!(spatial_factor >= 1);
        Self { spatial_factor }
    }

    /// Channels of an encoded volume: 3 * s^2 * temporal group.
    pub fn latent_channels(&self) -> usize {
        3 * self.spatial_factor * self.spatial_factor * TEMPORAL_GROUP
    }

    /// Latent frame count for a pixel frame count.
    pub fn latent_frames(&self, pixel_frames: usize) -> Result<usize, CodecError> {
        if pixel_frames == 1 {
            return Ok(1);
        }
        if pixel_frames == 0 || (pixel_frames - 1) % TEMPORAL_GROUP != 0 {
            return Err(CodecError::Shape(format!(
                "frame count {pixel_frames} not in {{1}} ∪ {{1+4k}}"
            )));
        }
        Ok(1 + (pixel_frames - 1) / TEMPORAL_GROUP)
    }

    fn check_spatial(&self, h: usize, w: usize) -> Result<(), CodecError> {
        if h % self.spatial_factor != 0 || w % self.spatial_factor != 0 {
            return Err(CodecError::Shape(format!(
                "spatial dims {h}x{w} not divisible by {}",
                self.spatial_factor
            )));
        }
        Ok(())
    }

    /// Pixel frame index feeding temporal slot `g` of latent frame `lf`.
    fn src_frame(lf: usize, g: usize) -> usize {
        if lf == 0 {
            0
        } else {
            1 + (lf - 1) * TEMPORAL_GROUP + g
        }
    }

    /// Encode `F x H x W x 3` pixel frames. Lossless; see [`Codec::decode`].
    pub fn encode<S: Scalar>(&self, frames: &Array4<S>) -> Result<LatentVolume<S>, CodecError> {
        let (f, h, w, c) = (
            frames.shape()[0],
            frames.shape()[1],
            frames.shape()[2],
            frames.shape()[3],
        );
        if c != 3 {
            return Err(CodecError::Shape(format!("expected 3 channels, got {c}")));
        }
        self.check_spatial(h, w)?;
        let fp = self.latent_frames(f)?;
        let s = self.spatial_factor;
        let mut out = Array4::<S>::zeros((fp, h / s, w / s, self.latent_channels()));
        for lf in 0..fp {
            for g in 0..TEMPORAL_GROUP {
                let sf = Self::src_frame(lf, g);
                for y in 0..h / s {
                    for x in 0..w / s {
                        for dy in 0..s {
                            for dx in 0..s {
                                for ch in 0..3 {
                                    let c_idx = (((g * s + dy) * s) + dx) * 3 + ch;
                                    out[[lf, y, x, c_idx]] =
                                        frames[[sf, y * s + dy, x * s + dx, ch]];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(LatentVolume {
            data: out,
            source_frames: f,
        })
    }

    /// Exact inverse of [`Codec::encode`]. For latent frame 0 the first
    /// temporal slot is read back (the encoder wrote identical replicas).
    pub fn decode<S: Scalar>(&self, latents: &LatentVolume<S>) -> Result<Array4<S>, CodecError> {
        let s = self.spatial_factor;
        let (fp, hp, wp, c) = (
            latents.data.shape()[0],
            latents.data.shape()[1],
            latents.data.shape()[2],
            latents.data.shape()[3],
        );
        if c != self.latent_channels() {
            return Err(CodecError::Shape(format!(
                "latent channels {c} != {}",
                self.latent_channels()
            )));
        }
        let f = latents.source_frames;
        if self.latent_frames(f)? != fp {
            return Err(CodecError::Shape(format!(
                "source_frames {f} inconsistent with latent frames {fp}"
            )));
        }
        let mut out = Array4::<S>::zeros((f, hp * s, wp * s, 3));
        for lf in 0..fp {
            let groups = if lf == 0 { 1 } else { TEMPORAL_GROUP };
            for g in 0..groups {
                let sf = Self::src_frame(lf, g);
                for y in 0..hp {
                    for x in 0..wp {
                        for dy in 0..s {
                            for dx in 0..s {
                                for ch in 0..3 {
                                    let c_idx = (((g * s + dy) * s) + dx) * 3 + ch;
                                    out[[sf, y * s + dy, x * s + dx, ch]] =
                                        latents.data[[lf, y, x, c_idx]];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Encode a binary `H x W` mask: replicated to 3 channels and to the
    /// clip's frame count, then encoded exactly like pixel frames.
    pub fn encode_mask<S: Scalar>(
        &self,
        mask: &Array2<S>,
        frames: usize,
    ) -> Result<LatentVolume<S>, CodecError> {
        let (h, w) = (mask.shape()[0], mask.shape()[1]);
        let mut vol = Array4::<S>::zeros((frames, h, w, 3));
        for f in 0..frames {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        vol[[f, y, x, ch]] = mask[[y, x]];
                    }
                }
            }
        }
        self.encode(&vol)
    }
}

/// Concatenate two latent volumes along the channel axis (per the reference
/// extractor's joint image+mask input).
pub fn concat_channels<S: Scalar>(
    a: &LatentVolume<S>,
    b: &LatentVolume<S>,
) -> Result<LatentVolume<S>, CodecError> {
    if a.data.shape()[..3] != b.data.shape()[..3] {
        return Err(CodecError::Shape(format!(
            "channel concat shape mismatch: {:?} vs {:?}",
            a.data.shape(),
            b.data.shape()
        )));
    }
    let data = ndarray::concatenate(ndarray::Axis(3), &[a.data.view(), b.data.view()])
        .map_err(|e| CodecError::Shape(e.to_string()))?;
    Ok(LatentVolume {
        data,
        source_frames: a.source_frames,
    })
}

/// Flatten non-overlapping patches into tokens (frame-major, row-major).
pub fn patchify<S: Scalar>(
    data: &Array4<S>,
    patch: (usize, usize, usize),
) -> Result<TokenGrid<S>, CodecError> {
    let (pt, ph, pw) = patch;
    if pt != 1 {
        return Err(CodecError::Shape("temporal patch size must be 1".into()));
    }
    let (f, h, w, c) = (
        data.shape()[0],
        data.shape()[1],
        data.shape()[2],
        data.shape()[3],
    );
    if h % ph != 0 || w % pw != 0 {
        return Err(CodecError::Shape(format!(
            "grid {h}x{w} not divisible by patch {ph}x{pw}"
        )));
    }
    let (rows, cols) = (h / ph, w / pw);
    let dim = c * ph * pw;
    let mut out = Array2::<S>::zeros((f * rows * cols, dim));
    for fi in 0..f {
        for r in 0..rows {
            for col in 0..cols {
                let t = (fi * rows + r) * cols + col;
                for py in 0..ph {
                    for px in 0..pw {
                        for ch in 0..c {
                            out[[t, (py * pw + px) * c + ch]] =
                                data[[fi, r * ph + py, col * pw + px, ch]];
                        }
                    }
                }
            }
        }
    }
    Ok(TokenGrid {
        data: out,
        frames: f,
        rows,
        cols,
        patch,
    })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<S: Scalar>(grid: &TokenGrid<S>) -> Array4<S> {
    let (_, ph, pw) = grid.patch;
    let c = grid.data.ncols() / (ph * pw);
    let mut out = Array4::<S>::zeros((grid.frames, grid.rows * ph, grid.cols * pw, c));
    for t in 0..grid.token_count() {
        let (fi, r, col) = grid.coords(t);
        for py in 0..ph {
            for px in 0..pw {
                for ch in 0..c {
                    out[[fi, r * ph + py, col * pw + px, ch]] =
                        grid.data[[t, (py * pw + px) * c + ch]];
                }
            }
        }
    }
    out
}

/// Patchify helper for a raw pixel->latent->token pipeline step; keeps the
/// latent's frame bookkeeping out of callers that only need tokens.
pub fn patchify_volume<S: Scalar>(
    vol: &LatentVolume<S>,
    patch: (usize, usize, usize),
) -> Result<TokenGrid<S>, CodecError> {
    patchify(&vol.data, patch)
}
