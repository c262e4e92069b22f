//! Rotation tables for three-axis rotary position embedding.
//!
//! Each attention head splits into temporal / height / width sub-blocks;
//! every even-odd feature pair inside a sub-block rotates by
//! `position * base^(-2i / axis_dim)`. Pinning the temporal coordinate to
//! zero (the fusion-attention query/key mode) makes reference lookups
//! independent of absolute frame positions; the relative property of the
//! remaining axes is untouched.

use std::rc::Rc;

use ndarray::Array2;

use crate::scalar::Scalar;
use crate::tape::RotationTable;

/// Per-head feature split across (temporal, height, width), each even.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RopeSplit {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl RopeSplit {
    pub fn head_dim(&self) -> usize {
        self.t + self.h + self.w
    }
    pub fn pairs(&self) -> usize {
        self.head_dim() / 2
    }
}

/// Token coordinates of a dense grid, frame-major then row-major, with an
/// optional constant shift on the frame axis (used by extrapolation tests).
pub fn grid_coords(
    frames: usize,
    rows: usize,
    cols: usize,
    frame_offset: usize,
) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::with_capacity(frames * rows * cols);
    for f in 0..frames {
        for r in 0..rows {
            for c in 0..cols {
                out.push((f + frame_offset, r, c));
            }
        }
    }
    out
}

/// Build the cos/sin table for a coordinate list. With `temporal_zero` the
/// frame coordinate contributes a zero angle (identity rotation on the
/// temporal sub-block) for every token.
pub fn build_table<S: Scalar>(
    coords: &[(usize, usize, usize)],
    split: RopeSplit,
    base: f64,
    temporal_zero: bool,
) -> Rc<RotationTable<S>> {
    assert!(split.t % 2 == 0 && split.h % 2 == 0 && split.w % 2 == 0);
    let pairs = split.pairs();
    let mut cos = Array2::<S>::zeros((coords.len(), pairs));
    let mut sin = Array2::<S>::zeros((coords.len(), pairs));
    for (tok, &(f, r, c)) in coords.iter().enumerate() {
        let mut p = 0usize;
        for (axis_dim, pos) in [
            (split.t, if temporal_zero { 0 } else { f }),
            (split.h, r),
            (split.w, c),
        ] {
            for i in 0..axis_dim / 2 {
                let freq = base.powf(-2.0 * i as f64 / axis_dim as f64);
                let angle = pos as f64 * freq;
                cos[[tok, p]] = S::from_f64(angle.cos());
                sin[[tok, p]] = S::from_f64(angle.sin());
                p += 1;
            }
        }
    }
    Rc::new(RotationTable { cos, sin })
}
