//! Pose containers: a single frame of keypoints, a sequence, and the
//! spatially adjusted reference triplet fed to the model.

use ndarray::{Array1, Array2, Array3};

use crate::scalar::Scalar;

use super::ops::VISIBILITY_THRESHOLD;

/// One frame of 2D keypoints in pixel coordinates (origin top-left).
///
/// A keypoint with confidence below the visibility threshold is treated as
/// absent by every geometry operation. `enhanced` marks frames whose head
/// landmarks were replaced by face region enhancement; rasterization lightens
/// head colors for such frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFrame<S: Scalar> {
    /// `K x 2` (x, y) pixel coordinates.
    pub points: Array2<S>,
    /// `K` confidences in `[0, 1]`.
    pub confidence: Array1<S>,
    pub enhanced: bool,
}

impl<S: Scalar> PoseFrame<S> {
    pub fn new(points: Array2<S>, confidence: Array1<S>) -> Self {
        assert_eq!(points.nrows(), confidence.len(), "points/confidence agree");
        assert_eq!(points.ncols(), 2);
        Self {
            points,
            confidence,
            enhanced: false,
        }
    }

    /// All-confident frame from a coordinate list.
    pub fn from_coords(coords: &[[f64; 2]]) -> Self {
        let k = coords.len();
        let mut points = Array2::zeros((k, 2));
        for (i, c) in coords.iter().enumerate() {
            points[[i, 0]] = S::from_f64(c[0]);
            points[[i, 1]] = S::from_f64(c[1]);
        }
        Self::new(points, Array1::from_elem(k, S::one()))
    }

    pub fn keypoint_count(&self) -> usize {
        self.points.nrows()
    }

    pub fn visible(&self, idx: usize) -> bool {
        self.confidence[idx].to_f64() >= VISIBILITY_THRESHOLD
    }

    pub fn point(&self, idx: usize) -> [S; 2] {
        [self.points[[idx, 0]], self.points[[idx, 1]]]
    }

    pub fn set_point(&mut self, idx: usize, p: [S; 2]) {
        self.points[[idx, 0]] = p[0];
        self.points[[idx, 1]] = p[1];
    }

    /// Euclidean distance between two keypoints.
    pub fn distance(&self, a: usize, b: usize) -> S {
        let pa = self.point(a);
        let pb = self.point(b);
        let dx = pa[0] - pb[0];
        let dy = pa[1] - pb[1];
        (dx * dx + dy * dy).sqrt()
    }

    /// Visibility bitmask at the default threshold.
    pub fn visibility_mask(&self) -> Vec<bool> {
        (0..self.keypoint_count()).map(|i| self.visible(i)).collect()
    }

    /// Apply `p -> scale * p + offset` to every keypoint.
    pub fn transformed(&self, scale: S, offset: [S; 2]) -> Self {
        let mut out = self.clone();
        for i in 0..self.keypoint_count() {
            let p = self.point(i);
            out.set_point(i, [p[0] * scale + offset[0], p[1] * scale + offset[1]]);
        }
        out
    }

    /// Cast every coordinate/confidence to another scalar type.
    pub fn cast<T: Scalar>(&self) -> PoseFrame<T> {
        PoseFrame {
            points: self.points.mapv(|v| T::from_f64(v.to_f64())),
            confidence: self.confidence.mapv(|v| T::from_f64(v.to_f64())),
            enhanced: self.enhanced,
        }
    }
}

/// An ordered run of pose frames sharing one resolution and keypoint count.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence<S: Scalar> {
    pub frames: Vec<PoseFrame<S>>,
    pub fps: f64,
    /// (width, height) in pixels.
    pub resolution: (usize, usize),
}

impl<S: Scalar> PoseSequence<S> {
    pub fn new(frames: Vec<PoseFrame<S>>, fps: f64, resolution: (usize, usize)) -> Self {
        if let Some(first) = frames.first() {
            let k = first.keypoint_count();
            assert!(
                frames.iter().all(|f| f.keypoint_count() == k),
                "all frames share one keypoint count"
            );
        }
        Self {
            frames,
            fps,
            resolution,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// The conditioning unit consumed by the model: a zero-padded reference
/// image, the padding mask (1 = padded/unknown, 0 = untouched source pixels)
/// and the reference pose in the same canvas. The reference pose is never
/// enhanced.
#[derive(Debug, Clone)]
pub struct ReferenceTriplet<S: Scalar> {
    /// `H x W x 3`, float in `[0, 1]`.
    pub image: Array3<S>,
    /// `H x W` binary.
    pub mask: Array2<S>,
    pub pose: PoseFrame<S>,
}

impl<S: Scalar> ReferenceTriplet<S> {
    pub fn new(image: Array3<S>, mask: Array2<S>, pose: PoseFrame<S>) -> Self {
        assert_eq!(image.shape()[0], mask.shape()[0]);
        assert_eq!(image.shape()[1], mask.shape()[1]);
        assert_eq!(image.shape()[2], 3);
        assert!(!pose.enhanced, "reference pose must not be enhanced");
        debug_assert!(mask.iter().all(|&m| m == S::zero() || m == S::one()));
        Self { image, mask, pose }
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn visibility_threshold_is_half() {
        let mut f = PoseFrame::<f32>::from_coords(&[[0.0, 0.0], [1.0, 1.0]]);
        f.confidence[0] = 0.49;
        f.confidence[1] = 0.5;
        assert!(!f.visible(0));
        assert!(f.visible(1));
    }

    #[test]
    fn transform_moves_points() {
        let f = PoseFrame::<f64>::from_coords(&[[1.0, 2.0]]);
        let g = f.transformed(2.0, [10.0, 20.0]);
        assert_eq!(g.point(0), [12.0, 24.0]);
    }

    #[test]
    #[should_panic]
    fn triplet_rejects_enhanced_reference_pose() {
        let mut pose = PoseFrame::<f32>::from_coords(&[[0.0, 0.0]]);
        pose.enhanced = true;
        let _ = ReferenceTriplet::new(
            Array3::zeros((4, 4, 3)),
            Array2::zeros((4, 4)),
            pose,
        );
    }
}
