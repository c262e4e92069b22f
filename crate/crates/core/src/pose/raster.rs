//! Skeleton rasterization: bones as anti-aliased lines, keypoints as discs,
//! with a color-lighten signal on the head set for enhanced frames.

use ndarray::Array3;

use crate::img::{self, Composite};
use crate::scalar::Scalar;

use super::frame::PoseFrame;
use super::layout::SkeletonLayout;

/// Multiplier applied to head-set colors when a frame is enhanced.
pub const HEAD_LIGHTEN_FACTOR: f64 = 1.35;

const BONE_WIDTH: f64 = 1.6;
const POINT_RADIUS: f64 = 1.2;

fn color_of(rgb: [u8; 3], lighten: bool) -> [f64; 3] {
    let mut c = [
        rgb[0] as f64 / 255.0,
        rgb[1] as f64 / 255.0,
        rgb[2] as f64 / 255.0,
    ];
    if lighten {
        for v in &mut c {
            *v = (*v * HEAD_LIGHTEN_FACTOR).min(1.0);
        }
    }
    c
}

/// Draw the skeleton onto a black canvas. Keypoints below the visibility
/// threshold are skipped, as is any bone touching one. Max-compositing makes
/// the result independent of draw order.
pub fn rasterize_pose<S: Scalar>(
    frame: &PoseFrame<S>,
    layout: &SkeletonLayout,
    resolution: (usize, usize),
) -> Array3<S> {
    let (w, h) = resolution;
    assert!(w > 0 && h > 0, "resolution must be positive");
    let mut canvas = Array3::<S>::zeros((h, w, 3));

    for (bi, &(a, b)) in layout.bone_list.iter().enumerate() {
        if !frame.visible(a) || !frame.visible(b) {
            continue;
        }
        let lighten = frame.enhanced && (layout.is_head_index(a) || layout.is_head_index(b));
        let pa = frame.point(a);
        let pb = frame.point(b);
        img::draw_line(
            &mut canvas,
            [pa[0].to_f64(), pa[1].to_f64()],
            [pb[0].to_f64(), pb[1].to_f64()],
            color_of(layout.bone_colors[bi], lighten),
            BONE_WIDTH,
            Composite::Max,
        );
    }
    for i in 0..frame.keypoint_count().min(layout.keypoint_count) {
        if !frame.visible(i) {
            continue;
        }
        let lighten = frame.enhanced && layout.is_head_index(i);
        let p = frame.point(i);
        img::draw_disc(
            &mut canvas,
            [p[0].to_f64(), p[1].to_f64()],
            POINT_RADIUS,
            color_of(layout.keypoint_colors[i], lighten),
            Composite::Max,
        );
    }
    canvas
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::test_poses::standard_pose;

    #[test]
    fn invisible_pose_renders_black() {
        let layout = SkeletonLayout::stick34();
        let mut f = standard_pose();
        f.confidence.fill(0.0);
        let img = rasterize_pose(&f, &layout, (64, 64));
        assert_eq!(img.sum(), 0.0);
    }

    #[test]
    fn rendering_is_deterministic() {
        let layout = SkeletonLayout::stick34();
        let f = standard_pose();
        let a = rasterize_pose(&f, &layout, (64, 64));
        let b = rasterize_pose(&f, &layout, (64, 64));
        assert_eq!(a, b);
    }

    #[test]
    fn enhanced_differs_only_in_head_region() {
        let layout = SkeletonLayout::stick34();
        let plain = standard_pose();
        let mut lit = plain.clone();
        lit.enhanced = true;
        let a = rasterize_pose(&plain, &layout, (64, 64));
        let b = rasterize_pose(&lit, &layout, (64, 64));

        // Head bounding region: bbox over head-set keypoints and both
        // endpoints of every lightened bone, inflated by the draw radius.
        let mut region_points = layout.head_set();
        for bi in layout.head_bones() {
            let (a, b) = layout.bone_list[bi];
            region_points.push(a);
            region_points.push(b);
        }
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for &i in &region_points {
            let p = plain.point(i);
            for d in 0..2 {
                min[d] = min[d].min(p[d]);
                max[d] = max[d].max(p[d]);
            }
        }
        let pad = 3.0;
        let mut diff_outside = 0usize;
        let mut diff_inside = 0usize;
        for y in 0..64usize {
            for x in 0..64usize {
                let differs = (0..3).any(|c| a[[y, x, c]] != b[[y, x, c]]);
                if !differs {
                    continue;
                }
                let inside = (x as f64) >= min[0] - pad
                    && (x as f64) <= max[0] + pad
                    && (y as f64) >= min[1] - pad
                    && (y as f64) <= max[1] + pad;
                if inside {
                    diff_inside += 1;
                } else {
                    diff_outside += 1;
                }
            }
        }
        assert_eq!(diff_outside, 0);
        assert!(diff_inside > 0, "lightening must change head pixels");
    }

    #[test]
    fn non_enhanced_never_exceeds_color_table() {
        let layout = SkeletonLayout::stick34();
        let f = standard_pose();
        let img = rasterize_pose(&f, &layout, (64, 64));
        let max_table = layout
            .bone_colors
            .iter()
            .chain(layout.keypoint_colors.iter())
            .flat_map(|c| c.iter())
            .map(|&v| v as f64 / 255.0)
            .fold(0.0_f64, f64::max);
        let max_px = img.iter().fold(0.0_f64, |m, &v| m.max(v));
        assert!(max_px <= max_table + 1e-12);
    }

    #[test]
    fn skips_bones_with_invisible_endpoint() {
        let layout = SkeletonLayout::stick34();
        let mut f = standard_pose();
        // Hide everything except two connected joints: only that bone plus
        // the two discs should render.
        f.confidence.fill(0.0);
        f.confidence[crate::pose::layout::keypoint::NECK] = 1.0;
        f.confidence[crate::pose::layout::keypoint::NOSE] = 1.0;
        let img = rasterize_pose(&f, &layout, (64, 64));
        assert!(img.sum() > 0.0);
        // Ankle area stays black.
        let p = f.point(crate::pose::layout::keypoint::R_ANKLE);
        let (x, y) = (p[0] as usize, p[1] as usize);
        assert_eq!(img[[y, x, 0]], 0.0);
    }
}
