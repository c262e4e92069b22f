//! Geometry over keypoints: anchor-frame selection, cross-scale ratio
//! estimation, reference translation into the driving canvas, and face
//! region enhancement.

use ndarray::{Array2, Array3};

use crate::img;
use crate::scalar::Scalar;

use super::frame::{PoseFrame, PoseSequence, ReferenceTriplet};
use super::layout::{keypoint as kp, SkeletonLayout};
use super::PoseError;

/// Keypoints below this confidence are absent for every geometry op.
pub const VISIBILITY_THRESHOLD: f64 = 0.5;

/// Scale pairs in priority order: shoulders, then ears.
const SCALE_PAIRS: [(usize, usize); 2] = [(kp::R_SHOULDER, kp::L_SHOULDER), (kp::R_EAR, kp::L_EAR)];

fn pair_visible<S: Scalar>(f: &PoseFrame<S>, pair: (usize, usize)) -> bool {
    f.visible(pair.0) && f.visible(pair.1)
}

/// Angle of the left-right shoulder axis, falling back to the ear axis.
/// `None` when neither pair is visible.
pub fn shoulder_axis_angle<S: Scalar>(f: &PoseFrame<S>) -> Option<f64> {
    for (r, l) in [(kp::R_SHOULDER, kp::L_SHOULDER), (kp::R_EAR, kp::L_EAR)] {
        if f.visible(r) && f.visible(l) {
            let pr = f.point(r);
            let pl = f.point(l);
            return Some(
                (pl[1].to_f64() - pr[1].to_f64()).atan2(pl[0].to_f64() - pr[0].to_f64()),
            );
        }
    }
    None
}

/// Pose-orientation similarity: equal-weight blend of the cosine of the
/// shoulder-axis angle difference and the Jaccard overlap of the visibility
/// bitmasks. A frame missing the axis pair contributes a zero cosine term.
pub fn similarity_score<S: Scalar>(reference: &PoseFrame<S>, frame: &PoseFrame<S>) -> f64 {
    let cos_term = match (shoulder_axis_angle(reference), shoulder_axis_angle(frame)) {
        (Some(a), Some(b)) => (a - b).cos(),
        _ => 0.0,
    };
    let ra = reference.visibility_mask();
    let rb = frame.visibility_mask();
    let inter = ra.iter().zip(&rb).filter(|(a, b)| **a && **b).count();
    let union = ra.iter().zip(&rb).filter(|(a, b)| **a || **b).count();
    let jaccard = if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    };
    0.5 * cos_term + 0.5 * jaccard
}

/// Index of the driving frame whose pose orientation is most similar to the
/// reference. Ties break toward the earliest index.
pub fn select_anchor_frame<S: Scalar>(
    reference_pose: &PoseFrame<S>,
    driving: &PoseSequence<S>,
) -> Result<usize, PoseError> {
    if driving.is_empty() {
        return Err(PoseError::EmptySequence);
    }
    if !SCALE_PAIRS.iter().any(|&p| pair_visible(reference_pose, p)) {
        return Err(PoseError::NoVisibleScalePair);
    }
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (i, f) in driving.frames.iter().enumerate() {
        let score = similarity_score(reference_pose, f);
        if score > best_score {
            best_score = score;
            best = i;
        }
    }
    Ok(best)
}

/// Scale ratio `anchor / reference` from the highest-priority pair visible in
/// both poses (shoulders before ears).
pub fn estimate_scale_ratio<S: Scalar>(
    reference_pose: &PoseFrame<S>,
    anchor_pose: &PoseFrame<S>,
) -> Result<S, PoseError> {
    for &pair in &SCALE_PAIRS {
        if pair_visible(reference_pose, pair) && pair_visible(anchor_pose, pair) {
            let dr = reference_pose.distance(pair.0, pair.1).to_f64();
            let da = anchor_pose.distance(pair.0, pair.1).to_f64();
            if dr < 1.0 {
                return Err(PoseError::DegenerateDistance(dr));
            }
            if da < 1.0 {
                return Err(PoseError::DegenerateDistance(da));
            }
            return Ok(S::from_f64(da / dr));
        }
    }
    Err(PoseError::NoCommonScalePair)
}

/// Alignment point for translation: neck, else mid-shoulder.
fn align_point<S: Scalar>(f: &PoseFrame<S>) -> Result<[f64; 2], PoseError> {
    if f.visible(kp::NECK) {
        let p = f.point(kp::NECK);
        return Ok([p[0].to_f64(), p[1].to_f64()]);
    }
    if pair_visible(f, (kp::R_SHOULDER, kp::L_SHOULDER)) {
        let a = f.point(kp::R_SHOULDER);
        let b = f.point(kp::L_SHOULDER);
        return Ok([
            0.5 * (a[0].to_f64() + b[0].to_f64()),
            0.5 * (a[1].to_f64() + b[1].to_f64()),
        ]);
    }
    Err(PoseError::Invalid(
        "no alignment anchor: neck and shoulders invisible".into(),
    ))
}

/// Similarity-align the reference into the driving canvas.
///
/// The reference is rescaled by the cross-scale ratio against the anchor
/// frame, translated so its neck (or mid-shoulder) lands on the anchor's,
/// then cropped / zero-padded to the driving resolution. The returned mask is
/// 1 exactly on pixels that carry no source content, and the reference pose
/// is mapped through the same transform.
pub fn pose_guided_translate<S: Scalar>(
    reference_image: &Array3<S>,
    reference_pose: &PoseFrame<S>,
    driving: &PoseSequence<S>,
) -> Result<ReferenceTriplet<S>, PoseError> {
    let anchor_idx = select_anchor_frame(reference_pose, driving)?;
    let anchor = &driving.frames[anchor_idx];
    let ratio = estimate_scale_ratio(reference_pose, anchor)?.to_f64();

    let ref_align = align_point(reference_pose)?;
    let anchor_align = align_point(anchor)?;
    // Integer placement offset keeps image pixels and mask consistent; the
    // pose uses the same rounded offset with the exact scale.
    let off_x = (anchor_align[0] - ratio * ref_align[0]).round();
    let off_y = (anchor_align[1] - ratio * ref_align[1]).round();

    let (src_h, src_w) = (reference_image.shape()[0], reference_image.shape()[1]);
    let dst_w = ((src_w as f64) * ratio).round().max(1.0) as usize;
    let dst_h = ((src_h as f64) * ratio).round().max(1.0) as usize;
    let resized = img::bilinear_resize(reference_image, dst_w, dst_h);

    let (canvas_w, canvas_h) = driving.resolution;
    let mut image = Array3::<S>::zeros((canvas_h, canvas_w, 3));
    let mut mask = Array2::<S>::ones((canvas_h, canvas_w));
    for sy in 0..dst_h {
        let cy = sy as i64 + off_y as i64;
        if cy < 0 || cy >= canvas_h as i64 {
            continue;
        }
        for sx in 0..dst_w {
            let cx = sx as i64 + off_x as i64;
            if cx < 0 || cx >= canvas_w as i64 {
                continue;
            }
            for ch in 0..3 {
                image[[cy as usize, cx as usize, ch]] = resized[[sy, sx, ch]];
            }
            mask[[cy as usize, cx as usize]] = S::zero();
        }
    }

    let mut pose = reference_pose.transformed(
        S::from_f64(ratio),
        [S::from_f64(off_x), S::from_f64(off_y)],
    );
    pose.enhanced = false;
    Ok(ReferenceTriplet::new(image, mask, pose))
}

fn rotate(p: [f64; 2], theta: f64) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [p[0] * c - p[1] * s, p[0] * s + p[1] * c]
}

/// Ear-axis angle and inter-ear distance; the head-local frame basis.
fn head_frame<S: Scalar>(f: &PoseFrame<S>) -> (f64, f64, [f64; 2]) {
    let r = f.point(kp::R_EAR);
    let l = f.point(kp::L_EAR);
    let neck = f.point(kp::NECK);
    let theta = (l[1].to_f64() - r[1].to_f64()).atan2(l[0].to_f64() - r[0].to_f64());
    let dist = f.distance(kp::R_EAR, kp::L_EAR).to_f64();
    (theta, dist, [neck[0].to_f64(), neck[1].to_f64()])
}

/// Replace the driving frame's head landmarks with the sampled frame's head
/// geometry, re-expressed through head-local frames (neck origin, inter-ear
/// scale, ear-axis rotation). Body and hand keypoints copy through
/// untouched; the output carries the enhanced flag.
pub fn face_region_enhance<S: Scalar>(
    driving_frame: &PoseFrame<S>,
    sampled_frame: &PoseFrame<S>,
    layout: &SkeletonLayout,
) -> Result<PoseFrame<S>, PoseError> {
    for (f, tag) in [(driving_frame, "driving"), (sampled_frame, "sampled")] {
        if !f.visible(kp::NECK) || !f.visible(kp::R_EAR) || !f.visible(kp::L_EAR) {
            return Err(PoseError::MissingHeadAnchors(tag));
        }
    }

    // Rescale the sampled pose to the driving pose's scale. The head-local
    // transfer below normalizes by inter-ear distance, so this step cannot
    // change the output; it is kept to mirror the stated procedure.
    let scale = match estimate_scale_ratio(sampled_frame, driving_frame) {
        Ok(r) => r.to_f64(),
        Err(_) => 1.0,
    };
    let sampled_neck = sampled_frame.point(kp::NECK);
    let sampled = sampled_frame.transformed(
        S::from_f64(scale),
        [
            sampled_neck[0] * (S::one() - S::from_f64(scale)),
            sampled_neck[1] * (S::one() - S::from_f64(scale)),
        ],
    );

    let (theta_s, dist_s, neck_s) = head_frame(&sampled);
    let (theta_d, dist_d, neck_d) = head_frame(driving_frame);
    if dist_s < 1e-9 || dist_d < 1e-9 {
        return Err(PoseError::DegenerateDistance(dist_s.min(dist_d)));
    }

    let mut out = driving_frame.clone();
    for idx in layout.head_set() {
        let p = sampled.point(idx);
        let local = rotate(
            [
                (p[0].to_f64() - neck_s[0]) / dist_s,
                (p[1].to_f64() - neck_s[1]) / dist_s,
            ],
            -theta_s,
        );
        let world = rotate(local, theta_d);
        out.set_point(
            idx,
            [
                S::from_f64(neck_d[0] + dist_d * world[0]),
                S::from_f64(neck_d[1] + dist_d * world[1]),
            ],
        );
        out.confidence[idx] = sampled.confidence[idx];
    }
    out.enhanced = true;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::test_poses::{rotated_pose, standard_pose};

    fn seq(frames: Vec<PoseFrame<f64>>) -> PoseSequence<f64> {
        PoseSequence::new(frames, 8.0, (64, 64))
    }

    #[test]
    fn anchor_self_match_scores_one() {
        let frames: Vec<_> = (0..6).map(|i| rotated_pose(i as f64 * 11.0)).collect();
        let reference = frames[3].clone();
        let driving = seq(frames);
        assert_eq!(select_anchor_frame(&reference, &driving).unwrap(), 3);
        assert!((similarity_score(&reference, &driving.frames[3]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn anchor_remaps_under_reversal() {
        let frames: Vec<_> = (0..6).map(|i| rotated_pose(i as f64 * 11.0)).collect();
        let reference = frames[3].clone();
        let n = frames.len();
        let mut reversed = frames;
        reversed.reverse();
        let driving = seq(reversed);
        assert_eq!(select_anchor_frame(&reference, &driving).unwrap(), n - 1 - 3);
    }

    #[test]
    fn anchor_matches_brute_force_on_rotations() {
        // Independent re-implementation of the similarity formula.
        fn oracle(reference: &PoseFrame<f64>, frames: &[PoseFrame<f64>]) -> usize {
            let axis = |f: &PoseFrame<f64>| {
                let r = f.point(kp::R_SHOULDER);
                let l = f.point(kp::L_SHOULDER);
                (l[1] - r[1]).atan2(l[0] - r[0])
            };
            let mut best = (0usize, f64::NEG_INFINITY);
            for (i, f) in frames.iter().enumerate() {
                let cos = (axis(reference) - axis(f)).cos();
                let va: Vec<bool> = (0..reference.keypoint_count())
                    .map(|j| reference.confidence[j] >= 0.5)
                    .collect();
                let vb: Vec<bool> = (0..f.keypoint_count())
                    .map(|j| f.confidence[j] >= 0.5)
                    .collect();
                let inter = va.iter().zip(&vb).filter(|(a, b)| **a && **b).count() as f64;
                let union = va.iter().zip(&vb).filter(|(a, b)| **a || **b).count() as f64;
                let s = 0.5 * cos + 0.5 * inter / union;
                if s > best.1 {
                    best = (i, s);
                }
            }
            best.0
        }

        let reference = rotated_pose(37.0);
        let frames: Vec<_> = (0..10).map(|i| rotated_pose(i as f64 * 13.0)).collect();
        let expected = oracle(&reference, &frames);
        let driving = seq(frames);
        assert_eq!(select_anchor_frame(&reference, &driving).unwrap(), expected);
    }

    #[test]
    fn anchor_errors() {
        let mut blind = standard_pose();
        blind.confidence.fill(0.0);
        let driving = seq(vec![standard_pose()]);
        assert!(matches!(
            select_anchor_frame(&blind, &driving),
            Err(PoseError::NoVisibleScalePair)
        ));
        let empty = seq(vec![]);
        assert!(matches!(
            select_anchor_frame(&standard_pose(), &empty),
            Err(PoseError::EmptySequence)
        ));
    }

    #[test]
    fn scale_ratio_direct_and_identity() {
        let reference = standard_pose();
        let anchor = reference.transformed(2.0, [0.0, 0.0]);
        let r = estimate_scale_ratio(&reference, &anchor).unwrap();
        assert!((r - 2.0).abs() < 1e-12);
        let same = estimate_scale_ratio(&reference, &reference).unwrap();
        assert!((same - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scale_ratio_falls_through_to_ears() {
        // Shoulders invisible in the reference; ears 20 px vs anchor ears 10 px.
        let mut reference = standard_pose();
        reference.confidence[kp::R_SHOULDER] = 0.0;
        reference.confidence[kp::L_SHOULDER] = 0.0;
        let ear_r = reference.point(kp::R_EAR);
        reference.set_point(kp::L_EAR, [ear_r[0] + 20.0, ear_r[1]]);
        let mut anchor = standard_pose();
        let a_ear_r = anchor.point(kp::R_EAR);
        anchor.set_point(kp::L_EAR, [a_ear_r[0] + 10.0, a_ear_r[1]]);

        // Independent distance computation.
        let dr = ((reference.point(kp::L_EAR)[0] - ear_r[0]) as f64).abs();
        let da = ((anchor.point(kp::L_EAR)[0] - a_ear_r[0]) as f64).abs();
        let expected = da / dr;
        let r = estimate_scale_ratio(&reference, &anchor).unwrap();
        assert!((r - expected).abs() < 1e-12);
        assert!((r - 0.5).abs() < 1e-12);
    }

    #[test]
    fn scale_ratio_errors() {
        let mut blind = standard_pose();
        blind.confidence.fill(0.0);
        assert!(matches!(
            estimate_scale_ratio(&blind, &standard_pose()),
            Err(PoseError::NoCommonScalePair)
        ));
        let mut tiny = standard_pose();
        let p = tiny.point(kp::R_SHOULDER);
        tiny.set_point(kp::L_SHOULDER, [p[0] + 0.1, p[1]]);
        assert!(matches!(
            estimate_scale_ratio(&tiny, &standard_pose()),
            Err(PoseError::DegenerateDistance(_))
        ));
    }

    #[test]
    fn reciprocity_of_scale_ratio() {
        let a = standard_pose();
        let b = a.transformed(1.7, [3.0, -2.0]);
        let ab = estimate_scale_ratio(&a, &b).unwrap();
        let ba = estimate_scale_ratio(&b, &a).unwrap();
        assert!((ab * ba - 1.0).abs() < 1e-9);
    }

    #[test]
    fn translate_identity_leaves_image_untouched() {
        let pose = standard_pose();
        let mut image = Array3::<f64>::zeros((64, 64, 3));
        for (i, v) in image.iter_mut().enumerate() {
            *v = (i % 17) as f64 / 17.0;
        }
        let driving = seq(vec![pose.clone()]);
        let trip = pose_guided_translate(&image, &pose, &driving).unwrap();
        assert_eq!(trip.image, image);
        assert_eq!(trip.mask.sum(), 0.0);
    }

    #[test]
    fn translate_padding_pixel_count_oracle() {
        // Half-scale reference: driving is the standard pose, reference is the
        // same pose shrunk 2x on a 32x32 canvas, so the ratio back is 2.0.
        let driving_pose = standard_pose();
        let reference_pose = driving_pose.transformed(0.5, [0.0, 0.0]);
        let mut image = Array3::<f64>::zeros((32, 32, 3));
        image.fill(0.75);
        let driving = seq(vec![driving_pose.clone()]);
        let trip = pose_guided_translate(&image, &reference_pose, &driving).unwrap();

        // Independent rasterization of the transform: count canvas pixels
        // covered by the scaled source rectangle.
        let ratio = 2.0_f64;
        let off_x = (driving_pose.point(kp::NECK)[0]
            - ratio * reference_pose.point(kp::NECK)[0])
            .round() as i64;
        let off_y = (driving_pose.point(kp::NECK)[1]
            - ratio * reference_pose.point(kp::NECK)[1])
            .round() as i64;
        let mut visible = 0i64;
        for sy in 0..64i64 {
            for sx in 0..64i64 {
                let cx = sx + off_x;
                let cy = sy + off_y;
                if (0..64).contains(&cx) && (0..64).contains(&cy) {
                    visible += 1;
                }
            }
        }
        let padded = 64 * 64 - visible;
        assert_eq!(trip.mask.sum() as i64, padded);
        // Mask is binary.
        assert!(trip.mask.iter().all(|&m| m == 0.0 || m == 1.0));
    }

    #[test]
    fn translate_matches_anchor_shoulder_distance() {
        let driving_pose = standard_pose();
        let reference_pose = driving_pose.transformed(0.37, [5.0, 9.0]);
        let image = Array3::<f64>::zeros((64, 64, 3));
        let driving = seq(vec![driving_pose.clone()]);
        let trip = pose_guided_translate(&image, &reference_pose, &driving).unwrap();
        let got = trip.pose.distance(kp::R_SHOULDER, kp::L_SHOULDER);
        let want = driving_pose.distance(kp::R_SHOULDER, kp::L_SHOULDER);
        assert!((got - want).abs() < 0.5, "{got} vs {want}");
        // Neck lands within rounding of the anchor neck.
        let n = trip.pose.point(kp::NECK);
        let a = driving_pose.point(kp::NECK);
        assert!((n[0] - a[0]).abs() <= 0.5 + 1e-9 && (n[1] - a[1]).abs() <= 0.5 + 1e-9);
    }

    #[test]
    fn enhance_self_transfer_is_identity() {
        let layout = SkeletonLayout::stick34();
        let f = standard_pose();
        let out = face_region_enhance(&f, &f, &layout).unwrap();
        assert!(out.enhanced);
        for i in 0..f.keypoint_count() {
            let a = f.point(i);
            let b = out.point(i);
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn enhance_copies_body_bit_exact() {
        let layout = SkeletonLayout::stick34();
        let driving = standard_pose();
        let sampled = rotated_pose(25.0).transformed(1.3, [2.0, -1.0]);
        let out = face_region_enhance(&driving, &sampled, &layout).unwrap();
        let head = layout.head_set();
        for &i in layout
            .body_indices
            .iter()
            .chain(layout.hand_indices[0].iter())
            .chain(layout.hand_indices[1].iter())
        {
            if head.contains(&i) {
                continue;
            }
            assert_eq!(driving.point(i), out.point(i), "keypoint {i}");
        }
    }

    #[test]
    fn enhance_preserves_head_ratios() {
        let layout = SkeletonLayout::stick34();
        let driving = standard_pose();
        let sampled = {
            // Distort the sampled head so ratios differ from the driving one.
            let mut s = rotated_pose(12.0);
            let e = s.point(kp::R_EYE);
            s.set_point(kp::R_EYE, [e[0] - 1.5, e[1] + 0.5]);
            s
        };
        let out = face_region_enhance(&driving, &sampled, &layout).unwrap();

        // Independent ratio oracle: eye-to-eye over ear-to-ear.
        let ratio = |f: &PoseFrame<f64>| f.distance(kp::R_EYE, kp::L_EYE) / f.distance(kp::R_EAR, kp::L_EAR);
        assert!(((ratio(&out) - ratio(&sampled)) / ratio(&sampled)).abs() < 1e-6);
    }

    #[test]
    fn enhance_is_idempotent_with_same_source() {
        let layout = SkeletonLayout::stick34();
        let driving = standard_pose();
        let sampled = rotated_pose(31.0);
        let once = face_region_enhance(&driving, &sampled, &layout).unwrap();
        let twice = face_region_enhance(&once, &sampled, &layout).unwrap();
        for i in 0..driving.keypoint_count() {
            let a = once.point(i);
            let b = twice.point(i);
            assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn enhance_requires_head_anchors() {
        let layout = SkeletonLayout::stick34();
        let mut blind = standard_pose();
        blind.confidence[kp::L_EAR] = 0.1;
        assert!(matches!(
            face_region_enhance(&blind, &standard_pose(), &layout),
            Err(PoseError::MissingHeadAnchors("driving"))
        ));
    }
}
