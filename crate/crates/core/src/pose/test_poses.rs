//! Hand-built poses for unit tests.

use super::frame::PoseFrame;
use super::layout::keypoint as kp;

/// A full, upright stick figure centered on a 64x64 canvas, all confidences 1.
pub fn standard_pose() -> PoseFrame<f64> {
    let mut coords = [[32.0, 32.0]; kp::TOTAL];
    coords[kp::NOSE] = [32.0, 14.0];
    coords[kp::NECK] = [32.0, 22.0];
    coords[kp::R_SHOULDER] = [26.0, 23.0];
    coords[kp::L_SHOULDER] = [38.0, 23.0];
    coords[kp::R_ELBOW] = [23.0, 30.0];
    coords[kp::L_ELBOW] = [41.0, 30.0];
    coords[kp::R_WRIST] = [22.0, 37.0];
    coords[kp::L_WRIST] = [42.0, 37.0];
    coords[kp::R_HIP] = [28.0, 38.0];
    coords[kp::L_HIP] = [36.0, 38.0];
    coords[kp::R_KNEE] = [27.0, 47.0];
    coords[kp::L_KNEE] = [37.0, 47.0];
    coords[kp::R_ANKLE] = [27.0, 56.0];
    coords[kp::L_ANKLE] = [37.0, 56.0];
    coords[kp::R_EYE] = [29.5, 12.5];
    coords[kp::L_EYE] = [34.5, 12.5];
    coords[kp::R_EAR] = [27.5, 14.0];
    coords[kp::L_EAR] = [36.5, 14.0];
    // Face ring around the head center.
    let (cx, cy, r) = (32.0, 13.0, 4.0);
    for i in 0..kp::FACE_COUNT {
        let a = std::f64::consts::TAU * i as f64 / kp::FACE_COUNT as f64;
        coords[kp::FACE_START + i] = [cx + r * a.cos(), cy + r * a.sin()];
    }
    // Hands: palm just past the wrist, three tips fanning out.
    for (wrist, start, dir) in [
        (kp::R_WRIST, kp::R_HAND_START, -1.0),
        (kp::L_WRIST, kp::L_HAND_START, 1.0),
    ] {
        let w = coords[wrist];
        coords[start] = [w[0] + dir * 1.5, w[1] + 2.0];
        for t in 1..kp::HAND_COUNT {
            coords[start + t] = [w[0] + dir * (1.0 + t as f64), w[1] + 3.5];
        }
    }
    PoseFrame::from_coords(&coords)
}

/// The standard pose rotated about its neck by `deg` degrees.
pub fn rotated_pose(deg: f64) -> PoseFrame<f64> {
    let base = standard_pose();
    let neck = base.point(kp::NECK);
    let theta = deg.to_radians();
    let (s, c) = theta.sin_cos();
    let mut out = base.clone();
    for i in 0..base.keypoint_count() {
        let p = base.point(i);
        let dx = p[0] - neck[0];
        let dy = p[1] - neck[1];
        out.set_point(i, [neck[0] + dx * c - dy * s, neck[1] + dx * s + dy * c]);
    }
    out
}
