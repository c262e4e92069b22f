//! Fixed skeleton layout: joint ordering, limb connectivity and draw colors.

use super::PoseError;

/// Indices of the named body joints inside the `stick34` layout.
///
/// The first 18 slots follow the common 2D body convention (nose, neck,
/// right arm, left arm, right leg, left leg, eyes, ears); facial landmarks
/// and the two hands follow.
pub mod keypoint {
    pub const NOSE: usize = 0;
    pub const NECK: usize = 1;
    pub const R_SHOULDER: usize = 2;
    pub const R_ELBOW: usize = 3;
    pub const R_WRIST: usize = 4;
    pub const L_SHOULDER: usize = 5;
    pub const L_ELBOW: usize = 6;
    pub const L_WRIST: usize = 7;
    pub const R_HIP: usize = 8;
    pub const R_KNEE: usize = 9;
    pub const R_ANKLE: usize = 10;
    pub const L_HIP: usize = 11;
    pub const L_KNEE: usize = 12;
    pub const L_ANKLE: usize = 13;
    pub const R_EYE: usize = 14;
    pub const L_EYE: usize = 15;
    pub const R_EAR: usize = 16;
    pub const L_EAR: usize = 17;
    pub const FACE_START: usize = 18;
    pub const FACE_COUNT: usize = 8;
    pub const R_HAND_START: usize = 26;
    pub const L_HAND_START: usize = 30;
    pub const HAND_COUNT: usize = 4;
    pub const TOTAL: usize = 34;
}

/// Skeleton description shared by every pose in a corpus: which indices are
/// body/face/hand joints, which pairs form limbs, and the 8-bit RGB colors
/// used when rasterizing.
#[derive(Debug, Clone)]
pub struct SkeletonLayout {
    pub name: String,
    pub keypoint_count: usize,
    pub body_indices: Vec<usize>,
    pub face_indices: Vec<usize>,
    /// Left and right hand joint lists.
    pub hand_indices: [Vec<usize>; 2],
    pub bone_list: Vec<(usize, usize)>,
    /// Per-bone draw color, parallel to `bone_list`.
    pub bone_colors: Vec<[u8; 3]>,
    /// Per-keypoint draw color.
    pub keypoint_colors: Vec<[u8; 3]>,
}

impl SkeletonLayout {
    /// The 34-joint stick-figure layout used throughout the crate.
    pub fn stick34() -> Self {
        use keypoint::*;
        let body_indices: Vec<usize> = (0..18).collect();
        let face_indices: Vec<usize> = (FACE_START..FACE_START + FACE_COUNT).collect();
        let hand_indices = [
            (L_HAND_START..L_HAND_START + HAND_COUNT).collect::<Vec<_>>(),
            (R_HAND_START..R_HAND_START + HAND_COUNT).collect::<Vec<_>>(),
        ];

        let mut bone_list: Vec<(usize, usize)> = vec![
            (NECK, R_SHOULDER),
            (R_SHOULDER, R_ELBOW),
            (R_ELBOW, R_WRIST),
            (NECK, L_SHOULDER),
            (L_SHOULDER, L_ELBOW),
            (L_ELBOW, L_WRIST),
            (NECK, R_HIP),
            (R_HIP, R_KNEE),
            (R_KNEE, R_ANKLE),
            (NECK, L_HIP),
            (L_HIP, L_KNEE),
            (L_KNEE, L_ANKLE),
            (NECK, NOSE),
            (NOSE, R_EYE),
            (R_EYE, R_EAR),
            (NOSE, L_EYE),
            (L_EYE, L_EAR),
        ];
        // Face ring.
        for i in 0..FACE_COUNT {
            bone_list.push((
                FACE_START + i,
                FACE_START + (i + 1) % FACE_COUNT,
            ));
        }
        // Wrist to palm, palm to three finger tips, per hand.
        for (wrist, start) in [(R_WRIST, R_HAND_START), (L_WRIST, L_HAND_START)] {
            bone_list.push((wrist, start));
            for tip in 1..HAND_COUNT {
                bone_list.push((start, start + tip));
            }
        }

        let bone_colors = (0..bone_list.len()).map(|i| palette(i)).collect::<Vec<_>>();
        let keypoint_colors = (0..TOTAL).map(|i| palette(i + 7)).collect::<Vec<_>>();

        let layout = Self {
            name: "stick34".to_string(),
            keypoint_count: TOTAL,
            body_indices,
            face_indices,
            hand_indices,
            bone_list,
            bone_colors,
            keypoint_colors,
        };
        layout.validate().expect("builtin layout is valid");
        layout
    }

    /// Look a layout up by name (pose files carry the layout name).
    pub fn by_name(name: &str) -> Result<Self, PoseError> {
        match name {
            "stick34" => Ok(Self::stick34()),
            other => Err(PoseError::Invalid(format!("unknown layout '{other}'"))),
        }
    }

    /// Head set: nose, eyes, ears plus all facial landmarks. These are the
    /// joints replaced by face region enhancement and lightened when drawing
    /// enhanced poses.
    pub fn head_set(&self) -> Vec<usize> {
        use keypoint::*;
        let mut v = vec![NOSE, R_EYE, L_EYE, R_EAR, L_EAR];
        v.extend(self.face_indices.iter().copied());
        v
    }

    pub fn is_head_index(&self, idx: usize) -> bool {
        use keypoint::*;
        matches!(idx, NOSE | R_EYE | L_EYE | R_EAR | L_EAR) || self.face_indices.contains(&idx)
    }

    /// Bones with at least one endpoint in the head set.
    pub fn head_bones(&self) -> Vec<usize> {
        self.bone_list
            .iter()
            .enumerate()
            .filter(|(_, (a, b))| self.is_head_index(*a) || self.is_head_index(*b))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self) -> Result<(), PoseError> {
        let k = self.keypoint_count;
        let mut seen = vec![false; k];
        for &i in self
            .body_indices
            .iter()
            .chain(self.face_indices.iter())
            .chain(self.hand_indices[0].iter())
            .chain(self.hand_indices[1].iter())
        {
            if i >= k {
                return Err(PoseError::Invalid(format!("index {i} out of range {k}")));
            }
            if seen[i] {
                return Err(PoseError::Invalid(format!("index {i} listed twice")));
            }
            seen[i] = true;
        }
        for &(a, b) in &self.bone_list {
            if a >= k || b >= k || a == b {
                return Err(PoseError::Invalid(format!("bad bone ({a},{b})")));
            }
        }
        for &f in &self.face_indices {
            if self.body_indices.contains(&f) {
                return Err(PoseError::Invalid(format!(
                    "face index {f} overlaps body indices"
                )));
            }
        }
        if self.bone_colors.len() != self.bone_list.len()
            || self.keypoint_colors.len() != self.keypoint_count
        {
            return Err(PoseError::Invalid("color table size mismatch".into()));
        }
        Ok(())
    }
}

/// Deterministic bright palette; spaced hues at full saturation.
fn palette(i: usize) -> [u8; 3] {
    let h = (i as f32 * 0.137_508) % 1.0; // golden-ratio hue step
    let (r, g, b) = hsv_to_rgb(h, 0.85, 0.95);
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}
