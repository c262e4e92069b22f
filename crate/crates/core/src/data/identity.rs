//! Figure appearance, fully determined by a seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pose::SkeletonLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TorsoPattern {
    Solid,
    Stripes,
    Gradient,
}

/// Everything that makes one figure look like itself. Colors stay inside
/// [0.25, 0.95] per channel and key colors keep a minimum mutual distance so
/// template matching on generated frames is well conditioned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub seed: u64,
    /// Per-bone draw color, parallel to the layout's bone list.
    pub limb_colors: Vec<[f32; 3]>,
    pub head_color: [f32; 3],
    /// Head disc radius in pixels at a 64 px canvas; scales with resolution.
    pub head_radius: f64,
    pub torso_pattern: TorsoPattern,
    pub torso_colors: [[f32; 3]; 2],
    /// Vertical background gradient endpoints.
    pub background: [[f32; 3]; 2],
    /// Marker discs at right wrist, left wrist, right ankle, left ankle.
    pub extremity_colors: [[f32; 3]; 4],
}

const CHANNEL_LO: f32 = 0.25;
const CHANNEL_HI: f32 = 0.95;
/// Minimum RGB distance between the colors used by template matching.
const KEY_SEPARATION: f32 = 0.4;

fn draw_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [
        rng.gen_range(CHANNEL_LO..CHANNEL_HI),
        rng.gen_range(CHANNEL_LO..CHANNEL_HI),
        rng.gen_range(CHANNEL_LO..CHANNEL_HI),
    ]
}

fn dist(a: [f32; 3], b: [f32; 3]) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Draw a color far enough from everything in `taken`.
fn draw_separated(rng: &mut ChaCha8Rng, taken: &[[f32; 3]]) -> [f32; 3] {
    loop {
        let c = draw_color(rng);
        if taken.iter().all(|t| dist(c, *t) >= KEY_SEPARATION) {
            return c;
        }
    }
}

impl IdentitySpec {
    pub fn from_seed(seed: u64, layout: &SkeletonLayout) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15));
        // Background first, then key colors kept apart from it and each other.
        let background = [draw_color(&mut rng), draw_color(&mut rng)];
        let mut key: Vec<[f32; 3]> = background.to_vec();
        let head_color = draw_separated(&mut rng, &key);
        key.push(head_color);
        let mut extremity_colors = [[0.0f32; 3]; 4];
        for slot in &mut extremity_colors {
            let c = draw_separated(&mut rng, &key);
            key.push(c);
            *slot = c;
        }
        let limb_colors = (0..layout.bone_list.len()).map(|_| draw_color(&mut rng)).collect();
        let torso_colors = [draw_color(&mut rng), draw_color(&mut rng)];
        let torso_pattern = match rng.gen_range(0..3) {
            0 => TorsoPattern::Solid,
            1 => TorsoPattern::Stripes,
            _ => TorsoPattern::Gradient,
        };
        let head_radius = rng.gen_range(4.5..6.5);
        Self {
            seed,
            limb_colors,
            head_color,
            head_radius,
            torso_pattern,
            torso_colors,
            background,
            extremity_colors,
        }
    }

    pub fn limb_color_f64(&self, bone: usize) -> [f64; 3] {
        let c = self.limb_colors[bone];
        [c[0] as f64, c[1] as f64, c[2] as f64]
    }

    /// Mean over the per-bone limb colors, the target of the cross-identity
    /// appearance check.
    pub fn mean_limb_color(&self) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        for c in &self.limb_colors {
            for k in 0..3 {
                acc[k] += c[k] as f64;
            }
        }
        for a in &mut acc {
            *a /= self.limb_colors.len() as f64;
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn determined_by_seed() {
        let layout = SkeletonLayout::stick34();
        let a = IdentitySpec::from_seed(9, &layout);
        let b = IdentitySpec::from_seed(9, &layout);
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_seeds_distinct_palettes() {
        let layout = SkeletonLayout::stick34();
        let specs: Vec<_> = (0..100).map(|s| IdentitySpec::from_seed(s, &layout)).collect();
        for i in 0..specs.len() {
            for j in i + 1..specs.len() {
                assert_ne!(specs[i].limb_colors, specs[j].limb_colors, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn key_colors_are_separated() {
        let layout = SkeletonLayout::stick34();
        for seed in 0..20 {
            let s = IdentitySpec::from_seed(seed, &layout);
            let mut key = vec![s.background[0], s.background[1], s.head_color];
            key.extend_from_slice(&s.extremity_colors);
            for i in 0..key.len() {
                for j in i + 1..key.len() {
                    assert!(dist(key[i], key[j]) >= KEY_SEPARATION - 1e-6);
                }
            }
        }
    }

    #[test]
    fn channels_inside_bounds() {
        let layout = SkeletonLayout::stick34();
        let s = IdentitySpec::from_seed(3, &layout);
        for c in s.limb_colors.iter().chain([&s.head_color]) {
            for v in c {
                assert!(*v >= CHANNEL_LO && *v <= CHANNEL_HI);
            }
        }
    }
}
