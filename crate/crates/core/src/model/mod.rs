//! The denoising model: text-free diffusion transformer backbone, parallel
//! reference extractor with zero-initialized injection, and identity-robust
//! pose control.

pub mod dit;
pub mod extractor;
pub mod pose_ctrl;
pub mod rope;

pub use dit::{Backbone, DitBlock};
pub use extractor::{Extractor, InjectionBank};
pub use pose_ctrl::{PoseControl, PoseResNet};

use std::collections::HashMap;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{self, Codec, LatentVolume};
use crate::nn::{read_checkpoint, write_checkpoint, NnError, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Graph, Var};

use rope::RopeSplit;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("block index {0} out of range {1}")]
    IndexError(usize, usize),
    #[error("codec: {0}")]
    Codec(#[from] crate::codec::CodecError),
    #[error("nn: {0}")]
    Nn(#[from] NnError),
}

/// Architectural hyperparameters. `validate` pins the arithmetic the layer
/// wiring depends on (block sharing, head splits, stride products).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    /// Per-head rotary split (temporal, height, width); sums to the head dim.
    pub rope_split: (usize, usize, usize),
    /// Denoising block count N.
    pub num_blocks: usize,
    /// Extractor block count M; each of the M+1 reference features is shared
    /// by N/(M+1) consecutive denoising blocks.
    pub extractor_blocks: usize,
    pub patch: (usize, usize, usize),
    pub spatial_factor: usize,
    pub ffn_mult: usize,
    pub rope_base: f64,
    /// Ablation flag: keep true frame coordinates on the fusion query
    /// instead of pinning them to zero.
    pub full_rope_cross: bool,
    /// Strided stages of the pose encoder; per-axis stride products must
    /// equal (4, s*p, s*p) against the token grid.
    pub pose_strides: Vec<(usize, usize, usize)>,
    pub pose_channels: usize,
    pub max_train_frames: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: trains in minutes while exercising every path.
    pub fn toy() -> Self {
        Self {
            hidden_dim: 128,
            num_heads: 4,
            rope_split: (8, 12, 12),
            num_blocks: 8,
            extractor_blocks: 3,
            patch: (1, 2, 2),
            spatial_factor: 4,
            ffn_mult: 4,
            rope_base: 10000.0,
            full_rope_cross: false,
            pose_strides: vec![(1, 2, 2), (2, 2, 2), (2, 2, 2)],
            pose_channels: 16,
            max_train_frames: 13,
        }
    }

    /// Tiny two-block config for 64-bit finite-difference checks.
    pub fn micro() -> Self {
        Self {
            hidden_dim: 16,
            num_heads: 2,
            rope_split: (2, 4, 2),
            num_blocks: 2,
            extractor_blocks: 1,
            patch: (1, 2, 2),
            spatial_factor: 2,
            ffn_mult: 2,
            rope_base: 10000.0,
            full_rope_cross: false,
            pose_strides: vec![(1, 2, 2), (2, 2, 2), (2, 1, 1)],
            pose_channels: 8,
            max_train_frames: 5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn rope(&self) -> RopeSplit {
        RopeSplit {
            t: self.rope_split.0,
            h: self.rope_split.1,
            w: self.rope_split.2,
        }
    }

    /// Consecutive blocks sharing one reference feature: n = N / (M+1).
    pub fn share_n(&self) -> usize {
        self.num_blocks / (self.extractor_blocks + 1)
    }

    pub fn codec(&self) -> Codec {
        Codec::new(self.spatial_factor)
    }

    pub fn latent_channels(&self) -> usize {
        self.codec().latent_channels()
    }

    /// Raw token width after patchify.
    pub fn token_dim(&self) -> usize {
        self.latent_channels() * self.patch.1 * self.patch.2
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.hidden_dim % self.num_heads != 0 {
            return err(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        let (t, h, w) = self.rope_split;
        if t + h + w != self.head_dim() {
            return err(format!(
                "rope split {:?} must sum to head dim {}",
                self.rope_split,
                self.head_dim()
            ));
        }
        if t % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return err("rope split entries must be even".to_string());
        }
        if self.num_blocks % (self.extractor_blocks + 1) != 0 {
            return err(format!(
                "num_blocks {} must be divisible by extractor_blocks+1 = {}",
                self.num_blocks,
                self.extractor_blocks + 1
            ));
        }
        if self.patch.0 != 1 {
            return err("temporal patch must be 1".to_string());
        }
        let (mut pt, mut ph, mut pw) = (1usize, 1usize, 1usize);
        for &(a, b, c) in &self.pose_strides {
            pt *= a;
            ph *= b;
            pw *= c;
        }
        if pt != crate::codec::TEMPORAL_GROUP {
            return err(format!("pose temporal stride product {pt} != 4"));
        }
        if ph != self.spatial_factor * self.patch.1 || pw != self.spatial_factor * self.patch.2 {
            return err(format!(
                "pose spatial stride product {ph}x{pw} != token grid stride {}x{}",
                self.spatial_factor * self.patch.1,
                self.spatial_factor * self.patch.2
            ));
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Named intermediate values captured during a forward pass; tests read
/// modulation tensors, attention rows and block outputs through this.
#[derive(Default)]
pub struct Probe {
    map: HashMap<String, Var>,
}

impl Probe {
    pub fn record(&mut self, key: String, v: Var) {
        self.map.insert(key, v);
    }
    pub fn get(&self, key: &str) -> Option<Var> {
        self.map.get(key).copied()
    }
    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }
}

/// Per-generation conditioning, cached outside the per-step graphs: the
/// reference is static so extractor features (already passed through their
/// injection maps) and pose tokens are computed once and re-leafed each step.
#[derive(Debug, Clone, Default)]
pub struct Conditioning<S: Scalar> {
    /// M+1 projected reference features, each `[R, d]`.
    pub assignment_feats: Option<Vec<Array2<S>>>,
    /// Refined pose tokens aligned with the backbone token sequence.
    pub pose_tokens: Option<Array2<S>>,
    /// Codec-encoded driving pose rasters, added to the video latents.
    pub pose_latent_add: Option<Array4<S>>,
    /// Clean reference latent occupying the leading frame slot.
    pub ref_slot: Option<Array4<S>>,
}

/// The assembled model.
pub struct OneToAllModel<S: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    pub backbone: Backbone,
    pub extractor: Extractor,
    pub bank: InjectionBank,
    pub pose: PoseControl,
}

impl<S: Scalar> OneToAllModel<S> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::<S>::new(seed);
        let backbone = Backbone::init(&mut store, &cfg);
        let mut extractor = Extractor::init(&mut store, &cfg);
        extractor.copy_from_backbone(&mut store, &backbone);
        let bank = InjectionBank::init(&mut store, &cfg);
        let pose = PoseControl::init(&mut store, &cfg);
        Ok(Self {
            cfg,
            store,
            backbone,
            extractor,
            bank,
            pose,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        write_checkpoint(path, &self.store, &self.cfg.config_hash())?;
        Ok(())
    }

    /// Load parameters from a checkpoint into a freshly wired model. Names
    /// and shapes must match the config's layout exactly.
    pub fn load(cfg: ModelConfig, path: &std::path::Path) -> Result<Self, ModelError> {
        let (loaded, manifest) = read_checkpoint::<S>(path)?;
        if manifest.config_hash != cfg.config_hash() {
            return Err(ModelError::Config(format!(
                "checkpoint config hash {} does not match requested config {}",
                manifest.config_hash,
                cfg.config_hash()
            )));
        }
        let mut model = Self::init(cfg, manifest.master_seed)?;
        for (name, value) in loaded.iter() {
            let id = model.store.by_name(name)?;
            if model.store.get(id).shape() != value.shape() {
                return Err(ModelError::Shape(format!(
                    "checkpoint tensor {name} shape {:?} vs model {:?}",
                    value.shape(),
                    model.store.get(id).shape()
                )));
            }
            *model.store.get_mut(id) = value.clone();
        }
        Ok(model)
    }

    /// Velocity prediction on plain arrays; builds a throwaway graph.
    ///
    /// `x` holds the video latents `[F', H', W', C]`, `t` one timestep per
    /// video latent frame. Conditioning pieces that are `None` are simply
    /// absent (reference-free / pose-free branches). The returned volume has
    /// the video frames only, whatever slots were concatenated internally.
    pub fn velocity(
        &self,
        x: &Array4<S>,
        t: &[S],
        cond: &Conditioning<S>,
        probe: &mut Probe,
    ) -> Result<Array4<S>, ModelError> {
        let mut g = Graph::<S>::new();
        let bound = self.store.bind(&mut g);
        let out = self.velocity_in_graph(&mut g, &bound, x, t, cond, probe)?;
        let tokens = g.value(out).clone();
        let video_frames = x.shape()[0];
        let has_slot = cond.ref_slot.is_some();
        let total_frames = video_frames + usize::from(has_slot);
        let grid = codec::TokenGrid {
            data: tokens.into_dimensionality::<ndarray::Ix2>().unwrap(),
            frames: total_frames,
            rows: x.shape()[1] / self.cfg.patch.1,
            cols: x.shape()[2] / self.cfg.patch.2,
            patch: self.cfg.patch,
        };
        let full = codec::unpatchify(&grid);
        let out = if has_slot {
            full.slice(ndarray::s![1.., .., .., ..]).to_owned()
        } else {
            full
        };
        Ok(out)
    }

    /// Graph-mode velocity used by both training and [`Self::velocity`].
    /// Returns the velocity token matrix `[T, token_dim]` over the full
    /// (possibly reference-extended) frame axis.
    pub fn velocity_in_graph(
        &self,
        g: &mut Graph<S>,
        bound: &crate::nn::Bound,
        x: &Array4<S>,
        t: &[S],
        cond: &Conditioning<S>,
        probe: &mut Probe,
    ) -> Result<Var, ModelError> {
        let (fv, hh, ww, cc) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if cc != self.cfg.latent_channels() {
            return Err(ModelError::Shape(format!(
                "latent channels {cc} != {}",
                self.cfg.latent_channels()
            )));
        }
        if t.len() != fv {
            return Err(ModelError::Shape(format!(
                "timestep vector length {} != video frames {fv}",
                t.len()
            )));
        }

        // Assemble the input volume: pose rasters add to the video latents,
        // and the clean reference latent occupies a leading frame slot.
        let mut video = x.clone();
        if let Some(add) = &cond.pose_latent_add {
            if add.shape() != video.shape() {
                return Err(ModelError::Shape(format!(
                    "pose latent add shape {:?} vs video {:?}",
                    add.shape(),
                    video.shape()
                )));
            }
            video = &video + add;
        }
        let (input, t_full): (Array4<S>, Vec<S>) = match &cond.ref_slot {
            Some(slot) => {
                if slot.shape() != [1, hh, ww, cc] {
                    return Err(ModelError::Shape(format!(
                        "reference slot shape {:?} vs [1, {hh}, {ww}, {cc}]",
                        slot.shape()
                    )));
                }
                let joined =
                    ndarray::concatenate(ndarray::Axis(0), &[slot.view(), video.view()])
                        .expect("frame concat");
                let mut tf = vec![S::zero()];
                tf.extend_from_slice(t);
                (joined, tf)
            }
            None => (video, t.to_vec()),
        };

        let grid = codec::patchify(&input, self.cfg.patch)?;
        let tokens = g.leaf(grid.data.clone().into_dyn());

        let feats: Option<Vec<Var>> = cond.assignment_feats.as_ref().map(|fs| {
            fs.iter()
                .map(|f| g.leaf(f.clone().into_dyn()))
                .collect::<Vec<_>>()
        });
        let pose_tokens = match &cond.pose_tokens {
            Some(p) => {
                if p.nrows() != grid.token_count() {
                    return Err(ModelError::Shape(format!(
                        "pose tokens {} != input tokens {}",
                        p.nrows(),
                        grid.token_count()
                    )));
                }
                Some(g.leaf(p.clone().into_dyn()))
            }
            None => None,
        };

        self.backbone.forward_tokens(
            g,
            bound,
            &self.cfg,
            tokens,
            (grid.frames, grid.rows, grid.cols),
            &t_full,
            pose_tokens,
            feats.as_deref(),
            probe,
        )
    }
}

/// Wrap a raw token matrix back into a volume (test/helper use).
pub fn tokens_to_volume<S: Scalar>(
    tokens: Array2<S>,
    frames: usize,
    rows: usize,
    cols: usize,
    patch: (usize, usize, usize),
) -> Array4<S> {
    let grid = codec::TokenGrid {
        data: tokens,
        frames,
        rows,
        cols,
        patch,
    };
    codec::unpatchify(&grid)
}

/// Convenience: encode pixel frames and wrap errors for model callers.
pub fn encode_or_shape_err<S: Scalar>(
    codec: &Codec,
    frames: &Array4<S>,
) -> Result<LatentVolume<S>, ModelError> {
    Ok(codec.encode(frames)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_latents(cfg: &ModelConfig, frames: usize, hw: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((frames, hw, hw, cfg.latent_channels()), |_| {
            rng.gen::<f64>() - 0.5
        })
    }

    /// Projected reference features for a random reference, via the real
    /// extractor path.
    fn projected_feats(
        model: &OneToAllModel<f64>,
        rows: usize,
        cols: usize,
        seed: u64,
    ) -> Vec<Array2<f64>> {
        let cfg = &model.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens =
            Array2::<f64>::from_shape_fn((rows * cols, 2 * cfg.token_dim()), |_| rng.gen());
        let mut g = Graph::<f64>::new();
        let bound = model.store.bind(&mut g);
        let tv = g.leaf(tokens.into_dyn());
        let mut probe = Probe::default();
        let feats = model
            .extractor
            .extract_in_graph(&mut g, &bound, cfg, tv, rows, cols, &mut probe)
            .unwrap();
        let projected = model.bank.project_in_graph(&mut g, &bound, &feats);
        projected
            .into_iter()
            .map(|v| {
                g.value(v)
                    .clone()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn velocity_shape_contract_across_frame_counts() {
        let cfg = ModelConfig::micro();
        let model = OneToAllModel::<f64>::init(cfg.clone(), 1).unwrap();
        for frames in [1usize, 2, 8] {
            let x = rand_latents(&cfg, frames, 4, frames as u64);
            let t = vec![0.5; frames];
            let mut probe = Probe::default();
            let v = model
                .velocity(&x, &t, &Conditioning::default(), &mut probe)
                .unwrap();
            assert_eq!(v.shape(), x.shape(), "frames {frames}");
        }
    }

    #[test]
    fn velocity_shape_with_reference_slot() {
        let cfg = ModelConfig::micro();
        let model = OneToAllModel::<f64>::init(cfg.clone(), 2).unwrap();
        let x = rand_latents(&cfg, 2, 4, 9);
        let slot = rand_latents(&cfg, 1, 4, 10);
        let cond = Conditioning {
            ref_slot: Some(slot),
            ..Default::default()
        };
        let mut probe = Probe::default();
        let v = model.velocity(&x, &[0.5, 0.5], &cond, &mut probe).unwrap();
        assert_eq!(v.shape(), x.shape());
    }

    #[test]
    fn zero_init_reference_neutrality_is_bit_exact() {
        // A fresh model's output with full reference conditioning equals the
        // reference-free output bit for bit (zero-initialized injections).
        let cfg = ModelConfig::micro();
        let mut model = OneToAllModel::<f64>::init(cfg.clone(), 3).unwrap();
        // Randomize everything except the tensors that are zero at init by
        // design and carry the neutrality: the injection maps (so features
        // project to zero) and the fusion value bias (so V' stays zero).
        // This makes the equality non-trivial: gates, head and the fusion
        // key/value weights are all active.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            if name.starts_with("inject.") || name.ends_with("cross_v.b") {
                continue;
            }
            let id = model.store.by_name(&name).unwrap();
            model
                .store
                .get_mut(id)
                .mapv_inplace(|_| rng.gen::<f64>() * 0.1 - 0.05);
        }

        let x = rand_latents(&cfg, 2, 4, 5);
        let t = vec![0.7, 0.7];
        let feats = projected_feats(&model, 2, 2, 6);
        assert!(
            feats.iter().all(|f| f.iter().all(|&v| v == 0.0)),
            "projection maps stay zero"
        );
        let with = model
            .velocity(
                &x,
                &t,
                &Conditioning {
                    assignment_feats: Some(feats),
                    ..Default::default()
                },
                &mut Probe::default(),
            )
            .unwrap();
        let without = model
            .velocity(&x, &t, &Conditioning::default(), &mut Probe::default())
            .unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn pose_latents_and_tokens_shift_output() {
        // Sanity: nonzero conditioning must change a randomized model's
        // output (the neutrality above is specific to zero injections).
        let cfg = ModelConfig::micro();
        let mut model = OneToAllModel::<f64>::init(cfg.clone(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let id = model.store.by_name(&name).unwrap();
            model
                .store
                .get_mut(id)
                .mapv_inplace(|_| rng.gen::<f64>() * 0.1 - 0.05);
        }
        let x = rand_latents(&cfg, 2, 4, 9);
        let t = vec![0.4, 0.4];
        let base = model
            .velocity(&x, &t, &Conditioning::default(), &mut Probe::default())
            .unwrap();
        let tokens = 2 * 2 * 2;
        let pose_tokens =
            Array2::<f64>::from_shape_fn((tokens, cfg.hidden_dim), |_| rng.gen::<f64>() * 0.1);
        let with = model
            .velocity(
                &x,
                &t,
                &Conditioning {
                    pose_tokens: Some(pose_tokens),
                    ..Default::default()
                },
                &mut Probe::default(),
            )
            .unwrap();
        let diff: f64 = (&with - &base).iter().map(|v| v.abs()).sum();
        assert!(diff > 1e-9);
    }

    #[test]
    fn checkpoint_round_trip_restores_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig::micro();
        let model = OneToAllModel::<f32>::init(cfg.clone(), 11).unwrap();
        let h = model.store.hash_params(|_| true);
        model.save(&path).unwrap();
        let back = OneToAllModel::<f32>::load(cfg.clone(), &path).unwrap();
        assert_eq!(back.store.hash_params(|_| true), h);

        // A different config is rejected.
        let mut other = cfg.clone();
        other.num_blocks = 4;
        other.extractor_blocks = 0;
        assert!(OneToAllModel::<f32>::load(other, &path).is_err());
    }

    #[test]
    fn determinism_same_seed_same_forward() {
        let cfg = ModelConfig::micro();
        let m1 = OneToAllModel::<f64>::init(cfg.clone(), 21).unwrap();
        let m2 = OneToAllModel::<f64>::init(cfg.clone(), 21).unwrap();
        let x = rand_latents(&cfg, 2, 4, 22);
        let t = vec![0.3, 0.3];
        let a = m1
            .velocity(&x, &t, &Conditioning::default(), &mut Probe::default())
            .unwrap();
        let b = m2
            .velocity(&x, &t, &Conditioning::default(), &mut Probe::default())
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation_rejects_bad_arithmetic() {
        let mut cfg = ModelConfig::toy();
        cfg.num_blocks = 9; // not divisible by M+1 = 4
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.rope_split = (8, 12, 11);
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.pose_strides = vec![(1, 2, 2)];
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::toy().validate().is_ok());
        assert!(ModelConfig::micro().validate().is_ok());
    }
}
