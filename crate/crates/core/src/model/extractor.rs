//! Parallel reference extractor and the zero-initialized injection bank.
//!
//! The extractor patch-embeds the channel-concatenated reference/mask latents
//! into the backbone's token space and refines them through M text-free
//! blocks initialized from the backbone. The M block outputs plus the
//! embedded input form M+1 features; feature a = floor(i / n) feeds backbone
//! block i through a zero-initialized linear map, n = N / (M+1). Because the
//! maps start at zero, a fresh model's output is bit-identical with and
//! without reference conditioning.

use crate::nn::{Bound, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Graph, Var};

use super::dit::{BlockRopes, DitBlock};
use super::rope::{build_table, grid_coords};
use super::{ModelConfig, ModelError, Probe};

/// Parameter suffixes one extractor block shares with its backbone source.
const BLOCK_SUFFIXES: [&str; 14] = [
    "adaln.w",
    "adaln.b",
    "attn.wq.w",
    "attn.wq.b",
    "attn.wk.w",
    "attn.wk.b",
    "attn.wv.w",
    "attn.wv.b",
    "attn.wo.w",
    "attn.wo.b",
    "ffn.fc1.w",
    "ffn.fc1.b",
    "ffn.fc2.w",
    "ffn.fc2.b",
];

pub struct Extractor {
    pub patch_embed: Linear,
    pub t_fc1: Linear,
    pub t_fc2: Linear,
    pub blocks: Vec<DitBlock>,
}

impl Extractor {
    pub fn init<S: Scalar>(store: &mut ParamStore<S>, cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        // The reference input concatenates image and mask latents along the
        // channel axis, doubling the raw token width.
        let patch_embed = Linear::init(store, "extractor.patch_embed", 2 * cfg.token_dim(), d);
        let t_fc1 = Linear::init(store, "extractor.time.fc1", d, d);
        let t_fc2 = Linear::init(store, "extractor.time.fc2", d, d);
        let blocks = (0..cfg.extractor_blocks)
            .map(|i| DitBlock::init(store, &format!("extractor.block{i}"), cfg, false))
            .collect();
        Self {
            patch_embed,
            t_fc1,
            t_fc2,
            blocks,
        }
    }

    /// Copy block and timestep-MLP weights from the backbone (block i from
    /// backbone block i); the patch embedding keeps its own init since its
    /// input width differs.
    pub fn copy_from_backbone<S: Scalar>(
        &mut self,
        store: &mut ParamStore<S>,
        _backbone: &super::dit::Backbone,
    ) {
        let m = self.blocks.len();
        for i in 0..m {
            for suffix in BLOCK_SUFFIXES {
                let src = store
                    .by_name(&format!("backbone.block{i}.{suffix}"))
                    .expect("backbone block param");
                let dst = store
                    .by_name(&format!("extractor.block{i}.{suffix}"))
                    .expect("extractor block param");
                store.copy_value(src, dst);
            }
        }
        for suffix in ["time.fc1.w", "time.fc1.b", "time.fc2.w", "time.fc2.b"] {
            let src = store.by_name(&format!("backbone.{suffix}")).unwrap();
            let dst = store.by_name(&format!("extractor.{suffix}")).unwrap();
            store.copy_value(src, dst);
        }
    }

    /// Run the extractor inside an existing graph. `ref_tokens` holds the raw
    /// patch tokens of the concatenated image/mask latents (single frame).
    /// Returns the M+1 features, embedded input first.
    pub fn extract_in_graph<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        cfg: &ModelConfig,
        ref_tokens: Var,
        rows: usize,
        cols: usize,
        probe: &mut Probe,
    ) -> Result<Vec<Var>, ModelError> {
        if g.shape(ref_tokens) != [rows * cols, 2 * cfg.token_dim()] {
            return Err(ModelError::Shape(format!(
                "reference tokens shape {:?}, expected [{}, {}]",
                g.shape(ref_tokens),
                rows * cols,
                2 * cfg.token_dim()
            )));
        }
        let coords = grid_coords(1, rows, cols, 0);
        let table = build_table(&coords, cfg.rope(), cfg.rope_base, false);
        let ropes = BlockRopes {
            self_table: table.clone(),
            fusion_q: table.clone(),
            fusion_k: table,
        };

        // The reference is clean: a constant t = 0 modulation signal.
        let sin = super::dit::sinusoidal_embedding(&[S::zero()], cfg.hidden_dim);
        let sin_leaf = g.leaf(sin.into_dyn());
        let a = self.t_fc1.forward(g, bound, sin_leaf);
        let act = g.silu(a);
        let b = self.t_fc2.forward(g, bound, act);
        let temb = g.silu(b);

        let mut feats = Vec::with_capacity(cfg.extractor_blocks + 1);
        let mut h = self.patch_embed.forward(g, bound, ref_tokens);
        feats.push(h);
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(
                g,
                bound,
                h,
                temb,
                rows * cols,
                cfg.num_heads,
                &ropes,
                None,
                probe,
                &format!("extractor.block{i}"),
            );
            feats.push(h);
        }
        Ok(feats)
    }
}

/// Zero-initialized linear maps, one per feature assignment.
pub struct InjectionBank {
    pub maps: Vec<Linear>,
}

impl InjectionBank {
    pub fn init<S: Scalar>(store: &mut ParamStore<S>, cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        let maps = (0..cfg.extractor_blocks + 1)
            .map(|a| Linear::init_zero(store, &format!("inject.map{a}"), d, d))
            .collect();
        Self { maps }
    }

    /// Feature index consumed by a denoising block: floor(i / n).
    pub fn assignment(cfg: &ModelConfig, block_index: usize) -> Result<usize, ModelError> {
        if block_index >= cfg.num_blocks {
            return Err(ModelError::IndexError(block_index, cfg.num_blocks));
        }
        Ok(block_index / cfg.share_n())
    }

    /// Apply each assignment's map to its feature.
    pub fn project_in_graph<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        feats: &[Var],
    ) -> Vec<Var> {
        assert_eq!(feats.len(), self.maps.len());
        feats
            .iter()
            .zip(&self.maps)
            .map(|(f, m)| m.forward(g, bound, *f))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::OneToAllModel;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn assignment_arithmetic_toy_and_paper_scale() {
        let toy = ModelConfig::toy(); // N=8, M=3 -> n=2
        assert_eq!(toy.share_n(), 2);
        let expect = [0, 0, 1, 1, 2, 2, 3, 3];
        for (i, &a) in expect.iter().enumerate() {
            assert_eq!(InjectionBank::assignment(&toy, i).unwrap(), a);
        }
        assert!(InjectionBank::assignment(&toy, 8).is_err());

        // Reported large-scale configuration: 40 blocks, 7 extractor blocks,
        // so n = 5. Config arithmetic only.
        let mut paper = ModelConfig::toy();
        paper.num_blocks = 40;
        paper.extractor_blocks = 7;
        assert!(paper.validate().is_ok());
        assert_eq!(paper.share_n(), 5);
        assert_eq!(InjectionBank::assignment(&paper, 39).unwrap(), 7);
    }

    #[test]
    fn feature_count_and_zero_projection_at_init() {
        let cfg = ModelConfig::micro();
        let model = OneToAllModel::<f64>::init(cfg.clone(), 3).unwrap();
        let rows = 2;
        let cols = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tokens =
            Array2::<f64>::from_shape_fn((rows * cols, 2 * cfg.token_dim()), |_| rng.gen());

        let mut g = crate::tape::Graph::<f64>::new();
        let bound = model.store.bind(&mut g);
        let tvar = g.leaf(tokens.into_dyn());
        let mut probe = Probe::default();
        let feats = model
            .extractor
            .extract_in_graph(&mut g, &bound, &cfg, tvar, rows, cols, &mut probe)
            .unwrap();
        assert_eq!(feats.len(), cfg.extractor_blocks + 1);

        let projected = model.bank.project_in_graph(&mut g, &bound, &feats);
        for p in projected {
            assert!(g.value(p).iter().all(|&v| v == 0.0), "zero at init");
        }
    }

    #[test]
    fn extractor_block_matches_backbone_block_on_same_input() {
        // Weight copy: before training, feature 1 equals backbone block 0
        // applied to feature 0 under t = 0 modulation.
        let cfg = ModelConfig::micro();
        let model = OneToAllModel::<f64>::init(cfg.clone(), 5).unwrap();
        let rows = 2;
        let cols = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let tokens =
            Array2::<f64>::from_shape_fn((rows * cols, 2 * cfg.token_dim()), |_| rng.gen());

        let mut g = crate::tape::Graph::<f64>::new();
        let bound = model.store.bind(&mut g);
        let tvar = g.leaf(tokens.into_dyn());
        let mut probe = Probe::default();
        let feats = model
            .extractor
            .extract_in_graph(&mut g, &bound, &cfg, tvar, rows, cols, &mut probe)
            .unwrap();

        // Backbone block 0 on the embedded feature with t = 0, no fusion.
        let coords = grid_coords(1, rows, cols, 0);
        let table = build_table(&coords, cfg.rope(), cfg.rope_base, false);
        let ropes = BlockRopes {
            self_table: table.clone(),
            fusion_q: table.clone(),
            fusion_k: table,
        };
        let temb = model
            .backbone
            .time_embed(&mut g, &bound, &cfg, &[0.0]);
        let out = model.backbone.blocks[0].forward(
            &mut g,
            &bound,
            feats[0],
            temb,
            rows * cols,
            cfg.num_heads,
            &ropes,
            None,
            &mut probe,
            "bb0",
        );
        let a = g.value(feats[1]).clone();
        let b = g.value(out).clone();
        let max_diff = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-12, "max diff {max_diff}");
    }

    #[test]
    fn fully_masked_reference_stays_finite() {
        let cfg = ModelConfig::micro();
        let model = OneToAllModel::<f64>::init(cfg.clone(), 6).unwrap();
        let rows = 2;
        let cols = 2;
        // All-zero image latents, all-one mask latents after concat: emulate
        // by zero image half and one mask half of the token width.
        let mut tokens = Array2::<f64>::zeros((rows * cols, 2 * cfg.token_dim()));
        for r in 0..rows * cols {
            for c in cfg.token_dim()..2 * cfg.token_dim() {
                tokens[[r, c]] = 1.0;
            }
        }
        let mut g = crate::tape::Graph::<f64>::new();
        let bound = model.store.bind(&mut g);
        let tvar = g.leaf(tokens.into_dyn());
        let mut probe = Probe::default();
        let feats = model
            .extractor
            .extract_in_graph(&mut g, &bound, &cfg, tvar, rows, cols, &mut probe)
            .unwrap();
        for f in feats {
            assert!(g.value(f).iter().all(|v| v.is_finite()));
        }
    }
}
