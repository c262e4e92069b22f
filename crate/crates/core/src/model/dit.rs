//! Timestep-modulated transformer blocks and the denoising backbone.
//!
//! Each block is pre-norm with per-frame shift/scale/gate modulation derived
//! from the frame's timestep embedding (clean context frames carry t = 0 and
//! modulate differently from noisy frames in the same sequence). The fusion
//! path adds a second attention readout over reference tokens whose query and
//! key rotations pin the temporal angle to zero, then both readouts share one
//! output projection.

use std::rc::Rc;

use ndarray::Array2;

use crate::nn::{Bound, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Graph, RotationTable, Var};

use super::rope::{build_table, grid_coords};
use super::{ModelConfig, ModelError, Probe};

const NORM_EPS: f64 = 1e-6;

/// Rotation tables used by one forward pass.
pub struct BlockRopes<S: Scalar> {
    /// True (f, h, w) coordinates for self-attention.
    pub self_table: Rc<RotationTable<S>>,
    /// Fusion-query table mapped over the same tokens; temporal angle pinned
    /// to zero unless the ablation flag keeps full coordinates.
    pub fusion_q: Rc<RotationTable<S>>,
    /// Reference-token table (single frame at coordinate zero).
    pub fusion_k: Rc<RotationTable<S>>,
}

/// One transformer block; `cross` is present on backbone blocks only.
pub struct DitBlock {
    pub adaln: Linear,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub cross_k: Option<Linear>,
    pub cross_v: Option<Linear>,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl DitBlock {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: &ModelConfig,
        with_cross: bool,
    ) -> Self {
        let d = cfg.hidden_dim;
        let adaln = Linear::init_zero(store, &format!("{name}.adaln"), d, 6 * d);
        let wq = Linear::init(store, &format!("{name}.attn.wq"), d, d);
        let wk = Linear::init(store, &format!("{name}.attn.wk"), d, d);
        let wv = Linear::init(store, &format!("{name}.attn.wv"), d, d);
        let wo = Linear::init(store, &format!("{name}.attn.wo"), d, d);
        let (cross_k, cross_v) = if with_cross {
            (
                Some(Linear::init(store, &format!("{name}.cross_k"), d, d)),
                Some(Linear::init(store, &format!("{name}.cross_v"), d, d)),
            )
        } else {
            (None, None)
        };
        let fc1 = Linear::init(store, &format!("{name}.ffn.fc1"), d, cfg.ffn_mult * d);
        let fc2 = Linear::init(store, &format!("{name}.ffn.fc2"), cfg.ffn_mult * d, d);
        Self {
            adaln,
            wq,
            wk,
            wv,
            wo,
            cross_k,
            cross_v,
            fc1,
            fc2,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        x: Var,
        temb_act: Var,
        tpf: usize,
        heads: usize,
        ropes: &BlockRopes<S>,
        cross_feat: Option<Var>,
        probe: &mut Probe,
        key: &str,
    ) -> Var {
        let mods = self.adaln.forward(g, bound, temb_act); // [F, 6d]
        let d = g.shape(mods)[1] / 6;
        let shift1 = g.slice_cols(mods, 0, d);
        let scale1 = g.slice_cols(mods, d, d);
        let gate1 = g.slice_cols(mods, 2 * d, d);
        let shift2 = g.slice_cols(mods, 3 * d, d);
        let scale2 = g.slice_cols(mods, 4 * d, d);
        let gate2 = g.slice_cols(mods, 5 * d, d);
        probe.record(format!("{key}.shift1"), shift1);
        probe.record(format!("{key}.scale1"), scale1);
        probe.record(format!("{key}.gate1"), gate1);

        let n1 = g.layer_norm(x, S::from_f64(NORM_EPS));
        let h1 = g.per_frame_affine(n1, scale1, shift1, tpf);

        let head_dim = d / heads;
        let inv_sqrt = S::from_f64(1.0 / (head_dim as f64).sqrt());
        let q_raw = self.wq.forward(g, bound, h1);
        let q_scaled = g.scale(q_raw, inv_sqrt);
        let k_raw = self.wk.forward(g, bound, h1);
        let v_raw = self.wv.forward(g, bound, h1);
        let q_rot = g.rope(q_scaled, ropes.self_table.clone(), heads);
        let k_rot = g.rope(k_raw, ropes.self_table.clone(), heads);

        let mut self_heads = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q_rot, h * head_dim, head_dim);
            let kh = g.slice_cols(k_rot, h * head_dim, head_dim);
            let vh = g.slice_cols(v_raw, h * head_dim, head_dim);
            let logits = g.matmul_nt(qh, kh);
            let attn = g.softmax(logits);
            if h == 0 {
                probe.record(format!("{key}.attn0"), attn);
            }
            self_heads.push(g.matmul(attn, vh));
        }
        let self_cat = g.concat_cols(&self_heads);

        let fused = match (cross_feat, &self.cross_k, &self.cross_v) {
            (Some(feat), Some(ck), Some(cv)) => {
                let q2 = g.rope(q_scaled, ropes.fusion_q.clone(), heads);
                let k2_raw = ck.forward(g, bound, feat);
                let k2 = g.rope(k2_raw, ropes.fusion_k.clone(), heads);
                let v2 = cv.forward(g, bound, feat);
                let mut cross_heads = Vec::with_capacity(heads);
                for h in 0..heads {
                    let qh = g.slice_cols(q2, h * head_dim, head_dim);
                    let kh = g.slice_cols(k2, h * head_dim, head_dim);
                    let vh = g.slice_cols(v2, h * head_dim, head_dim);
                    let logits = g.matmul_nt(qh, kh);
                    let attn = g.softmax(logits);
                    cross_heads.push(g.matmul(attn, vh));
                }
                let cross_cat = g.concat_cols(&cross_heads);
                probe.record(format!("{key}.cross_out"), cross_cat);
                g.add(self_cat, cross_cat)
            }
            _ => self_cat,
        };

        probe.record(format!("{key}.attn_out"), fused);
        let o = self.wo.forward(g, bound, fused);
        let gated = g.per_frame_gate(o, gate1, tpf);
        let x = g.add(x, gated);

        let n2 = g.layer_norm(x, S::from_f64(NORM_EPS));
        let h2 = g.per_frame_affine(n2, scale2, shift2, tpf);
        let f1 = self.fc1.forward(g, bound, h2);
        let act = g.silu(f1);
        let f2 = self.fc2.forward(g, bound, act);
        let gated2 = g.per_frame_gate(f2, gate2, tpf);
        let out = g.add(x, gated2);
        probe.record(format!("{key}.out"), out);
        out
    }
}

/// Sinusoidal embedding of per-frame timesteps, `[F, dim]`.
pub fn sinusoidal_embedding<S: Scalar>(t: &[S], dim: usize) -> Array2<S> {
    let half = dim / 2;
    let mut out = Array2::<S>::zeros((t.len(), dim));
    for (f, &tv) in t.iter().enumerate() {
        let pos = tv.to_f64() * 1000.0;
        for i in 0..half {
            let freq = (-(i as f64) * (10000.0f64).ln() / half as f64).exp();
            let angle = pos * freq;
            out[[f, i]] = S::from_f64(angle.sin());
            out[[f, half + i]] = S::from_f64(angle.cos());
        }
    }
    out
}

/// The denoising backbone: patch embedding, N modulated blocks with fusion
/// attention, and the modulated output head.
pub struct Backbone {
    pub patch_embed: Linear,
    pub t_fc1: Linear,
    pub t_fc2: Linear,
    pub blocks: Vec<DitBlock>,
    pub final_adaln: Linear,
    pub head: Linear,
}

impl Backbone {
    pub fn init<S: Scalar>(store: &mut ParamStore<S>, cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        let patch_embed = Linear::init(store, "backbone.patch_embed", cfg.token_dim(), d);
        let t_fc1 = Linear::init(store, "backbone.time.fc1", d, d);
        let t_fc2 = Linear::init(store, "backbone.time.fc2", d, d);
        let blocks = (0..cfg.num_blocks)
            .map(|i| DitBlock::init(store, &format!("backbone.block{i}"), cfg, true))
            .collect();
        let final_adaln = Linear::init_zero(store, "backbone.final.adaln", d, 2 * d);
        let head = Linear::init_zero(store, "backbone.final.head", d, cfg.token_dim());
        Self {
            patch_embed,
            t_fc1,
            t_fc2,
            blocks,
            final_adaln,
            head,
        }
    }

    /// Embed per-frame timesteps and apply the shared MLP; returns the
    /// activated `[F, d]` signal every block's modulation reads.
    pub fn time_embed<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        cfg: &ModelConfig,
        t: &[S],
    ) -> Var {
        let sin = sinusoidal_embedding(t, cfg.hidden_dim);
        let sin_leaf = g.leaf(sin.into_dyn());
        let a = self.t_fc1.forward(g, bound, sin_leaf);
        let act = g.silu(a);
        let b = self.t_fc2.forward(g, bound, act);
        g.silu(b)
    }

    /// Run the backbone over raw patch tokens. `frame_offset` shifts the
    /// temporal coordinates seen by self-attention (extrapolation probes).
    #[allow(clippy::too_many_arguments)]
    pub fn forward_tokens<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        cfg: &ModelConfig,
        tokens_raw: Var,
        grid: (usize, usize, usize),
        t: &[S],
        pose_tokens: Option<Var>,
        assignment_feats: Option<&[Var]>,
        probe: &mut Probe,
    ) -> Result<Var, ModelError> {
        self.forward_tokens_at_offset(
            g,
            bound,
            cfg,
            tokens_raw,
            grid,
            0,
            t,
            pose_tokens,
            assignment_feats,
            probe,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward_tokens_at_offset<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        cfg: &ModelConfig,
        tokens_raw: Var,
        grid: (usize, usize, usize),
        frame_offset: usize,
        t: &[S],
        pose_tokens: Option<Var>,
        assignment_feats: Option<&[Var]>,
        probe: &mut Probe,
    ) -> Result<Var, ModelError> {
        let (frames, rows, cols) = grid;
        let tpf = rows * cols;
        if t.len() != frames {
            return Err(ModelError::Shape(format!(
                "timestep count {} != frames {frames}",
                t.len()
            )));
        }
        if let Some(feats) = assignment_feats {
            if feats.len() != cfg.extractor_blocks + 1 {
                return Err(ModelError::Shape(format!(
                    "expected {} reference features, got {}",
                    cfg.extractor_blocks + 1,
                    feats.len()
                )));
            }
        }

        let coords = grid_coords(frames, rows, cols, frame_offset);
        let ref_rows = assignment_feats
            .and_then(|f| f.first())
            .map(|v| g.shape(*v)[0])
            .unwrap_or(tpf);
        if ref_rows % cols != 0 {
            return Err(ModelError::Shape(format!(
                "reference token count {ref_rows} does not fill {cols}-wide rows"
            )));
        }
        let ropes = BlockRopes {
            self_table: build_table(&coords, cfg.rope(), cfg.rope_base, false),
            fusion_q: build_table(&coords, cfg.rope(), cfg.rope_base, !cfg.full_rope_cross),
            fusion_k: build_table(
                &grid_coords(1, ref_rows / cols, cols, 0),
                cfg.rope(),
                cfg.rope_base,
                true,
            ),
        };

        let mut h = self.patch_embed.forward(g, bound, tokens_raw);
        let temb = self.time_embed(g, bound, cfg, t);
        let n_share = cfg.share_n();
        for (i, block) in self.blocks.iter().enumerate() {
            let cross = assignment_feats.map(|feats| feats[i / n_share]);
            h = block.forward(
                g,
                bound,
                h,
                temb,
                tpf,
                cfg.num_heads,
                &ropes,
                cross,
                probe,
                &format!("backbone.block{i}"),
            );
            if i == 0 {
                if let Some(p) = pose_tokens {
                    h = g.add(h, p);
                    probe.record("backbone.block0.after_pose".to_string(), h);
                }
            }
        }

        let mods = self.final_adaln.forward(g, bound, temb);
        let d = cfg.hidden_dim;
        let shift = g.slice_cols(mods, 0, d);
        let scale = g.slice_cols(mods, d, d);
        let n = g.layer_norm(h, S::from_f64(NORM_EPS));
        let m = g.per_frame_affine(n, scale, shift, tpf);
        Ok(self.head.forward(g, bound, m))
    }
}
