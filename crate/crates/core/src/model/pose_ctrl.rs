//! Identity-robust pose control: a strided 3-d conv encoder over rasterized
//! skeletons and a self-attention refinement that mixes the reference pose
//! with the driving sequence along the frame axis.

use ndarray::{Array3, Array4};

use crate::nn::{Bound, Conv3dLayer, GroupNormLayer, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Graph, Var};

use super::dit::{sinusoidal_embedding, BlockRopes, DitBlock};
use super::rope::{build_table, grid_coords};
use super::{ModelConfig, ModelError, Probe};

const GN_GROUPS: usize = 4;
const GN_EPS: f64 = 1e-6;

/// GroupNorm + SiLU + Conv3d, twice, with a residual connection.
pub struct ResBlock {
    pub gn1: GroupNormLayer,
    pub conv1: Conv3dLayer,
    pub gn2: GroupNormLayer,
    pub conv2: Conv3dLayer,
}

impl ResBlock {
    fn init<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Self {
        Self {
            gn1: GroupNormLayer::init(store, &format!("{name}.gn1"), channels, GN_GROUPS, GN_EPS),
            conv1: Conv3dLayer::init(store, &format!("{name}.conv1"), channels, channels, (1, 1, 1)),
            gn2: GroupNormLayer::init(store, &format!("{name}.gn2"), channels, GN_GROUPS, GN_EPS),
            conv2: Conv3dLayer::init(store, &format!("{name}.conv2"), channels, channels, (1, 1, 1)),
        }
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, bound: &Bound, x: Var) -> Var {
        let h = self.gn1.forward(g, bound, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, bound, h);
        let h = self.gn2.forward(g, bound, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, bound, h);
        g.add(x, h)
    }
}

struct Stage {
    rb: ResBlock,
    down: Conv3dLayer,
}

/// Conv encoder whose stride products match the token grid: temporal 4,
/// spatial `spatial_factor * patch`, so its output aligns with the latent
/// frames and patch positions the backbone sees.
pub struct PoseResNet {
    conv_in: Conv3dLayer,
    stages: Vec<Stage>,
    conv_out: Conv3dLayer,
}

impl PoseResNet {
    pub fn init<S: Scalar>(store: &mut ParamStore<S>, cfg: &ModelConfig) -> Self {
        let ch = cfg.pose_channels;
        let conv_in = Conv3dLayer::init(store, "pose.resnet.conv_in", 3, ch, (1, 1, 1));
        let stages = cfg
            .pose_strides
            .iter()
            .enumerate()
            .map(|(i, &stride)| Stage {
                rb: ResBlock::init(store, &format!("pose.resnet.stage{i}.rb"), ch),
                down: Conv3dLayer::init(
                    store,
                    &format!("pose.resnet.stage{i}.down"),
                    ch,
                    ch,
                    stride,
                ),
            })
            .collect();
        let conv_out = Conv3dLayer::init(
            store,
            "pose.resnet.conv_out",
            ch,
            cfg.hidden_dim,
            (1, 1, 1),
        );
        Self {
            conv_in,
            stages,
            conv_out,
        }
    }

    /// `[3, F, H, W]` raster stack to `[F' * rows * cols, d]` tokens.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bound: &Bound, x: Var) -> Var {
        let mut h = self.conv_in.forward(g, bound, x);
        for stage in &self.stages {
            h = stage.rb.forward(g, bound, h);
            h = stage.down.forward(g, bound, h);
        }
        let h = self.conv_out.forward(g, bound, h);
        g.channels_to_tokens(h)
    }
}

/// Pose encoder plus the frame-concat self-attention refinement.
pub struct PoseControl {
    pub resnet: PoseResNet,
    pub t_fc1: Linear,
    pub t_fc2: Linear,
    pub refine: DitBlock,
}

impl PoseControl {
    pub fn init<S: Scalar>(store: &mut ParamStore<S>, cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        Self {
            resnet: PoseResNet::init(store, cfg),
            t_fc1: Linear::init(store, "pose.time.fc1", d, d),
            t_fc2: Linear::init(store, "pose.time.fc2", d, d),
            refine: DitBlock::init(store, "pose.refine", cfg, false),
        }
    }

    /// Encode reference and driving rasters with shared weights. The rasters
    /// arrive as `[H, W, 3]` / `[F, H, W, 3]` pixel images.
    pub fn encode_poses_in_graph<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        reference_raster: &Array3<S>,
        driving_rasters: &Array4<S>,
    ) -> Result<(Var, Var), ModelError> {
        if reference_raster.shape()[..2] != driving_rasters.shape()[1..3] {
            return Err(ModelError::Shape(format!(
                "reference raster {:?} vs driving {:?}",
                reference_raster.shape(),
                driving_rasters.shape()
            )));
        }
        let ref_in = g.leaf(to_cfhw(&reference_raster.clone().insert_axis(ndarray::Axis(0))));
        let drv_in = g.leaf(to_cfhw(driving_rasters));
        let p_ref = self.resnet.forward(g, bound, ref_in);
        let p_drv = self.resnet.forward(g, bound, drv_in);
        Ok((p_ref, p_drv))
    }

    /// Frame-concat the reference and driving pose features and run one
    /// self-attention block over them. Returns the full refined grid (the
    /// reference slot stays aligned with the frame-concatenated backbone
    /// input). `no_temporal_rope` is a diagnostic mode for equivariance
    /// tests.
    #[allow(clippy::too_many_arguments)]
    pub fn refine_in_graph<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        cfg: &ModelConfig,
        p_ref: Var,
        p_drv: Var,
        rows: usize,
        cols: usize,
        no_temporal_rope: bool,
        probe: &mut Probe,
    ) -> Result<Var, ModelError> {
        let tpf = rows * cols;
        let rf = g.shape(p_ref)[0];
        let df = g.shape(p_drv)[0];
        if rf != tpf || df % tpf != 0 {
            return Err(ModelError::Shape(format!(
                "pose grids misaligned: ref {rf}, driving {df}, tokens/frame {tpf}"
            )));
        }
        let frames = 1 + df / tpf;
        let cat = g.concat_rows(&[p_ref, p_drv]);
        let coords = grid_coords(frames, rows, cols, 0);
        let table = build_table(&coords, cfg.rope(), cfg.rope_base, no_temporal_rope);
        let ropes = BlockRopes {
            self_table: table.clone(),
            fusion_q: table.clone(),
            fusion_k: table,
        };
        let sin = sinusoidal_embedding(&vec![S::zero(); frames], cfg.hidden_dim);
        let sin_leaf = g.leaf(sin.into_dyn());
        let a = self.t_fc1.forward(g, bound, sin_leaf);
        let act = g.silu(a);
        let b = self.t_fc2.forward(g, bound, act);
        let temb = g.silu(b);
        Ok(self.refine.forward(
            g,
            bound,
            cat,
            temb,
            tpf,
            cfg.num_heads,
            &ropes,
            None,
            probe,
            "pose.refine",
        ))
    }
}

/// `[F, H, W, 3]` to `[3, F, H, W]` (conv layout), as a leaf-ready array.
pub fn to_cfhw<S: Scalar>(frames: &Array4<S>) -> ndarray::ArrayD<S> {
    frames
        .view()
        .permuted_axes([3, 0, 1, 2])
        .as_standard_layout()
        .into_owned()
        .into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::OneToAllModel;
    use ndarray::{Array2, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn paper_preset_strides_give_sixteenth_grid() {
        // Four-stage preset: strides (1,2,2),(2,2,2),(2,2,2),(1,2,2) give a
        // total of /16 spatially and /4 temporally.
        let mut cfg = ModelConfig::toy();
        cfg.spatial_factor = 8;
        cfg.pose_strides = vec![(1, 2, 2), (2, 2, 2), (2, 2, 2), (1, 2, 2)];
        cfg.validate().unwrap();
        let mut store = ParamStore::<f32>::new(0);
        let net = PoseResNet::init(&mut store, &cfg);
        let mut g = Graph::<f32>::new();
        let bound = store.bind(&mut g);
        let x = g.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[3, 1, 64, 64])));
        let out = net.forward(&mut g, &bound, x);
        // 64/16 = 4 -> 4x4 grid of tokens for a single frame.
        assert_eq!(g.shape(out), &[16, cfg.hidden_dim]);
    }

    #[test]
    fn temporal_arithmetic_29_frames_to_8() {
        let cfg = ModelConfig::toy();
        let mut store = ParamStore::<f32>::new(1);
        let net = PoseResNet::init(&mut store, &cfg);
        let mut g = Graph::<f32>::new();
        let bound = store.bind(&mut g);
        let x = g.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[3, 29, 16, 16])));
        let out = net.forward(&mut g, &bound, x);
        // 29 frames -> 8 latent frames; 16/8 = 2 -> 2x2 spatial grid.
        let latent_frames = crate::codec::Codec::new(cfg.spatial_factor)
            .latent_frames(29)
            .unwrap();
        assert_eq!(latent_frames, 8);
        assert_eq!(g.shape(out), &[8 * 2 * 2, cfg.hidden_dim]);
    }

    #[test]
    fn black_rasters_give_finite_bias_response() {
        let cfg = ModelConfig::micro();
        let model = OneToAllModel::<f64>::init(cfg.clone(), 2).unwrap();
        let mut g = Graph::<f64>::new();
        let bound = model.store.bind(&mut g);
        let reference = ndarray::Array3::<f64>::zeros((8, 8, 3));
        let driving = Array4::<f64>::zeros((5, 8, 8, 3));
        let (p_ref, p_drv) = model
            .pose
            .encode_poses_in_graph(&mut g, &bound, &reference, &driving)
            .unwrap();
        assert!(g.value(p_ref).iter().all(|v| v.is_finite()));
        assert!(g.value(p_drv).iter().all(|v| v.is_finite()));
        assert_eq!(g.shape(p_ref), &[2 * 2, cfg.hidden_dim]);
        assert_eq!(g.shape(p_drv), &[2 * 2 * 2, cfg.hidden_dim]);
    }

    #[test]
    fn refine_is_identity_at_init() {
        // Zero-initialized modulation gates make the refinement block an
        // exact identity on the concatenated features.
        let cfg = ModelConfig::micro();
        let model = OneToAllModel::<f64>::init(cfg.clone(), 3).unwrap();
        let mut g = Graph::<f64>::new();
        let bound = model.store.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pr = Array2::<f64>::from_shape_fn((4, cfg.hidden_dim), |_| rng.gen());
        let pd = Array2::<f64>::from_shape_fn((8, cfg.hidden_dim), |_| rng.gen());
        let prv = g.leaf(pr.clone().into_dyn());
        let pdv = g.leaf(pd.clone().into_dyn());
        let mut probe = Probe::default();
        let out = model
            .pose
            .refine_in_graph(&mut g, &bound, &cfg, prv, pdv, 2, 2, false, &mut probe)
            .unwrap();
        let got = g.value(out).clone();
        let want = ndarray::concatenate(
            ndarray::Axis(0),
            &[pr.view(), pd.view()],
        )
        .unwrap();
        for (a, b) in got.iter().zip(want.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn refine_reference_attends_to_all_frames() {
        let cfg = ModelConfig::micro();
        let mut model = OneToAllModel::<f64>::init(cfg.clone(), 5).unwrap();
        // Randomize gates so attention actually feeds the output.
        let id = model.store.by_name("pose.refine.adaln.w").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        model.store.get_mut(id).mapv_inplace(|_| rng.gen::<f64>() * 0.1);
        let mut g = Graph::<f64>::new();
        let bound = model.store.bind(&mut g);
        let pr = Array2::<f64>::from_shape_fn((4, cfg.hidden_dim), |_| rng.gen());
        let pd = Array2::<f64>::from_shape_fn((8, cfg.hidden_dim), |_| rng.gen());
        let prv = g.leaf(pr.into_dyn());
        let pdv = g.leaf(pd.into_dyn());
        let mut probe = Probe::default();
        let _ = model
            .pose
            .refine_in_graph(&mut g, &bound, &cfg, prv, pdv, 2, 2, false, &mut probe)
            .unwrap();
        let attn = probe.get("pose.refine.attn0").unwrap();
        let a = g
            .value(attn)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        // Reference-slot rows (first 4 tokens) span every token of every
        // frame and sum to one.
        assert_eq!(a.ncols(), 12);
        for r in 0..4 {
            let row = a.row(r);
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn refine_driving_permutation_equivariant_without_temporal_rope() {
        let cfg = ModelConfig::micro();
        let mut model = OneToAllModel::<f64>::init(cfg.clone(), 7).unwrap();
        let id = model.store.by_name("pose.refine.adaln.w").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        model.store.get_mut(id).mapv_inplace(|_| rng.gen::<f64>() * 0.1);

        let pr = Array2::<f64>::from_shape_fn((4, cfg.hidden_dim), |_| rng.gen());
        let pd = Array2::<f64>::from_shape_fn((12, cfg.hidden_dim), |_| rng.gen());
        // Swap driving frames 0 and 2 (each frame is 4 token rows).
        let mut pd_swapped = pd.clone();
        for r in 0..4 {
            for c in 0..cfg.hidden_dim {
                pd_swapped[[r, c]] = pd[[8 + r, c]];
                pd_swapped[[8 + r, c]] = pd[[r, c]];
            }
        }

        let run = |drv: &Array2<f64>| -> Array2<f64> {
            let mut g = Graph::<f64>::new();
            let bound = model.store.bind(&mut g);
            let prv = g.leaf(pr.clone().into_dyn());
            let pdv = g.leaf(drv.clone().into_dyn());
            let mut probe = Probe::default();
            let out = model
                .pose
                .refine_in_graph(&mut g, &bound, &cfg, prv, pdv, 2, 2, true, &mut probe)
                .unwrap();
            g.value(out)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
        };
        let base = run(&pd);
        let swapped = run(&pd_swapped);
        // Outputs permute identically: driving frame block k of the swapped
        // run equals block perm(k) of the base run.
        let tok = |m: &Array2<f64>, frame: usize, r: usize, c: usize| m[[4 + frame * 4 + r, c]];
        for r in 0..4 {
            for c in 0..cfg.hidden_dim {
                assert!((tok(&swapped, 0, r, c) - tok(&base, 2, r, c)).abs() < 1e-12);
                assert!((tok(&swapped, 2, r, c) - tok(&base, 0, r, c)).abs() < 1e-12);
                assert!((tok(&swapped, 1, r, c) - tok(&base, 1, r, c)).abs() < 1e-12);
            }
        }
    }
}
