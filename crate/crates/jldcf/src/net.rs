//! The assembled network: Siamese encoder, JL compression and coarse
//! heads, DCF fusion decoder, plus the configuration catalogue covering
//! the ablation variants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, Backbone, BackboneConfig};
use crate::dcf::{fuse_pair, DcfModule, FusionVariant, Wiring};
use crate::error::{ConfigError, OpError};
use crate::graph::{Graph, NodeId};
use crate::jl::{form_batch, CpConfig, JlModule};
use crate::layers::ParamBinding;
use crate::tensor::Tensor;

/// Which modality rows are supervised by the guidance loss. Inputs always
/// carry the full RGB-D pair; single-modality runs route only the chosen
/// row into the decoder (via the identity fusion variants) and supervise
/// only its coarse head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityVariant {
    RgbD,
    Rgb,
    Depth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub backbone: BackboneConfig,
    /// Compressed channel count shared by CP outputs and the decoder.
    pub k: usize,
    pub fusion: FusionVariant,
    pub modality: ModalityVariant,
    pub wiring: Wiring,
    pub fa_enabled: bool,
    /// Output classes of both prediction heads; 1 means sigmoid saliency,
    /// C > 1 means per-pixel softmax class scores.
    pub classes: usize,
    /// Use one encoder per modality instead of the shared Siamese trunk.
    pub separate_backbones: bool,
}

impl NetworkConfig {
    pub fn paper() -> Self {
        NetworkConfig {
            backbone: BackboneConfig::paper(),
            k: 64,
            fusion: FusionVariant::Cm,
            modality: ModalityVariant::RgbD,
            wiring: Wiring::Dense,
            fa_enabled: true,
            classes: 1,
            separate_backbones: false,
        }
    }

    /// Desk-scale default: H0 = 64, all channel counts divided by 8.
    pub fn desk() -> Self {
        NetworkConfig {
            backbone: BackboneConfig::desk(),
            k: 8,
            fusion: FusionVariant::Cm,
            modality: ModalityVariant::RgbD,
            wiring: Wiring::Dense,
            fa_enabled: true,
            classes: 1,
            separate_backbones: false,
        }
    }

    /// Uniform-width toy network for gradient checks and structural tests.
    pub fn toy(input_size: usize, width: usize) -> Self {
        NetworkConfig {
            backbone: BackboneConfig::toy(input_size, width),
            k: width,
            fusion: FusionVariant::Cm,
            modality: ModalityVariant::RgbD,
            wiring: Wiring::Dense,
            fa_enabled: true,
            classes: 1,
            separate_backbones: false,
        }
    }

    pub fn input_size(&self) -> usize {
        self.backbone.input_size
    }

    /// Spatial size of the coarse heads: H0 / 16.
    pub fn coarse_size(&self) -> usize {
        self.backbone.input_size / 16
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backbone.validate()?;
        if self.classes < 1 {
            return Err(ConfigError::BadClassCount(self.classes));
        }
        if self.fa_enabled && (self.k < 4 || self.k % 4 != 0) {
            return Err(ConfigError::Invalid(format!(
                "k = {} must be a positive multiple of 4 to split across the four FA branches",
                self.k
            )));
        }
        Ok(())
    }
}

/// Graph nodes produced by one forward pass.
pub struct ForwardMaps {
    /// Fused per-hierarchy features entering the decoder.
    pub fused: [NodeId; 6],
    /// CP outputs (full batch) per hierarchy.
    pub cp: [NodeId; 6],
    /// Final prediction, 1 x classes x H0 x H0, after sigmoid/softmax.
    pub final_map: NodeId,
    /// Coarse prediction of the RGB row, 1 x classes x H0/16 x H0/16.
    pub coarse_rgb: NodeId,
    /// Coarse prediction of the depth row.
    pub coarse_depth: NodeId,
    /// Coarse prediction of the extra RGB-task row, when present.
    pub coarse_rgb_star: Option<NodeId>,
    /// Parameter leaves bound during this pass.
    pub binding: ParamBinding,
}

#[derive(Debug, Clone)]
pub struct JlDcfNet {
    pub cfg: NetworkConfig,
    backbone: Backbone,
    depth_backbone: Option<Backbone>,
    jl: JlModule,
    dcf: DcfModule,
}

impl JlDcfNet {
    /// Randomly initialized network (uniform Xavier, zero biases),
    /// deterministic for a given seed.
    pub fn init(cfg: &NetworkConfig, seed: u64) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = build_backbone(&cfg.backbone, &mut rng)?;
        let depth_backbone = if cfg.separate_backbones {
            Some(build_backbone(&cfg.backbone, &mut rng)?)
        } else {
            None
        };
        let jl = JlModule::init(
            &mut rng,
            CpConfig {
                k: cfg.k,
                kernel: 3,
            },
            cfg.backbone.hierarchy_channels(),
            cfg.classes,
        );
        let dcf = DcfModule::init(
            &mut rng,
            cfg.k,
            cfg.fusion.fused_channels(cfg.k),
            cfg.wiring,
            cfg.fa_enabled,
            cfg.classes,
        )?;
        Ok(JlDcfNet {
            cfg: cfg.clone(),
            backbone,
            depth_backbone,
            jl,
            dcf,
        })
    }

    fn check_input(&self, t: &Tensor, what: &'static str) -> Result<(), OpError> {
        let d = t.dims4(what)?;
        let h = self.cfg.backbone.input_size;
        if d.0 != 1 || d.1 != 3 {
            return Err(OpError::AxisMismatch {
                op: what,
                axis: if d.0 != 1 { 0 } else { 1 },
                expected: if d.0 != 1 { 1 } else { 3 },
                got: if d.0 != 1 { d.0 } else { d.1 },
            });
        }
        if d.2 != h || d.3 != h {
            return Err(OpError::AxisMismatch {
                op: what,
                axis: if d.2 != h { 2 } else { 3 },
                expected: h,
                got: if d.2 != h { d.2 } else { d.3 },
            });
        }
        Ok(())
    }

    /// Run the network on one RGB-D pair (plus an optional pure-RGB task
    /// image that shares the JL component but stops at its coarse head).
    pub fn forward(
        &self,
        g: &mut Graph,
        rgb: &Tensor,
        depth3: &Tensor,
        rgb_star: Option<&Tensor>,
    ) -> Result<ForwardMaps, OpError> {
        self.check_input(rgb, "forward.rgb")?;
        self.check_input(depth3, "forward.depth")?;
        if let Some(s) = rgb_star {
            self.check_input(s, "forward.rgb_star")?;
        }
        let mut binding = ParamBinding::default();
        let rows = if rgb_star.is_some() { 3 } else { 2 };

        let feats: [NodeId; 6] = match &self.depth_backbone {
            None => {
                // Shared Siamese trunk: one batch, one parameter set.
                let mut batch = form_batch(rgb, depth3)?;
                if let Some(s) = rgb_star {
                    batch.data.extend_from_slice(&s.data);
                    batch.shape[0] = 3;
                }
                let input = g.leaf(batch);
                self.backbone
                    .forward_hierarchies(g, &mut binding, "backbone", input)?
            }
            Some(depth_bb) => {
                // Separate-learning variant: one encoder per modality.
                let mut rgb_rows = rgb.clone();
                if let Some(s) = rgb_star {
                    rgb_rows.data.extend_from_slice(&s.data);
                    rgb_rows.shape[0] = 2;
                }
                let rgb_in = g.leaf(rgb_rows);
                let d_in = g.leaf(depth3.clone());
                let rgb_feats =
                    self.backbone
                        .forward_hierarchies(g, &mut binding, "backbone", rgb_in)?;
                let d_feats =
                    depth_bb.forward_hierarchies(g, &mut binding, "depth_backbone", d_in)?;
                let mut merged = rgb_feats;
                for h in 0..6 {
                    merged[h] = if rgb_star.is_some() {
                        let r = g.slice_batch(rgb_feats[h], 0, 1)?;
                        let star = g.slice_batch(rgb_feats[h], 1, 1)?;
                        let rd = g.concat_batch(r, d_feats[h])?;
                        g.concat_batch(rd, star)?
                    } else {
                        g.concat_batch(rgb_feats[h], d_feats[h])?
                    };
                }
                merged
            }
        };

        let cp = self.jl.cp_compress(g, &mut binding, &feats)?;

        let coarse_logits = self.jl.coarse_logits(g, &mut binding, cp[5])?;
        let coarse_act = self.activate(g, coarse_logits)?;
        let coarse_rgb = g.slice_batch(coarse_act, 0, 1)?;
        let coarse_depth = g.slice_batch(coarse_act, 1, 1)?;
        let coarse_rgb_star = if rows == 3 {
            Some(g.slice_batch(coarse_act, 2, 1)?)
        } else {
            None
        };

        let mut fused = cp;
        for h in 0..6 {
            let pair = if rows == 2 {
                cp[h]
            } else {
                g.slice_batch(cp[h], 0, 2)?
            };
            fused[h] = fuse_pair(g, self.cfg.fusion, pair)?;
        }

        let fa1 = self.dcf.dense_decode(g, &mut binding, &fused)?;
        let final_map = self.dcf.final_predict(g, &mut binding, fa1)?;

        Ok(ForwardMaps {
            fused,
            cp,
            final_map,
            coarse_rgb,
            coarse_depth,
            coarse_rgb_star,
            binding,
        })
    }

    fn activate(&self, g: &mut Graph, logits: NodeId) -> Result<NodeId, OpError> {
        if self.cfg.classes == 1 {
            Ok(g.sigmoid(logits))
        } else {
            g.softmax_channels(logits)
        }
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.backbone.visit(&mut |n, t| f(format!("backbone.{n}"), t));
        if let Some(bb) = &self.depth_backbone {
            bb.visit(&mut |n, t| f(format!("depth_backbone.{n}"), t));
        }
        self.jl.visit(&mut |n, t| f(format!("jl.{n}"), t));
        self.dcf.visit(&mut |n, t| f(format!("dcf.{n}"), t));
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.backbone.visit_mut(&mut |n, t| f(format!("backbone.{n}"), t));
        if let Some(bb) = &mut self.depth_backbone {
            bb.visit_mut(&mut |n, t| f(format!("depth_backbone.{n}"), t));
        }
        self.jl.visit_mut(&mut |n, t| f(format!("jl.{n}"), t));
        self.dcf.visit_mut(&mut |n, t| f(format!("dcf.{n}"), t));
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    /// Encoder parameters only (both encoders in the separate variant).
    pub fn backbone_param_count(&self) -> usize {
        self.backbone.param_count()
            + self
                .depth_backbone
                .as_ref()
                .map(|b| b.param_count())
                .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_input(seed: u64, h: usize) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rgb = Tensor::new(
            vec![1, 3, h, h],
            (0..3 * h * h).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let depth = Tensor::new(
            vec![1, 3, h, h],
            (0..3 * h * h).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        (rgb, depth)
    }

    #[test]
    fn toy_forward_structure() {
        let cfg = NetworkConfig::toy(32, 4);
        let net = JlDcfNet::init(&cfg, 1).unwrap();
        let (rgb, depth) = rand_input(5, 32);
        let mut g = Graph::new();
        let out = net.forward(&mut g, &rgb, &depth, None).unwrap();
        assert_eq!(g.shape(out.final_map), &[1, 1, 32, 32]);
        assert_eq!(g.shape(out.coarse_rgb), &[1, 1, 2, 2]);
        assert_eq!(g.shape(out.coarse_depth), &[1, 1, 2, 2]);
        assert!(out.coarse_rgb_star.is_none());
        // every prediction strictly inside (0, 1)
        for id in [out.final_map, out.coarse_rgb, out.coarse_depth] {
            assert!(g.value(id).data.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn modality_swap_symmetry_is_exact() {
        let cfg = NetworkConfig::toy(16, 4);
        let net = JlDcfNet::init(&cfg, 3).unwrap();
        let (a, b) = rand_input(11, 16);
        let mut g1 = Graph::new();
        let o1 = net.forward(&mut g1, &a, &b, None).unwrap();
        let mut g2 = Graph::new();
        let o2 = net.forward(&mut g2, &b, &a, None).unwrap();
        assert_eq!(
            g1.value(o1.coarse_rgb).data,
            g2.value(o2.coarse_depth).data
        );
        assert_eq!(
            g1.value(o1.coarse_depth).data,
            g2.value(o2.coarse_rgb).data
        );
        // Eq-style commutativity: CM fusion is symmetric, so the fused
        // features and the final map are bit-identical.
        for h in 0..6 {
            assert_eq!(g1.value(o1.fused[h]).data, g2.value(o2.fused[h]).data);
        }
        assert_eq!(g1.value(o1.final_map).data, g2.value(o2.final_map).data);
    }

    #[test]
    fn identity_rgb_ignores_depth_entirely() {
        let mut cfg = NetworkConfig::toy(16, 4);
        cfg.fusion = FusionVariant::IdentityRgb;
        cfg.modality = ModalityVariant::Rgb;
        let net = JlDcfNet::init(&cfg, 3).unwrap();
        let (rgb, d1) = rand_input(21, 16);
        let (_, d2) = rand_input(22, 16);
        let mut g1 = Graph::new();
        let o1 = net.forward(&mut g1, &rgb, &d1, None).unwrap();
        let mut g2 = Graph::new();
        let o2 = net.forward(&mut g2, &rgb, &d2, None).unwrap();
        assert_eq!(g1.value(o1.final_map).data, g2.value(o2.final_map).data);
    }

    #[test]
    fn identity_depth_ignores_rgb_entirely() {
        let mut cfg = NetworkConfig::toy(16, 4);
        cfg.fusion = FusionVariant::IdentityDepth;
        cfg.modality = ModalityVariant::Depth;
        let net = JlDcfNet::init(&cfg, 3).unwrap();
        let (r1, depth) = rand_input(31, 16);
        let (r2, _) = rand_input(32, 16);
        let mut g1 = Graph::new();
        let o1 = net.forward(&mut g1, &r1, &depth, None).unwrap();
        let mut g2 = Graph::new();
        let o2 = net.forward(&mut g2, &r2, &depth, None).unwrap();
        assert_eq!(g1.value(o1.final_map).data, g2.value(o2.final_map).data);
    }

    #[test]
    fn concat_variant_widens_fa_inputs_to_2k() {
        let mut cfg = NetworkConfig::toy(16, 4);
        cfg.fusion = FusionVariant::Concat;
        let net = JlDcfNet::init(&cfg, 3).unwrap();
        let (rgb, depth) = rand_input(41, 16);
        let mut g = Graph::new();
        let out = net.forward(&mut g, &rgb, &depth, None).unwrap();
        for h in 0..6 {
            assert_eq!(g.shape(out.fused[h])[1], 2 * cfg.k);
        }
        assert_eq!(g.shape(out.final_map), &[1, 1, 16, 16]);
    }

    #[test]
    fn cm_variant_keeps_fa_inputs_at_k() {
        let cfg = NetworkConfig::toy(16, 4);
        let net = JlDcfNet::init(&cfg, 3).unwrap();
        let (rgb, depth) = rand_input(41, 16);
        let mut g = Graph::new();
        let out = net.forward(&mut g, &rgb, &depth, None).unwrap();
        for h in 0..6 {
            assert_eq!(g.shape(out.fused[h])[1], cfg.k);
        }
    }

    #[test]
    fn separate_backbones_double_encoder_params() {
        let shared = JlDcfNet::init(&NetworkConfig::toy(16, 4), 7).unwrap();
        let mut cfg = NetworkConfig::toy(16, 4);
        cfg.separate_backbones = true;
        let separate = JlDcfNet::init(&cfg, 7).unwrap();
        assert_eq!(
            separate.backbone_param_count(),
            2 * shared.backbone_param_count()
        );
        // the rest of the network is unchanged
        assert_eq!(
            separate.param_count() - separate.backbone_param_count(),
            shared.param_count() - shared.backbone_param_count()
        );
    }

    #[test]
    fn separate_backbones_forward_matches_contract() {
        let mut cfg = NetworkConfig::toy(16, 4);
        cfg.separate_backbones = true;
        let net = JlDcfNet::init(&cfg, 7).unwrap();
        let (rgb, depth) = rand_input(51, 16);
        let mut g = Graph::new();
        let out = net.forward(&mut g, &rgb, &depth, None).unwrap();
        assert_eq!(g.shape(out.final_map), &[1, 1, 16, 16]);
    }

    #[test]
    fn multitask_row_gets_coarse_head_only() {
        let cfg = NetworkConfig::toy(16, 4);
        let net = JlDcfNet::init(&cfg, 9).unwrap();
        let (rgb, depth) = rand_input(61, 16);
        let (star, _) = rand_input(62, 16);
        let mut g = Graph::new();
        let out = net.forward(&mut g, &rgb, &depth, Some(&star)).unwrap();
        let s = out.coarse_rgb_star.unwrap();
        assert_eq!(g.shape(s), &[1, 1, 1, 1]);
        // fusion still consumes exactly the RGB-D pair
        for h in 0..6 {
            assert_eq!(g.shape(out.fused[h])[0], 1);
        }
    }

    #[test]
    fn input_size_mismatch_rejected() {
        let cfg = NetworkConfig::toy(16, 4);
        let net = JlDcfNet::init(&cfg, 9).unwrap();
        let (rgb, depth) = rand_input(71, 32);
        let mut g = Graph::new();
        assert!(net.forward(&mut g, &rgb, &depth, None).is_err());
    }

    #[test]
    fn config_rejects_non_multiple_k() {
        let mut cfg = NetworkConfig::toy(16, 4);
        cfg.k = 6;
        assert!(cfg.validate().is_err());
    }
}
