//! Densely cooperative fusion decoder: CM cross-modal fusion of each
//! batch pair, Inception-style FA aggregation with dense top-down skips,
//! and the full-resolution prediction head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, OpError};
use crate::graph::{Graph, NodeId};
use crate::kernels::{ConvSpec, PoolSpec};
use crate::layers::{ConvLayer, ParamBinding};

/// How the two modality rows of a CP output batch are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// Cooperative fusion: rgb + d + rgb*d, keeps k channels.
    Cm,
    /// Channel concatenation, yields 2k channels.
    Concat,
    /// Pass the RGB row through unchanged (single-modality run).
    IdentityRgb,
    /// Pass the depth row through unchanged (single-modality run).
    IdentityDepth,
}

impl FusionVariant {
    /// Channel count produced by fusing a k-channel pair.
    pub fn fused_channels(self, k: usize) -> usize {
        match self {
            FusionVariant::Concat => 2 * k,
            _ => k,
        }
    }
}

/// Top-down skip topology of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wiring {
    /// Every FA takes inputs from all levels deeper than itself.
    Dense,
    /// Only the chain edge FA_{i+1} -> FA_i survives.
    Chain,
    /// Chain plus the single FA5 -> FA1 residual skip.
    ChainPlusResidual,
}

/// Deeper FA levels feeding consumer `i` (0-based FA index).
pub fn skip_sources(wiring: Wiring, i: usize) -> Vec<usize> {
    match wiring {
        Wiring::Dense => ((i + 1)..6).collect(),
        Wiring::Chain => {
            if i < 5 {
                vec![i + 1]
            } else {
                vec![]
            }
        }
        Wiring::ChainPlusResidual => {
            let mut v = if i < 5 { vec![i + 1] } else { vec![] };
            if i == 0 {
                v.push(4);
            }
            v
        }
    }
}

/// Incoming edge count per FA node (its CM input plus the skips).
pub fn incoming_edges(wiring: Wiring) -> [usize; 6] {
    std::array::from_fn(|i| 1 + skip_sources(wiring, i).len())
}

/// Cooperative fusion of a two-row batch feature:
/// X_rgb + X_d + X_rgb * X_d, element-wise; symmetric in its rows.
pub fn cm_fuse(g: &mut Graph, batch_feat: NodeId) -> Result<NodeId, OpError> {
    let dims = g.value(batch_feat).dims4("cm_fuse")?;
    if dims.0 != 2 {
        return Err(OpError::AxisMismatch {
            op: "cm_fuse",
            axis: 0,
            expected: 2,
            got: dims.0,
        });
    }
    let (rgb, d) = g.split_batch(batch_feat)?;
    let prod = g.mul(rgb, d)?;
    let sum = g.add(rgb, d)?;
    g.add(sum, prod)
}

/// Merge the two modality rows per the configured variant.
pub fn fuse_pair(
    g: &mut Graph,
    variant: FusionVariant,
    batch_feat: NodeId,
) -> Result<NodeId, OpError> {
    match variant {
        FusionVariant::Cm => cm_fuse(g, batch_feat),
        FusionVariant::Concat => {
            let (rgb, d) = g.split_batch(batch_feat)?;
            g.concat_channels(rgb, d)
        }
        FusionVariant::IdentityRgb => g.slice_batch(batch_feat, 0, 1),
        FusionVariant::IdentityDepth => g.slice_batch(batch_feat, 1, 1),
    }
}

/// Inception-block settings for one FA module: 1x1, 1x1->3x3, 1x1->5x5 and
/// maxpool->1x1 branches, all stride 1 and size preserving, with branch
/// output widths summing to k.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub branch_widths: [usize; 4],
}

impl FaConfig {
    pub fn uniform(in_channels: usize, k: usize) -> Self {
        FaConfig {
            in_channels,
            out_channels: k,
            branch_widths: [k / 4; 4],
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let sum: usize = self.branch_widths.iter().sum();
        if sum != self.out_channels || self.branch_widths.contains(&0) {
            return Err(ConfigError::BadFaWidths {
                widths: self.branch_widths,
                sum,
                expected: self.out_channels,
            });
        }
        Ok(())
    }
}

const FA_POOL: PoolSpec = PoolSpec {
    kernel: 3,
    stride: 1,
    padding: 1,
};

/// One feature-aggregation module.
#[derive(Debug, Clone)]
pub struct FaModule {
    pub cfg: FaConfig,
    b1: ConvLayer,
    b3_reduce: ConvLayer,
    b3: ConvLayer,
    b5_reduce: ConvLayer,
    b5: ConvLayer,
    pool_proj: ConvLayer,
}

impl FaModule {
    pub fn init<R: Rng>(rng: &mut R, cfg: FaConfig) -> Self {
        let [w1, w2, w3, w4] = cfg.branch_widths;
        FaModule {
            cfg,
            b1: ConvLayer::init(rng, w1, cfg.in_channels, 1, ConvSpec::unit()),
            b3_reduce: ConvLayer::init(rng, w2, cfg.in_channels, 1, ConvSpec::unit()),
            b3: ConvLayer::init(rng, w2, w2, 3, ConvSpec::size_preserving(3, 1)),
            b5_reduce: ConvLayer::init(rng, w3, cfg.in_channels, 1, ConvSpec::unit()),
            b5: ConvLayer::init(rng, w3, w3, 5, ConvSpec::size_preserving(5, 1)),
            pool_proj: ConvLayer::init(rng, w4, cfg.in_channels, 1, ConvSpec::unit()),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        binding: &mut ParamBinding,
        name: &str,
        x: NodeId,
    ) -> Result<NodeId, OpError> {
        let got = g.value(x).dims4("fa_aggregate")?.1;
        if got != self.cfg.in_channels {
            return Err(OpError::AxisMismatch {
                op: "fa_aggregate",
                axis: 1,
                expected: self.cfg.in_channels,
                got,
            });
        }
        let conv = |g: &mut Graph, binding: &mut ParamBinding, layer: &ConvLayer, suffix: &str, x| -> Result<NodeId, OpError> {
            let y = layer.apply(g, binding, &format!("{name}.{suffix}"), x)?;
            Ok(g.relu(y))
        };
        let p1 = conv(g, binding, &self.b1, "b1", x)?;
        let p3 = conv(g, binding, &self.b3_reduce, "b3_reduce", x)?;
        let p3 = conv(g, binding, &self.b3, "b3", p3)?;
        let p5 = conv(g, binding, &self.b5_reduce, "b5_reduce", x)?;
        let p5 = conv(g, binding, &self.b5, "b5", p5)?;
        let pp = g.maxpool2d(x, FA_POOL)?;
        let pp = conv(g, binding, &self.pool_proj, "pool_proj", pp)?;
        let c12 = g.concat_channels(p1, p3)?;
        let c123 = g.concat_channels(c12, p5)?;
        g.concat_channels(c123, pp)
    }

    pub fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(String, &'a crate::tensor::Tensor)) {
        for (suffix, layer) in [
            ("b1", &self.b1),
            ("b3_reduce", &self.b3_reduce),
            ("b3", &self.b3),
            ("b5_reduce", &self.b5_reduce),
            ("b5", &self.b5),
            ("pool_proj", &self.pool_proj),
        ] {
            layer.visit(&format!("{name}.{suffix}"), &mut |n, t| f(n, t));
        }
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(String, &mut crate::tensor::Tensor)) {
        for (suffix, layer) in [
            ("b1", &mut self.b1),
            ("b3_reduce", &mut self.b3_reduce),
            ("b3", &mut self.b3),
            ("b5_reduce", &mut self.b5_reduce),
            ("b5", &mut self.b5),
            ("pool_proj", &mut self.pool_proj),
        ] {
            layer.visit_mut(&format!("{name}.{suffix}"), &mut |n, t| f(n, t));
        }
    }
}

/// The decoder: six FA modules (optional) over the configured wiring plus
/// the final (1x1, classes) head.
#[derive(Debug, Clone)]
pub struct DcfModule {
    pub wiring: Wiring,
    pub fa_enabled: bool,
    pub fused_channels: usize,
    fa: Vec<FaModule>,
    final_head: ConvLayer,
}

impl DcfModule {
    pub fn init<R: Rng>(
        rng: &mut R,
        k: usize,
        fused_channels: usize,
        wiring: Wiring,
        fa_enabled: bool,
        classes: usize,
    ) -> Result<Self, ConfigError> {
        if classes < 1 {
            return Err(ConfigError::BadClassCount(classes));
        }
        let fa = if fa_enabled {
            (0..6)
                .map(|_| {
                    let cfg = FaConfig::uniform(fused_channels, k);
                    cfg.validate()?;
                    Ok(FaModule::init(rng, cfg))
                })
                .collect::<Result<Vec<_>, ConfigError>>()?
        } else {
            Vec::new()
        };
        // With FA disabled the decoder carries the fused width through.
        let head_in = if fa_enabled { k } else { fused_channels };
        let final_head = ConvLayer::init(rng, classes, head_in, 1, ConvSpec::unit());
        Ok(DcfModule {
            wiring,
            fa_enabled,
            fused_channels,
            fa,
            final_head,
        })
    }

    /// Decode six fused maps (deepest last) down to a full-resolution
    /// activation. Each consumer adds its (upsampled) skip inputs to its
    /// CM input before aggregation; skips are upsampled at the consumer's
    /// resolution before the addition.
    pub fn dense_decode(
        &self,
        g: &mut Graph,
        binding: &mut ParamBinding,
        cm_outputs: &[NodeId; 6],
    ) -> Result<NodeId, OpError> {
        let sizes: Vec<usize> = cm_outputs
            .iter()
            .map(|&n| g.value(n).dims4("dense_decode").map(|d| d.2))
            .collect::<Result<_, _>>()?;
        for i in 0..5 {
            if sizes[i] < sizes[i + 1] {
                return Err(OpError::AxisMismatch {
                    op: "dense_decode",
                    axis: 2,
                    expected: sizes[i + 1],
                    got: sizes[i],
                });
            }
        }
        let mut fa_out: Vec<Option<NodeId>> = vec![None; 6];
        for i in (0..6).rev() {
            let mut combined = cm_outputs[i];
            for j in skip_sources(self.wiring, i) {
                let deeper = fa_out[j].expect("deeper FA already decoded");
                let factor = sizes[i] / sizes[j];
                let mut skip = if factor == 1 {
                    deeper
                } else {
                    g.bilinear_upsample(deeper, factor)?
                };
                // In the concat fusion variant FA outputs are k wide but CM
                // outputs are 2k; the skip is applied to both halves.
                if self.fa_enabled && self.fused_channels != self.fa[i].cfg.out_channels {
                    skip = g.concat_channels(skip, skip)?;
                }
                combined = g.add(combined, skip)?;
            }
            fa_out[i] = Some(if self.fa_enabled {
                self.fa[i].forward(g, binding, &format!("dcf.fa{}", i + 1), combined)?
            } else {
                combined
            });
        }
        Ok(fa_out[0].unwrap())
    }

    /// Final (1x1, classes) head: sigmoid saliency for classes == 1,
    /// per-pixel softmax class scores otherwise.
    pub fn final_predict(
        &self,
        g: &mut Graph,
        binding: &mut ParamBinding,
        fa1_out: NodeId,
    ) -> Result<NodeId, OpError> {
        let logits = self.final_head.apply(g, binding, "dcf.final_head", fa1_out)?;
        if self.final_head.out_channels() == 1 {
            Ok(g.sigmoid(logits))
        } else {
            g.softmax_channels(logits)
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a crate::tensor::Tensor)) {
        for (i, fa) in self.fa.iter().enumerate() {
            fa.visit(&format!("fa{}", i + 1), &mut |n, t| f(n, t));
        }
        self.final_head.visit("final_head", &mut |n, t| f(n, t));
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut crate::tensor::Tensor)) {
        for (i, fa) in self.fa.iter_mut().enumerate() {
            fa.visit_mut(&format!("fa{}", i + 1), &mut |n, t| f(n, t));
        }
        self.final_head.visit_mut("final_head", &mut |n, t| f(n, t));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cm_hand_example() {
        // rgb = [1, 2], d = [3, 0] -> [1+3+3, 2+0+0] = [7, 2]
        let mut g = Graph::new();
        let batch = g.leaf(Tensor::new(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 0.0]));
        let fused = cm_fuse(&mut g, batch).unwrap();
        assert_eq!(g.value(fused).data, vec![7.0, 2.0]);
        assert_eq!(g.shape(fused), &[1, 1, 1, 2]);
    }

    #[test]
    fn cm_zero_depth_is_identity_on_rgb() {
        let mut g = Graph::new();
        let rgb = vec![0.4, -1.0, 2.5, 0.0];
        let mut data = rgb.clone();
        data.extend_from_slice(&[0.0; 4]);
        let batch = g.leaf(Tensor::new(vec![2, 1, 2, 2], data));
        let fused = cm_fuse(&mut g, batch).unwrap();
        assert_eq!(g.value(fused).data, rgb);
    }

    #[test]
    fn cm_is_symmetric_in_its_rows() {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..18).map(|_| r.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..18).map(|_| r.gen_range(-1.0..1.0)).collect();
        let run = |first: &[f64], second: &[f64]| {
            let mut d = first.to_vec();
            d.extend_from_slice(second);
            let mut g = Graph::new();
            let batch = g.leaf(Tensor::new(vec![2, 2, 3, 3], d));
            let fused = cm_fuse(&mut g, batch).unwrap();
            g.value(fused).data.clone()
        };
        assert_eq!(run(&a, &b), run(&b, &a));
    }

    #[test]
    fn cm_requires_pair_batch() {
        let mut g = Graph::new();
        let batch = g.leaf(Tensor::zeros(&[3, 1, 2, 2]));
        assert!(matches!(
            cm_fuse(&mut g, batch),
            Err(OpError::AxisMismatch { axis: 0, .. })
        ));
    }

    #[test]
    fn fa_width_bookkeeping_k64() {
        let cfg = FaConfig::uniform(64, 64);
        assert_eq!(cfg.branch_widths, [16; 4]);
        cfg.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fa = FaModule::init(&mut rng, cfg);
        let mut g = Graph::new();
        let mut binding = ParamBinding::default();
        let x = g.leaf(Tensor::full(&[1, 64, 5, 5], 0.2));
        let y = fa.forward(&mut g, &mut binding, "fa", x).unwrap();
        assert_eq!(g.shape(y), &[1, 64, 5, 5]);
    }

    #[test]
    fn fa_rejects_bad_branch_widths() {
        let cfg = FaConfig {
            in_channels: 8,
            out_channels: 8,
            branch_widths: [2, 2, 2, 3],
        };
        assert!(matches!(
            cfg.validate(),
            Err(ConfigError::BadFaWidths { sum: 9, .. })
        ));
    }

    #[test]
    fn edge_counts_per_wiring() {
        assert_eq!(incoming_edges(Wiring::Dense), [6, 5, 4, 3, 2, 1]);
        assert_eq!(incoming_edges(Wiring::Chain), [2, 2, 2, 2, 2, 1]);
        assert_eq!(incoming_edges(Wiring::ChainPlusResidual), [3, 2, 2, 2, 2, 1]);
    }

    #[test]
    fn dense_decode_reaches_full_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let k = 4;
        let dcf = DcfModule::init(&mut rng, k, k, Wiring::Dense, true, 1).unwrap();
        let mut g = Graph::new();
        let mut binding = ParamBinding::default();
        let h0 = 16usize;
        let sizes = [h0, h0 / 2, h0 / 4, h0 / 8, h0 / 16, h0 / 16];
        let cm: [NodeId; 6] =
            std::array::from_fn(|i| g.leaf(Tensor::full(&[1, k, sizes[i], sizes[i]], 0.1)));
        let fa1 = dcf.dense_decode(&mut g, &mut binding, &cm).unwrap();
        assert_eq!(g.shape(fa1), &[1, k, h0, h0]);
        let map = dcf.final_predict(&mut g, &mut binding, fa1).unwrap();
        assert_eq!(g.shape(map), &[1, 1, h0, h0]);
    }

    #[test]
    fn zero_head_gives_uniform_half_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut dcf = DcfModule::init(&mut rng, 4, 4, Wiring::Dense, true, 1).unwrap();
        dcf.final_head.weight = Tensor::zeros(&[1, 4, 1, 1]);
        let mut g = Graph::new();
        let mut binding = ParamBinding::default();
        let x = g.leaf(Tensor::full(&[1, 4, 6, 6], 0.3));
        let map = dcf.final_predict(&mut g, &mut binding, x).unwrap();
        assert!(g.value(map).data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn multiclass_head_probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let classes = 40;
        let dcf = DcfModule::init(&mut rng, 8, 8, Wiring::Dense, true, classes).unwrap();
        let mut g = Graph::new();
        let mut binding = ParamBinding::default();
        use rand::Rng;
        let x = g.leaf(Tensor::new(
            vec![1, 8, 3, 3],
            (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ));
        let map = dcf.final_predict(&mut g, &mut binding, x).unwrap();
        assert_eq!(g.shape(map), &[1, classes, 3, 3]);
        let d = &g.value(map).data;
        for pix in 0..9 {
            let total: f64 = (0..classes).map(|c| d[c * 9 + pix]).sum();
            assert!((total - 1.0).abs() < 1e-6, "pixel {pix} sums to {total}");
        }
    }

    #[test]
    fn rejects_zero_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            DcfModule::init(&mut rng, 4, 4, Wiring::Dense, true, 0),
            Err(ConfigError::BadClassCount(0))
        ));
    }

    #[test]
    fn size_schedule_violation_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dcf = DcfModule::init(&mut rng, 4, 4, Wiring::Dense, true, 1).unwrap();
        let mut g = Graph::new();
        let mut binding = ParamBinding::default();
        // deepest-first ordering violates the deepest-last contract
        let cm: [NodeId; 6] = std::array::from_fn(|i| {
            let s = 1 << i; // 1,2,4,8,16,32: increasing instead of decreasing
            g.leaf(Tensor::zeros(&[1, 4, s, s]))
        });
        assert!(dcf.dense_decode(&mut g, &mut binding, &cm).is_err());
    }
}
