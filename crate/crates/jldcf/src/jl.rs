//! Joint-learning component: depth preprocessing, Siamese batch formation,
//! CP channel compression of the six hierarchies, and the shared coarse
//! prediction head supervised by the global guidance loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, OpError};
use crate::graph::{Graph, NodeId};
use crate::kernels::ConvSpec;
use crate::layers::{ConvLayer, ParamBinding};
use crate::tensor::Tensor;

/// Single-channel depth map with arbitrary raw range.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(width * height, data.len());
        DepthMap {
            width,
            height,
            data,
        }
    }
}

/// Normalize a depth map into [0, 255] and replicate it into three
/// channels (vanilla gray color mapping). Constant maps normalize to
/// all-zeros rather than injecting a fake mid-gray level.
pub fn depth_to_3ch(d: &DepthMap) -> Result<Tensor, DataError> {
    if d.data.is_empty() {
        return Err(DataError::EmptyDepth);
    }
    let min = d.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = d.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let plane: Vec<f64> = if max > min {
        d.data.iter().map(|v| (v - min) * 255.0 / (max - min)).collect()
    } else {
        vec![0.0; d.data.len()]
    };
    let mut data = Vec::with_capacity(3 * plane.len());
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Ok(Tensor::new(vec![1, 3, d.height, d.width], data))
}

/// Stack an RGB image and a transformed depth map along the batch axis
/// (row 0 = RGB, row 1 = depth); this order is a global contract relied
/// on by `split_batch` consumers everywhere downstream.
pub fn form_batch(rgb: &Tensor, depth3: &Tensor) -> Result<Tensor, OpError> {
    for t in [rgb, depth3] {
        let d = t.dims4("form_batch")?;
        if d.0 != 1 {
            return Err(OpError::AxisMismatch {
                op: "form_batch",
                axis: 0,
                expected: 1,
                got: d.0,
            });
        }
        if d.1 != 3 {
            return Err(OpError::AxisMismatch {
                op: "form_batch",
                axis: 1,
                expected: 3,
                got: d.1,
            });
        }
    }
    for axis in 2..4 {
        if rgb.shape[axis] != depth3.shape[axis] {
            return Err(OpError::AxisMismatch {
                op: "form_batch",
                axis,
                expected: rgb.shape[axis],
                got: depth3.shape[axis],
            });
        }
    }
    let mut data = Vec::with_capacity(rgb.numel() + depth3.numel());
    data.extend_from_slice(&rgb.data);
    data.extend_from_slice(&depth3.data);
    Ok(Tensor::new(
        vec![2, 3, rgb.shape[2], rgb.shape[3]],
        data,
    ))
}

/// CP compression settings: every hierarchy is squeezed to `k` channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpConfig {
    pub k: usize,
    pub kernel: usize,
}

impl Default for CpConfig {
    fn default() -> Self {
        CpConfig { k: 64, kernel: 3 }
    }
}

/// CP1-CP6 plus the shared (1x1, 1) coarse prediction head.
#[derive(Debug, Clone)]
pub struct JlModule {
    pub cfg: CpConfig,
    cp: Vec<ConvLayer>,
    coarse_head: ConvLayer,
}

impl JlModule {
    pub fn init<R: Rng>(
        rng: &mut R,
        cfg: CpConfig,
        hierarchy_channels: [usize; 6],
        classes: usize,
    ) -> Self {
        let cp = hierarchy_channels
            .iter()
            .map(|&c| {
                ConvLayer::init(
                    rng,
                    cfg.k,
                    c,
                    cfg.kernel,
                    ConvSpec::size_preserving(cfg.kernel, 1),
                )
            })
            .collect();
        let coarse_head = ConvLayer::init(rng, classes, cfg.k, 1, ConvSpec::unit());
        JlModule {
            cfg,
            cp,
            coarse_head,
        }
    }

    /// Compress all six hierarchies to `k` channels with shared
    /// (per-hierarchy) conv + ReLU applied to every batch row.
    pub fn cp_compress(
        &self,
        g: &mut Graph,
        binding: &mut ParamBinding,
        feats: &[NodeId; 6],
    ) -> Result<[NodeId; 6], OpError> {
        let mut out = *feats;
        for (h, f) in feats.iter().enumerate() {
            let y = self.cp[h].apply(g, binding, &format!("jl.cp{}", h + 1), *f)?;
            out[h] = g.relu(y);
        }
        Ok(out)
    }

    /// Coarse activation for every batch row: (1x1, classes) conv on the
    /// CP6 output, before any nonlinearity.
    pub fn coarse_logits(
        &self,
        g: &mut Graph,
        binding: &mut ParamBinding,
        cp6: NodeId,
    ) -> Result<NodeId, OpError> {
        self.coarse_head.apply(g, binding, "jl.coarse_head", cp6)
    }

    /// Sigmoid coarse saliency for an RGB-D pair batch: row 0 is the RGB
    /// coarse map, row 1 the depth coarse map.
    pub fn coarse_predict(
        &self,
        g: &mut Graph,
        binding: &mut ParamBinding,
        cp6: NodeId,
    ) -> Result<(NodeId, NodeId), OpError> {
        let dims = g.value(cp6).dims4("coarse_predict")?;
        if dims.0 != 2 {
            return Err(OpError::AxisMismatch {
                op: "coarse_predict",
                axis: 0,
                expected: 2,
                got: dims.0,
            });
        }
        let logits = self.coarse_logits(g, binding, cp6)?;
        let probs = g.sigmoid(logits);
        g.split_batch(probs)
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (h, cp) in self.cp.iter().enumerate() {
            cp.visit(&format!("cp{}", h + 1), &mut |n, t| f(n, t));
        }
        self.coarse_head.visit("coarse_head", &mut |n, t| f(n, t));
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (h, cp) in self.cp.iter_mut().enumerate() {
            cp.visit_mut(&format!("cp{}", h + 1), &mut |n, t| f(n, t));
        }
        self.coarse_head.visit_mut("coarse_head", &mut |n, t| f(n, t));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn depth_normalization_spans_full_range() {
        // metric depth between 0.4 m and 2.4 m
        let d = DepthMap::new(2, 2, vec![0.4, 2.4, 1.4, 0.9]);
        let t = depth_to_3ch(&d).unwrap();
        assert_eq!(t.shape, vec![1, 3, 2, 2]);
        let plane = &t.data[..4];
        let min = plane.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((min, max), (0.0, 255.0));
        assert_eq!(t.data[..4], t.data[4..8]);
        assert_eq!(t.data[..4], t.data[8..12]);
    }

    #[test]
    fn constant_depth_maps_to_zeros() {
        let d = DepthMap::new(3, 1, vec![1.7, 1.7, 1.7]);
        let t = depth_to_3ch(&d).unwrap();
        assert!(t.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_depth_rejected() {
        let d = DepthMap {
            width: 0,
            height: 0,
            data: vec![],
        };
        assert!(matches!(depth_to_3ch(&d), Err(DataError::EmptyDepth)));
    }

    #[test]
    fn depth_correlates_perfectly_with_output_channel() {
        let d = DepthMap::new(4, 1, vec![3.0, 9.0, 5.0, 7.0]);
        let t = depth_to_3ch(&d).unwrap();
        let x = &d.data;
        let y = &t.data[..4];
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        assert!((cov / (vx * vy).sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_is_4d_stack_not_channel_concat() {
        let rgb = Tensor::full(&[1, 3, 8, 8], 0.2);
        let depth = Tensor::full(&[1, 3, 8, 8], 0.7);
        let batch = form_batch(&rgb, &depth).unwrap();
        assert_eq!(batch.shape, vec![2, 3, 8, 8]);
        assert_ne!(batch.shape, vec![1, 6, 8, 8]);
        // row order contract: RGB first
        assert!(batch.data[..rgb.numel()].iter().all(|&v| v == 0.2));
        assert!(batch.data[rgb.numel()..].iter().all(|&v| v == 0.7));
    }

    #[test]
    fn form_then_split_is_identity() {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let rgb = Tensor::new(
            vec![1, 3, 4, 4],
            (0..48).map(|_| r.gen_range(0.0..1.0)).collect(),
        );
        let depth = Tensor::new(
            vec![1, 3, 4, 4],
            (0..48).map(|_| r.gen_range(0.0..1.0)).collect(),
        );
        let batch = form_batch(&rgb, &depth).unwrap();
        let mut g = Graph::new();
        let b = g.leaf(batch);
        let (a, d) = g.split_batch(b).unwrap();
        assert_eq!(g.value(a).data, rgb.data);
        assert_eq!(g.value(d).data, depth.data);
    }

    #[test]
    fn form_batch_size_mismatch() {
        let rgb = Tensor::zeros(&[1, 3, 8, 8]);
        let depth = Tensor::zeros(&[1, 3, 4, 4]);
        assert!(matches!(
            form_batch(&rgb, &depth),
            Err(OpError::AxisMismatch { axis: 2, .. })
        ));
    }

    #[test]
    fn cp_outputs_k_channels_at_input_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let chans = [4usize, 4, 4, 4, 4, 4];
        let jl = JlModule::init(&mut rng, CpConfig { k: 6, kernel: 3 }, chans, 1);
        let mut g = Graph::new();
        let mut binding = ParamBinding::default();
        let sizes = [16usize, 8, 4, 2, 1, 1];
        let feats: [NodeId; 6] = std::array::from_fn(|i| {
            g.leaf(Tensor::full(&[2, 4, sizes[i], sizes[i]], 0.3))
        });
        let cp = jl.cp_compress(&mut g, &mut binding, &feats).unwrap();
        for (i, c) in cp.iter().enumerate() {
            assert_eq!(g.shape(*c), &[2, 6, sizes[i], sizes[i]]);
        }
    }

    #[test]
    fn zero_head_gives_uniform_half_coarse_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut jl = JlModule::init(&mut rng, CpConfig { k: 4, kernel: 3 }, [4; 6], 1);
        jl.coarse_head.weight = Tensor::zeros(&[1, 4, 1, 1]);
        jl.coarse_head.bias = Tensor::zeros(&[1]);
        let mut g = Graph::new();
        let mut binding = ParamBinding::default();
        let cp6 = g.leaf(Tensor::full(&[2, 4, 2, 2], 0.4));
        let (rgb, d) = jl.coarse_predict(&mut g, &mut binding, cp6).unwrap();
        assert!(g.value(rgb).data.iter().all(|&v| v == 0.5));
        assert!(g.value(d).data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn swapping_rows_swaps_coarse_maps() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let jl = JlModule::init(&mut rng, CpConfig { k: 4, kernel: 3 }, [4; 6], 1);
        let row_a: Vec<f64> = (0..4 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let row_b: Vec<f64> = (0..4 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |first: &[f64], second: &[f64]| {
            let mut d = first.to_vec();
            d.extend_from_slice(second);
            let mut g = Graph::new();
            let mut binding = ParamBinding::default();
            let cp6 = g.leaf(Tensor::new(vec![2, 4, 3, 3], d));
            let (r, dd) = jl.coarse_predict(&mut g, &mut binding, cp6).unwrap();
            (g.value(r).data.clone(), g.value(dd).data.clone())
        };
        let (r1, d1) = run(&row_a, &row_b);
        let (r2, d2) = run(&row_b, &row_a);
        assert_eq!(r1, d2);
        assert_eq!(d1, r2);
    }

    #[test]
    fn coarse_predict_requires_pair_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let jl = JlModule::init(&mut rng, CpConfig { k: 4, kernel: 3 }, [4; 6], 1);
        let mut g = Graph::new();
        let mut binding = ParamBinding::default();
        let cp6 = g.leaf(Tensor::zeros(&[3, 4, 2, 2]));
        assert!(jl.coarse_predict(&mut g, &mut binding, cp6).is_err());
    }
}
