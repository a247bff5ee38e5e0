//! Six-hierarchy VGG-style encoder with per-hierarchy side paths.
//!
//! The trunk runs five convolution stages separated by 2x2/stride-2 max
//! pools; the pool after stage 5 has stride 1 (3x3, pad 1) so the sixth
//! hierarchy keeps the stage-5 spatial size while its side path uses
//! dilated convolutions to grow the receptive field. Spatial sizes per
//! hierarchy are [H, H/2, H/4, H/8, H/16, H/16].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, OpError};
use crate::graph::{Graph, NodeId};
use crate::kernels::{ConvSpec, PoolSpec};
use crate::layers::{ConvLayer, ParamBinding};

/// One of the two extra convolutions inserted into a side path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideConv {
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl SideConv {
    fn new(kernel: usize, channels: usize, dilation: usize) -> Self {
        SideConv {
            kernel,
            channels,
            stride: 1,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    fn spec(&self) -> ConvSpec {
        ConvSpec {
            stride: self.stride,
            dilation: self.dilation,
            padding: self.padding,
        }
    }
}

/// The two extra convolutions per hierarchy, six rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidePathConfig {
    pub rows: [[SideConv; 2]; 6],
}

impl SidePathConfig {
    /// Full-width side paths: (3,128,1,1,1) x2 on paths 1-2,
    /// (5,256,1,1,2) x2 on paths 3-4, (5,512,1,1,2) x2 on path 5 and
    /// (7,512,1,2,6) x2 on path 6.
    pub fn full() -> Self {
        Self::scaled(1)
    }

    /// Same kernel/dilation pattern with every channel count divided by
    /// `divisor` (desk scale uses 8, e.g. 128 -> 16).
    pub fn scaled(divisor: usize) -> Self {
        let c = |n: usize| (n / divisor).max(1);
        SidePathConfig {
            rows: [
                [SideConv::new(3, c(128), 1); 2],
                [SideConv::new(3, c(128), 1); 2],
                [SideConv::new(5, c(256), 1); 2],
                [SideConv::new(5, c(256), 1); 2],
                [SideConv::new(5, c(512), 1); 2],
                [SideConv::new(7, c(512), 2); 2],
            ],
        }
    }

    /// Uniform tiny width for gradient-check networks, keeping the
    /// kernel/dilation pattern of the full configuration.
    pub fn uniform(width: usize, stage6_dilation: usize) -> Self {
        SidePathConfig {
            rows: [
                [SideConv::new(3, width, 1); 2],
                [SideConv::new(3, width, 1); 2],
                [SideConv::new(5, width, 1); 2],
                [SideConv::new(5, width, 1); 2],
                [SideConv::new(5, width, 1); 2],
                [SideConv::new(7, width, stage6_dilation); 2],
            ],
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (i, row) in self.rows.iter().enumerate() {
            for conv in row {
                if conv.stride != 1 || conv.padding != conv.dilation * (conv.kernel - 1) / 2 {
                    return Err(ConfigError::Invalid(format!(
                        "side path {} must preserve spatial size (stride 1, padding = dilation*(kernel-1)/2), got {:?}",
                        i + 1,
                        conv
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Input side length H0; must be a positive multiple of 16.
    pub input_size: usize,
    /// Trunk conv widths per stage; entry 6 is the pool-5 carry-over and
    /// must equal entry 5.
    pub stage_channels: [usize; 6],
    /// Number of 3x3 trunk convs in stages 1-5 (stage 6 is pool-only).
    pub convs_per_stage: [usize; 5],
    /// Whether the input to each stage is spatially halved. The default
    /// schedule pools before stages 2-5 and enters stages 1 and 6 at the
    /// previous size.
    pub downsample: [bool; 6],
    /// Dilation rate of the stage-6 side path convolutions.
    pub stage6_dilation: usize,
    pub side: SidePathConfig,
}

impl BackboneConfig {
    pub fn paper() -> Self {
        BackboneConfig {
            input_size: 320,
            stage_channels: [64, 128, 256, 512, 512, 512],
            convs_per_stage: [2, 2, 3, 3, 3],
            downsample: [false, true, true, true, true, false],
            stage6_dilation: 2,
            side: SidePathConfig::full(),
        }
    }

    /// Desk scale: every channel count divided by 8, H0 = 64.
    pub fn desk() -> Self {
        BackboneConfig {
            input_size: 64,
            stage_channels: [8, 16, 32, 64, 64, 64],
            convs_per_stage: [2, 2, 3, 3, 3],
            downsample: [false, true, true, true, true, false],
            stage6_dilation: 2,
            side: SidePathConfig::scaled(8),
        }
    }

    /// Uniform-width toy encoder with one conv per stage, for gradient
    /// checking and structural tests.
    pub fn toy(input_size: usize, width: usize) -> Self {
        BackboneConfig {
            input_size,
            stage_channels: [width; 6],
            convs_per_stage: [1; 5],
            downsample: [false, true, true, true, true, false],
            stage6_dilation: 2,
            side: SidePathConfig::uniform(width, 2),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(ConfigError::BadInputSize(self.input_size));
        }
        if self.stage_channels[5] != self.stage_channels[4] {
            return Err(ConfigError::Invalid(format!(
                "stage 6 carries the pool-5 channel count; expected {}, got {}",
                self.stage_channels[4], self.stage_channels[5]
            )));
        }
        if self.convs_per_stage.iter().any(|&c| c == 0) {
            return Err(ConfigError::Invalid(
                "every trunk stage needs at least one conv".into(),
            ));
        }
        if self.stage6_dilation < 1 {
            return Err(ConfigError::Invalid("stage 6 dilation must be >= 1".into()));
        }
        self.side.validate()
    }

    /// Spatial size of each hierarchy output under the default schedule.
    pub fn hierarchy_sizes(&self) -> [usize; 6] {
        let mut sizes = [0usize; 6];
        let mut s = self.input_size;
        for (i, size) in sizes.iter_mut().enumerate() {
            if self.downsample[i] {
                s /= 2;
            }
            *size = s;
        }
        sizes
    }

    /// Channel count of each hierarchy output (after its side path).
    pub fn hierarchy_channels(&self) -> [usize; 6] {
        let mut out = [0usize; 6];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.side.rows[i][1].channels;
        }
        out
    }
}

/// The parameterized encoder.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    trunk: Vec<Vec<ConvLayer>>,
    side: Vec<Vec<ConvLayer>>,
}

const STAGE_POOL: PoolSpec = PoolSpec {
    kernel: 2,
    stride: 2,
    padding: 0,
};
// pool5 keeps stride 1 (3x3, pad 1) so hierarchy 6 stays at H/16.
const POOL5: PoolSpec = PoolSpec {
    kernel: 3,
    stride: 1,
    padding: 1,
};

pub fn build_backbone<R: Rng>(cfg: &BackboneConfig, rng: &mut R) -> Result<Backbone, ConfigError> {
    cfg.validate()?;
    let mut trunk = Vec::with_capacity(5);
    let mut in_ch = 3usize;
    for stage in 0..5 {
        let mut convs = Vec::new();
        for _ in 0..cfg.convs_per_stage[stage] {
            convs.push(ConvLayer::init(
                rng,
                cfg.stage_channels[stage],
                in_ch,
                3,
                ConvSpec::size_preserving(3, 1),
            ));
            in_ch = cfg.stage_channels[stage];
        }
        trunk.push(convs);
    }
    let mut side = Vec::with_capacity(6);
    for (h, row) in cfg.side.rows.iter().enumerate() {
        let trunk_ch = cfg.stage_channels[h.min(4)];
        let mut convs = Vec::new();
        let mut c_in = trunk_ch;
        for conv in row {
            convs.push(ConvLayer::init(rng, conv.channels, c_in, conv.kernel, conv.spec()));
            c_in = conv.channels;
        }
        side.push(convs);
    }
    Ok(Backbone {
        cfg: cfg.clone(),
        trunk,
        side,
    })
}

impl Backbone {
    /// Run a 2N x 3 x H0 x H0 batch through the shared trunk and side
    /// paths, returning one feature node per hierarchy.
    pub fn forward_hierarchies(
        &self,
        g: &mut Graph,
        binding: &mut ParamBinding,
        prefix: &str,
        batch: NodeId,
    ) -> Result<[NodeId; 6], OpError> {
        let dims = g.value(batch).dims4("forward_hierarchies")?;
        if dims.1 != 3 {
            return Err(OpError::AxisMismatch {
                op: "forward_hierarchies",
                axis: 1,
                expected: 3,
                got: dims.1,
            });
        }
        let mut feats = [batch; 6];
        let mut x = batch;
        for stage in 0..5 {
            if self.cfg.downsample[stage] {
                x = g.maxpool2d(x, STAGE_POOL)?;
            }
            for (ci, conv) in self.trunk[stage].iter().enumerate() {
                x = conv.apply(g, binding, &format!("{prefix}.stage{}.conv{ci}", stage + 1), x)?;
                x = g.relu(x);
            }
            feats[stage] = x;
        }
        feats[5] = g.maxpool2d(x, POOL5)?;
        let mut out = [batch; 6];
        for h in 0..6 {
            let mut y = feats[h];
            for (ci, conv) in self.side[h].iter().enumerate() {
                y = conv.apply(g, binding, &format!("{prefix}.side{}.conv{ci}", h + 1), y)?;
                // ReLU sits between the two side convs, not after the pair.
                if ci + 1 < self.side[h].len() {
                    y = g.relu(y);
                }
            }
            out[h] = y;
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a crate::tensor::Tensor)) {
        for (stage, convs) in self.trunk.iter().enumerate() {
            for (ci, conv) in convs.iter().enumerate() {
                conv.visit(&format!("stage{}.conv{ci}", stage + 1), &mut |n, t| f(n, t));
            }
        }
        for (h, convs) in self.side.iter().enumerate() {
            for (ci, conv) in convs.iter().enumerate() {
                conv.visit(&format!("side{}.conv{ci}", h + 1), &mut |n, t| f(n, t));
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut crate::tensor::Tensor)) {
        for (stage, convs) in self.trunk.iter_mut().enumerate() {
            for (ci, conv) in convs.iter_mut().enumerate() {
                conv.visit_mut(&format!("stage{}.conv{ci}", stage + 1), &mut |n, t| f(n, t));
            }
        }
        for (h, convs) in self.side.iter_mut().enumerate() {
            for (ci, conv) in convs.iter_mut().enumerate() {
                conv.visit_mut(&format!("side{}.conv{ci}", h + 1), &mut |n, t| f(n, t));
            }
        }
    }

    /// Receptive field of one output pixel of hierarchy `h` (0-based),
    /// computed over the layer chain: r += (k_eff - 1) * jump; jump *= stride.
    pub fn receptive_field(&self, h: usize) -> usize {
        let mut r = 1usize;
        let mut jump = 1usize;
        let absorb = |kernel: usize, dilation: usize, stride: usize, r: &mut usize, jump: &mut usize| {
            let k_eff = dilation * (kernel - 1) + 1;
            *r += (k_eff - 1) * *jump;
            *jump *= stride;
        };
        let last_trunk_stage = h.min(4);
        for stage in 0..=last_trunk_stage {
            if self.cfg.downsample[stage] {
                absorb(STAGE_POOL.kernel, 1, STAGE_POOL.stride, &mut r, &mut jump);
            }
            for _ in &self.trunk[stage] {
                absorb(3, 1, 1, &mut r, &mut jump);
            }
        }
        if h == 5 {
            absorb(POOL5.kernel, 1, POOL5.stride, &mut r, &mut jump);
        }
        for conv in &self.cfg.side.rows[h] {
            absorb(conv.kernel, conv.dilation, conv.stride, &mut r, &mut jump);
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn paper_scale_sizes() {
        let cfg = BackboneConfig::paper();
        assert_eq!(cfg.hierarchy_sizes(), [320, 160, 80, 40, 20, 20]);
    }

    #[test]
    fn desk_scale_sizes() {
        let cfg = BackboneConfig::desk();
        assert_eq!(cfg.hierarchy_sizes(), [64, 32, 16, 8, 4, 4]);
    }

    #[test]
    fn rejects_bad_input_size() {
        let mut cfg = BackboneConfig::toy(48, 4);
        cfg.input_size = 40;
        assert!(matches!(
            cfg.validate(),
            Err(ConfigError::BadInputSize(40))
        ));
    }

    #[test]
    fn forward_shapes_follow_schedule() {
        let cfg = BackboneConfig::toy(32, 4);
        let bb = build_backbone(&cfg, &mut rng(3)).unwrap();
        let mut g = Graph::new();
        let mut binding = ParamBinding::default();
        let x = g.leaf(Tensor::full(&[2, 3, 32, 32], 0.1));
        let feats = bb
            .forward_hierarchies(&mut g, &mut binding, "backbone", x)
            .unwrap();
        let sizes = cfg.hierarchy_sizes();
        let chans = cfg.hierarchy_channels();
        for (h, f) in feats.iter().enumerate() {
            assert_eq!(g.shape(*f), &[2, chans[h], sizes[h], sizes[h]], "hierarchy {h}");
        }
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let cfg = BackboneConfig::toy(32, 4);
        let bb = build_backbone(&cfg, &mut rng(3)).unwrap();
        let mut g = Graph::new();
        let mut binding = ParamBinding::default();
        let x = g.leaf(Tensor::zeros(&[2, 4, 32, 32]));
        assert!(matches!(
            bb.forward_hierarchies(&mut g, &mut binding, "backbone", x),
            Err(OpError::AxisMismatch { axis: 1, .. })
        ));
    }

    #[test]
    fn duplicated_row_gives_identical_outputs() {
        let cfg = BackboneConfig::toy(16, 4);
        let bb = build_backbone(&cfg, &mut rng(5)).unwrap();
        let mut g = Graph::new();
        let mut binding = ParamBinding::default();
        use rand::Rng;
        let mut r = rng(17);
        let row: Vec<f64> = (0..3 * 16 * 16).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut both = row.clone();
        both.extend_from_slice(&row);
        let x = g.leaf(Tensor::new(vec![2, 3, 16, 16], both));
        let feats = bb
            .forward_hierarchies(&mut g, &mut binding, "backbone", x)
            .unwrap();
        for f in feats {
            let v = &g.value(f).data;
            let half = v.len() / 2;
            assert_eq!(v[..half], v[half..], "rows diverged under shared weights");
        }
    }

    #[test]
    fn row_permutation_equivariance() {
        let cfg = BackboneConfig::toy(16, 4);
        let bb = build_backbone(&cfg, &mut rng(5)).unwrap();
        use rand::Rng;
        let mut r = rng(23);
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..3 * 16 * 16).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let perm = [2usize, 0, 1];
        let make_batch = |order: &[usize]| {
            let mut d = Vec::new();
            for &i in order {
                d.extend_from_slice(&rows[i]);
            }
            Tensor::new(vec![3, 3, 16, 16], d)
        };
        let run = |t: Tensor| {
            let mut g = Graph::new();
            let mut binding = ParamBinding::default();
            let x = g.leaf(t);
            let feats = bb
                .forward_hierarchies(&mut g, &mut binding, "backbone", x)
                .unwrap();
            feats.map(|f| g.value(f).clone())
        };
        let base = run(make_batch(&[0, 1, 2]));
        let perm_out = run(make_batch(&perm));
        for (h, (b, p)) in base.iter().zip(perm_out.iter()).enumerate() {
            let row = b.numel() / 3;
            for (dst, &src) in perm.iter().enumerate() {
                assert_eq!(
                    p.data[dst * row..(dst + 1) * row],
                    b.data[src * row..(src + 1) * row],
                    "hierarchy {h}: permuted batch rows must permute outputs identically"
                );
            }
        }
    }

    #[test]
    fn stage6_receptive_field_exceeds_stage5() {
        let bb = build_backbone(&BackboneConfig::desk(), &mut rng(1)).unwrap();
        let rf5 = bb.receptive_field(4);
        let rf6 = bb.receptive_field(5);
        assert!(
            rf6 > rf5,
            "dilated stage-6 side path should widen the receptive field: {rf6} vs {rf5}"
        );
        let sizes = bb.cfg.hierarchy_sizes();
        assert_eq!(sizes[4], sizes[5]);
    }
}
