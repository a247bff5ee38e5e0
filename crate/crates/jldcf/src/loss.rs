//! Training losses: pixel-summed cross-entropy, the guidance-weighted
//! total loss over the final and coarse predictions, and its multi-task
//! extension with an extra RGB-only coarse term.

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, OpError};
use crate::graph::{Graph, NodeId};
use crate::kernels::resize_bilinear_plane;
use crate::net::ForwardMaps;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the coarse guidance terms; (H0/h)^2 = 256 equalizes the
    /// pixel-count ratio between the full- and coarse-resolution sums.
    pub guidance_weight: f64,
    /// Clamp for log arguments.
    pub clamp_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            guidance_weight: 256.0,
            clamp_eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.guidance_weight < 0.0 {
            return Err(ConfigError::Invalid(format!(
                "guidance weight must be non-negative, got {}",
                self.guidance_weight
            )));
        }
        if self.clamp_eps <= 0.0 || self.clamp_eps >= 0.01 {
            return Err(ConfigError::Invalid(format!(
                "clamp epsilon must lie in (0, 0.01), got {}",
                self.clamp_eps
            )));
        }
        Ok(())
    }
}

/// Pixel-summed cross-entropy `-sum_i [G_i ln S_i + (1-G_i) ln(1-S_i)]`
/// with S clamped to [eps, 1-eps].
pub fn cross_entropy(
    g: &mut Graph,
    pred: NodeId,
    target: &Tensor,
    cfg: &LossConfig,
) -> Result<NodeId, OpError> {
    g.bce_sum(pred, target, cfg.clamp_eps)
}

/// Pixel-summed multi-class cross-entropy `-sum_i t_i ln p_i` for the
/// head-swap configuration (per-pixel class probabilities vs. a soft
/// one-hot target of identical shape).
pub fn multiclass_cross_entropy(
    g: &mut Graph,
    probs: NodeId,
    target: &Tensor,
    cfg: &LossConfig,
) -> Result<NodeId, OpError> {
    g.mce_sum(probs, target, cfg.clamp_eps)
}

/// Bilinearly downsample a full-resolution 1x1xHxW target to `size`,
/// keeping it soft in [0, 1] rather than re-binarizing.
pub fn downsample_target(gt: &Tensor, size: usize) -> Result<Tensor, OpError> {
    let d = gt.dims4("downsample_target")?;
    let plane = resize_bilinear_plane(&gt.data, (d.3, d.2), (size, size));
    Ok(Tensor::new(vec![1, 1, size, size], plane))
}

/// Per-term values of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub final_loss: f64,
    pub guidance_rgb: f64,
    pub guidance_depth: f64,
    pub guidance_rgb_star: Option<f64>,
    pub total: f64,
}

/// Total loss: CE(S_f, G) + lambda * [CE(S_c_rgb, G_down) + CE(S_c_d, G_down)],
/// with G downsampled to the coarse resolution for the guidance terms.
pub fn total_loss(
    g: &mut Graph,
    maps: &ForwardMaps,
    gt: &Tensor,
    cfg: &LossConfig,
) -> Result<(NodeId, LossParts), OpError> {
    multitask_loss(g, maps, gt, None, cfg)
}

/// Multi-task extension: adds lambda * CE(S_c_rgb*, G_rgb_down) for the
/// pure-RGB task image, which is supervised only at the coarse head.
/// With no RGB task this reduces to `total_loss` exactly.
pub fn multitask_loss(
    g: &mut Graph,
    maps: &ForwardMaps,
    gt_rgbd: &Tensor,
    gt_rgb: Option<&Tensor>,
    cfg: &LossConfig,
) -> Result<(NodeId, LossParts), OpError> {
    let fd = g.value(maps.final_map).dims4("total_loss")?;
    let gd = gt_rgbd.dims4("total_loss")?;
    if fd.2 != gd.2 || fd.3 != gd.3 {
        return Err(OpError::AxisMismatch {
            op: "total_loss",
            axis: 2,
            expected: fd.2,
            got: gd.2,
        });
    }
    let coarse_size = g.value(maps.coarse_rgb).dims4("total_loss")?.2;
    let gt_down = downsample_target(gt_rgbd, coarse_size)?;

    let l_final = cross_entropy(g, maps.final_map, gt_rgbd, cfg)?;
    let l_rgb = cross_entropy(g, maps.coarse_rgb, &gt_down, cfg)?;
    let l_depth = cross_entropy(g, maps.coarse_depth, &gt_down, cfg)?;
    let mut guidance = g.add(l_rgb, l_depth)?;

    let mut star_val = None;
    match (gt_rgb, maps.coarse_rgb_star) {
        (Some(gt_star), Some(star_node)) => {
            let gt_star_down = downsample_target(gt_star, coarse_size)?;
            let l_star = cross_entropy(g, star_node, &gt_star_down, cfg)?;
            star_val = Some(g.value(l_star).item());
            guidance = g.add(guidance, l_star)?;
        }
        (Some(_), None) => {
            return Err(OpError::AxisMismatch {
                op: "multitask_loss",
                axis: 0,
                expected: 3,
                got: 2,
            });
        }
        _ => {}
    }

    let weighted = g.scale(guidance, cfg.guidance_weight);
    let total = g.add(l_final, weighted)?;
    let parts = LossParts {
        final_loss: g.value(l_final).item(),
        guidance_rgb: g.value(l_rgb).item(),
        guidance_depth: g.value(l_depth).item(),
        guidance_rgb_star: star_val,
        total: g.value(total).item(),
    };
    Ok((total, parts))
}
