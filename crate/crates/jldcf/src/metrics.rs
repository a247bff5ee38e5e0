//! The five saliency evaluation measures: PR curves over the 8-bit
//! threshold grid, maximum F-measure, S-measure, maximum E-measure and
//! MAE, with per-image and dataset-level aggregation.
//!
//! PR / F / E sweep all 256 thresholds of the 8-bit quantized map; MAE
//! and the S-measure operate on the real-valued map. The S-measure and
//! the E-measure alignment matrix follow the reference formulations of
//! the structure measure and the enhanced alignment measure.

use serde::{Deserialize, Serialize};

use crate::error::MetricError;
use crate::tensor::Tensor;

pub const NUM_THRESHOLDS: usize = 256;
const EPS: f64 = f64::EPSILON;

/// Single-channel real map in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(width * height, data.len());
        SaliencyMap {
            width,
            height,
            data,
        }
    }

    /// Extract from a 1x1xHxW tensor (e.g. a prediction head output).
    pub fn from_tensor(t: &Tensor) -> Self {
        let d = t.dims4("saliency_map").expect("saliency tensor is 4-d");
        assert_eq!(d.0, 1);
        assert_eq!(d.1, 1);
        SaliencyMap {
            width: d.3,
            height: d.2,
            data: t.data.clone(),
        }
    }

    /// 8-bit quantization used by the thresholded measures.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Strictly binary ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl GroundTruth {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(width * height, data.len());
        GroundTruth {
            width,
            height,
            data,
        }
    }

    /// Decode a stored 8-bit mask by thresholding at 0.5 (>= 128).
    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Self {
        GroundTruth::new(width, height, bytes.iter().map(|&b| b >= 128).collect())
    }

    pub fn fg_count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// A saliency map paired with its ground truth, shape-checked.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub s: SaliencyMap,
    pub g: GroundTruth,
}

impl EvalPair {
    pub fn new(s: SaliencyMap, g: GroundTruth) -> Result<Self, MetricError> {
        if s.width != g.width || s.height != g.height {
            return Err(MetricError::ShapeMismatch {
                s_w: s.width,
                s_h: s.height,
                g_w: g.width,
                g_h: g.height,
            });
        }
        if s.data.is_empty() {
            return Err(MetricError::EmptyMap);
        }
        Ok(EvalPair { s, g })
    }

    fn pixels(&self) -> usize {
        self.s.data.len()
    }
}

/// Foreground/background counts of the binarized map at every threshold.
/// `tp[t]` and `fp[t]` are |M(t) and G| and |M(t) minus G| for M(t) =
/// {pixels with 8-bit saliency >= t}.
fn threshold_counts(pair: &EvalPair) -> ([usize; NUM_THRESHOLDS], [usize; NUM_THRESHOLDS]) {
    let s8 = pair.s.to_u8();
    let mut hist_fg = [0usize; NUM_THRESHOLDS];
    let mut hist_bg = [0usize; NUM_THRESHOLDS];
    for (v, &g) in s8.iter().zip(pair.g.data.iter()) {
        if g {
            hist_fg[*v as usize] += 1;
        } else {
            hist_bg[*v as usize] += 1;
        }
    }
    let mut tp = [0usize; NUM_THRESHOLDS];
    let mut fp = [0usize; NUM_THRESHOLDS];
    let mut acc_fg = 0usize;
    let mut acc_bg = 0usize;
    for t in (0..NUM_THRESHOLDS).rev() {
        acc_fg += hist_fg[t];
        acc_bg += hist_bg[t];
        tp[t] = acc_fg;
        fp[t] = acc_bg;
    }
    (tp, fp)
}

/// Precision/recall over the 256-threshold grid. Empty masks score
/// precision 1 by convention so the curve is defined everywhere;
/// all-background ground truths are rejected.
pub fn pr_curve(pair: &EvalPair) -> Result<(Vec<f64>, Vec<f64>), MetricError> {
    let gt_fg = pair.g.fg_count();
    if gt_fg == 0 {
        return Err(MetricError::EmptyGroundTruth);
    }
    let (tp, fp) = threshold_counts(pair);
    let mut precision = vec![0.0; NUM_THRESHOLDS];
    let mut recall = vec![0.0; NUM_THRESHOLDS];
    for t in 0..NUM_THRESHOLDS {
        let mask = tp[t] + fp[t];
        precision[t] = if mask == 0 {
            1.0
        } else {
            tp[t] as f64 / mask as f64
        };
        recall[t] = tp[t] as f64 / gt_fg as f64;
    }
    Ok((precision, recall))
}

/// Maximum F-measure over the PR curve with beta^2 = 0.3; 0/0 counts as 0.
pub fn f_measure_max(precision: &[f64], recall: &[f64]) -> f64 {
    const BETA2: f64 = 0.3;
    precision
        .iter()
        .zip(recall.iter())
        .map(|(&p, &r)| {
            let denom = BETA2 * p + r;
            if denom == 0.0 {
                0.0
            } else {
                (1.0 + BETA2) * p * r / denom
            }
        })
        .fold(0.0, f64::max)
}

// ---- S-measure -------------------------------------------------------

fn mean_of(vals: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        vals.sum::<f64>() / n as f64
    }
}

/// Object-level similarity of one region: 2 x_mean / (x_mean^2 + 1 + sigma_x).
fn object_score(pred: &[f64], mask: &[bool]) -> f64 {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return 0.0;
    }
    let x = mean_of(
        pred.iter().zip(mask.iter()).filter(|(_, &m)| m).map(|(&v, _)| v),
        n,
    );
    let var = pred
        .iter()
        .zip(mask.iter())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| (v - x) * (v - x))
        .sum::<f64>();
    let sigma = if n > 1 { (var / (n - 1) as f64).sqrt() } else { 0.0 };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn s_object(pair: &EvalPair) -> f64 {
    let fg_pred: Vec<f64> = pair
        .s
        .data
        .iter()
        .zip(pair.g.data.iter())
        .map(|(&v, &g)| if g { v } else { 0.0 })
        .collect();
    let o_fg = object_score(&fg_pred, &pair.g.data);
    let inv_mask: Vec<bool> = pair.g.data.iter().map(|&g| !g).collect();
    let bg_pred: Vec<f64> = pair
        .s
        .data
        .iter()
        .zip(pair.g.data.iter())
        .map(|(&v, &g)| if g { 0.0 } else { 1.0 - v })
        .collect();
    let o_bg = object_score(&bg_pred, &inv_mask);
    let u = pair.g.fg_count() as f64 / pair.pixels() as f64;
    u * o_fg + (1.0 - u) * o_bg
}

/// Ground-truth centroid in 1-based coordinates, rounded half away from
/// zero; the image center for an empty mask.
fn centroid(g: &GroundTruth) -> (usize, usize) {
    let total = g.fg_count();
    if total == 0 {
        return (
            (g.width as f64 / 2.0).round() as usize,
            (g.height as f64 / 2.0).round() as usize,
        );
    }
    let mut sx = 0usize;
    let mut sy = 0usize;
    for y in 0..g.height {
        for x in 0..g.width {
            if g.data[y * g.width + x] {
                sx += x + 1;
                sy += y + 1;
            }
        }
    }
    let cx = (sx as f64 / total as f64).round() as usize;
    let cy = (sy as f64 / total as f64).round() as usize;
    (cx, cy)
}

struct Block {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

impl Block {
    fn len(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// SSIM-style similarity of one block of the prediction against the
/// binary ground truth, per the structure-measure region term.
fn block_ssim(pair: &EvalPair, b: &Block) -> f64 {
    let n = b.len();
    if n == 0 {
        return 0.0; // weight is zero for an empty block
    }
    let w = pair.s.width;
    let mut sum_x = 0.0;
    let mut sum_y = 0.0;
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            sum_x += pair.s.data[y * w + x];
            sum_y += if pair.g.data[y * w + x] { 1.0 } else { 0.0 };
        }
    }
    let mx = sum_x / n as f64;
    let my = sum_y / n as f64;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    let mut cov = 0.0;
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            let dx = pair.s.data[y * w + x] - mx;
            let dy = (if pair.g.data[y * w + x] { 1.0 } else { 0.0 }) - my;
            var_x += dx * dx;
            var_y += dy * dy;
            cov += dx * dy;
        }
    }
    let denom_n = n as f64 - 1.0 + EPS;
    let (sx2, sy2, sxy) = (var_x / denom_n, var_y / denom_n, cov / denom_n);
    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (sx2 + sy2);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(pair: &EvalPair) -> f64 {
    let (w, h) = (pair.s.width, pair.s.height);
    let (cx, cy) = centroid(&pair.g);
    let area = (w * h) as f64;
    let blocks = [
        Block { x0: 0, x1: cx, y0: 0, y1: cy },
        Block { x0: cx, x1: w, y0: 0, y1: cy },
        Block { x0: 0, x1: cx, y0: cy, y1: h },
        Block { x0: cx, x1: w, y0: cy, y1: h },
    ];
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((w - cx) * cy) as f64 / area;
    let w3 = (cx * (h - cy)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let weights = [w1, w2, w3, w4];
    blocks
        .iter()
        .zip(weights.iter())
        .map(|(b, &wt)| wt * block_ssim(pair, b))
        .sum()
}

/// Structure measure S_alpha = alpha*S_o + (1-alpha)*S_r with alpha = 0.5.
/// Degenerate ground truths fall back to the reference boundary cases:
/// 1 - mean(S) for an all-background mask, mean(S) for an all-foreground one.
pub fn s_measure(pair: &EvalPair) -> f64 {
    const ALPHA: f64 = 0.5;
    let y = pair.g.fg_count() as f64 / pair.pixels() as f64;
    if y == 0.0 {
        1.0 - pair.s.mean()
    } else if y == 1.0 {
        pair.s.mean()
    } else {
        (ALPHA * s_object(pair) + (1.0 - ALPHA) * s_region(pair)).max(0.0)
    }
}

// ---- E-measure -------------------------------------------------------

/// Enhanced-alignment value of one pixel class: phi = ((align + 1)^2) / 4
/// with align = 2 a_g a_f / (a_g^2 + a_f^2 + eps) on the bias-aligned maps.
#[inline]
fn enhanced_cell(a_g: f64, a_f: f64) -> f64 {
    let align = 2.0 * a_g * a_f / (a_g * a_g + a_f * a_f + EPS);
    (align + 1.0) * (align + 1.0) / 4.0
}

/// E-measure of one already-binarized foreground map, from its confusion
/// counts against the ground truth. Averaging is 1/(W*H) over the map.
fn e_measure_from_counts(
    tp: usize,
    fp: usize,
    gt_fg: usize,
    pixels: usize,
) -> f64 {
    let n = pixels as f64;
    let fg_mask = tp + fp;
    if gt_fg == 0 {
        // all-background ground truth: only the off pixels count
        return (pixels - fg_mask) as f64 / n;
    }
    if gt_fg == pixels {
        // all-foreground ground truth: only the on pixels count
        return fg_mask as f64 / n;
    }
    let mu_g = gt_fg as f64 / n;
    let mu_f = fg_mask as f64 / n;
    let fn_ = gt_fg - tp;
    let tn = pixels - tp - fp - fn_;
    let e11 = enhanced_cell(1.0 - mu_g, 1.0 - mu_f);
    let e10 = enhanced_cell(1.0 - mu_g, -mu_f);
    let e01 = enhanced_cell(-mu_g, 1.0 - mu_f);
    let e00 = enhanced_cell(-mu_g, -mu_f);
    (tp as f64 * e11 + fn_ as f64 * e10 + fp as f64 * e01 + tn as f64 * e00) / n
}

/// Per-threshold E-measure over the 256-threshold binarization sweep.
pub fn e_measure_curve(pair: &EvalPair) -> Vec<f64> {
    let (tp, fp) = threshold_counts(pair);
    let gt_fg = pair.g.fg_count();
    let pixels = pair.pixels();
    (0..NUM_THRESHOLDS)
        .map(|t| e_measure_from_counts(tp[t], fp[t], gt_fg, pixels))
        .collect()
}

/// Maximum E-measure over all 256 binarization thresholds.
pub fn e_measure_max(pair: &EvalPair) -> f64 {
    e_measure_curve(pair).into_iter().fold(0.0, f64::max)
}

/// Mean absolute error between the real-valued map and the binary mask.
pub fn mae(pair: &EvalPair) -> f64 {
    let total: f64 = pair
        .s
        .data
        .iter()
        .zip(pair.g.data.iter())
        .map(|(&s, &g)| (s - if g { 1.0 } else { 0.0 }).abs())
        .sum();
    total / pair.pixels() as f64
}

// ---- aggregation -----------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerImageMetrics {
    pub name: String,
    pub s_measure: f64,
    pub f_measure_max: f64,
    pub e_measure_max: f64,
    pub mae: f64,
}

/// Per-image values, dataset means, and the dataset-mean PR curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: usize,
    /// Mean S_alpha over images.
    pub s_measure: f64,
    /// Maximum F over the dataset-mean precision/recall curves.
    pub f_measure_max: f64,
    /// Mean over images of the per-image maximum E.
    pub e_measure_max: f64,
    /// Mean MAE over images.
    pub mae: f64,
    /// Dataset-mean precision/recall per threshold (length 256).
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub per_image: Vec<PerImageMetrics>,
}

/// Evaluate one image.
pub fn evaluate_pair(name: &str, pair: &EvalPair) -> Result<(PerImageMetrics, Vec<f64>, Vec<f64>), MetricError> {
    let (precision, recall) = pr_curve(pair)?;
    let metrics = PerImageMetrics {
        name: name.to_string(),
        s_measure: s_measure(pair),
        f_measure_max: f_measure_max(&precision, &recall),
        e_measure_max: e_measure_max(pair),
        mae: mae(pair),
    };
    Ok((metrics, precision, recall))
}

/// Aggregate a dataset: S/E/MAE are averaged per image; the dataset
/// F_max comes from the per-threshold mean precision/recall curves.
pub fn aggregate(items: &[(String, EvalPair)]) -> Result<MetricReport, MetricError> {
    if items.is_empty() {
        return Err(MetricError::EmptyDataset);
    }
    let mut per_image = Vec::with_capacity(items.len());
    let mut mean_p = vec![0.0; NUM_THRESHOLDS];
    let mut mean_r = vec![0.0; NUM_THRESHOLDS];
    let mut sum_s = 0.0;
    let mut sum_e = 0.0;
    let mut sum_mae = 0.0;
    for (name, pair) in items {
        let (m, p, r) = evaluate_pair(name, pair)?;
        for t in 0..NUM_THRESHOLDS {
            mean_p[t] += p[t];
            mean_r[t] += r[t];
        }
        sum_s += m.s_measure;
        sum_e += m.e_measure_max;
        sum_mae += m.mae;
        per_image.push(m);
    }
    let n = items.len() as f64;
    for t in 0..NUM_THRESHOLDS {
        mean_p[t] /= n;
        mean_r[t] /= n;
    }
    Ok(MetricReport {
        images: items.len(),
        s_measure: sum_s / n,
        f_measure_max: f_measure_max(&mean_p, &mean_r),
        e_measure_max: sum_e / n,
        mae: sum_mae / n,
        precision: mean_p,
        recall: mean_r,
        per_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair_from(s: Vec<f64>, g: Vec<bool>, w: usize, h: usize) -> EvalPair {
        EvalPair::new(SaliencyMap::new(w, h, s), GroundTruth::new(w, h, g)).unwrap()
    }

    fn random_pair(rng: &mut ChaCha8Rng, w: usize, h: usize) -> EvalPair {
        loop {
            let s: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let g: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.4)).collect();
            let fg = g.iter().filter(|&&b| b).count();
            if fg > 0 && fg < w * h {
                return pair_from(s, g, w, h);
            }
        }
    }

    #[test]
    fn perfect_map_identities() {
        let g: Vec<bool> = (0..64).map(|i| (i / 8 + i) % 3 == 0).collect();
        let s: Vec<f64> = g.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let pair = pair_from(s, g, 8, 8);
        let (p, r) = pr_curve(&pair).unwrap();
        assert_eq!(f_measure_max(&p, &r), 1.0);
        assert!((s_measure(&pair) - 1.0).abs() < 1e-9);
        assert!((e_measure_max(&pair) - 1.0).abs() < 1e-9);
        assert_eq!(mae(&pair), 0.0);
        // precision == recall == 1 at every threshold in (0, 255]
        for t in 1..=255 {
            assert_eq!(p[t], 1.0, "t={t}");
            assert_eq!(r[t], 1.0, "t={t}");
        }
    }

    #[test]
    fn two_by_two_hand_case() {
        // S = [[1,0],[0,1]] (255/0), G = [[1,1],[0,0]]
        let pair = pair_from(
            vec![1.0, 0.0, 0.0, 1.0],
            vec![true, true, false, false],
            2,
            2,
        );
        let (p, r) = pr_curve(&pair).unwrap();
        assert_eq!(p[128], 0.5);
        assert_eq!(r[128], 0.5);
        assert_eq!(mae(&pair), 0.5);
    }

    #[test]
    fn f_measure_hand_value() {
        // P = R = 0.5 -> F = 1.3 * 0.25 / (0.3*0.5 + 0.5) = 0.325 / 0.65 = 0.5
        // (a weighted harmonic mean of equal values is that value)
        let p = vec![0.5; NUM_THRESHOLDS];
        let r = vec![0.5; NUM_THRESHOLDS];
        assert!((f_measure_max(&p, &r) - 0.5).abs() < 1e-15);
        // asymmetric spot check straight from the formula
        let p = vec![0.8; NUM_THRESHOLDS];
        let r = vec![0.4; NUM_THRESHOLDS];
        let expect = 1.3 * 0.8 * 0.4 / (0.3 * 0.8 + 0.4);
        assert!((f_measure_max(&p, &r) - expect).abs() < 1e-15);
    }

    #[test]
    fn f_measure_zero_over_zero_is_zero() {
        let p = vec![0.0; NUM_THRESHOLDS];
        let r = vec![0.0; NUM_THRESHOLDS];
        assert_eq!(f_measure_max(&p, &r), 0.0);
    }

    #[test]
    fn empty_ground_truth_rejected() {
        let pair = pair_from(vec![0.5; 4], vec![false; 4], 2, 2);
        assert!(matches!(pr_curve(&pair), Err(MetricError::EmptyGroundTruth)));
    }

    #[test]
    fn empty_prediction_convention() {
        // saliency all zeros: M(T) empty for T >= 1 -> precision 1, recall 0
        let pair = pair_from(vec![0.0; 16], (0..16).map(|i| i < 4).collect(), 4, 4);
        let (p, r) = pr_curve(&pair).unwrap();
        assert_eq!(p[255], 1.0);
        assert_eq!(r[255], 0.0);
        // T = 0 keeps every pixel
        assert_eq!(p[0], 4.0 / 16.0);
        assert_eq!(r[0], 1.0);
    }

    #[test]
    fn mask_size_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let pair = random_pair(&mut rng, 16, 16);
        let (tp, fp) = super::threshold_counts(&pair);
        for t in 1..NUM_THRESHOLDS {
            assert!(tp[t] + fp[t] <= tp[t - 1] + fp[t - 1]);
        }
    }

    #[test]
    fn inverted_map_scores_below_perfect() {
        let g: Vec<bool> = (0..64).map(|i| i % 5 == 0).collect();
        let s_perfect: Vec<f64> = g.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let s_inverted: Vec<f64> = g.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect();
        let perfect = pair_from(s_perfect, g.clone(), 8, 8);
        let inverted = pair_from(s_inverted, g, 8, 8);
        assert!(s_measure(&inverted) < s_measure(&perfect));
        assert!(s_measure(&inverted) < 0.5);
    }

    #[test]
    fn s_measure_degenerate_masks_use_boundary_rules() {
        let all_bg = EvalPair::new(
            SaliencyMap::new(2, 2, vec![0.25; 4]),
            GroundTruth::new(2, 2, vec![false; 4]),
        )
        .unwrap();
        assert!((s_measure(&all_bg) - 0.75).abs() < 1e-15);
        let all_fg = EvalPair::new(
            SaliencyMap::new(2, 2, vec![0.25; 4]),
            GroundTruth::new(2, 2, vec![true; 4]),
        )
        .unwrap();
        assert!((s_measure(&all_fg) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn e_measure_values_stay_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..10 {
            let pair = random_pair(&mut rng, 8, 8);
            for (t, v) in e_measure_curve(&pair).into_iter().enumerate() {
                assert!((0.0..=1.0).contains(&v), "t={t}: {v}");
            }
        }
    }

    #[test]
    fn constant_half_map_has_mae_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let g: Vec<bool> = (0..36).map(|_| rng.gen_bool(0.5)).collect();
        let pair = pair_from(vec![0.5; 36], g, 6, 6);
        assert!((mae(&pair) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mae_is_symmetric_for_real_valued_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let a: Vec<f64> = (0..25).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let g: Vec<bool> = (0..25).map(|_| rng.gen_bool(0.5)).collect();
        let pair = pair_from(a.clone(), g.clone(), 5, 5);
        // swap roles: treat G as the real map and binarized A as the mask
        let forward = mae(&pair);
        let swapped: f64 = a
            .iter()
            .zip(g.iter())
            .map(|(&s, &gv)| ((if gv { 1.0 } else { 0.0 }) - s).abs())
            .sum::<f64>()
            / 25.0;
        assert_eq!(forward, swapped);
    }

    #[test]
    fn single_image_aggregate_equals_per_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let pair = random_pair(&mut rng, 12, 12);
        let report = aggregate(&[("img".to_string(), pair.clone())]).unwrap();
        let (m, p, r) = evaluate_pair("img", &pair).unwrap();
        assert_eq!(report.s_measure, m.s_measure);
        assert_eq!(report.e_measure_max, m.e_measure_max);
        assert_eq!(report.mae, m.mae);
        assert_eq!(report.f_measure_max, f_measure_max(&p, &r));
        assert_eq!(report.precision, p);
        assert_eq!(report.recall, r);
    }

    #[test]
    fn duplicate_images_aggregate_to_the_same_report() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let pair = random_pair(&mut rng, 12, 12);
        let single = aggregate(&[("a".to_string(), pair.clone())]).unwrap();
        let double = aggregate(&[
            ("a".to_string(), pair.clone()),
            ("b".to_string(), pair.clone()),
        ])
        .unwrap();
        assert!((single.s_measure - double.s_measure).abs() < 1e-15);
        assert!((single.f_measure_max - double.f_measure_max).abs() < 1e-15);
        assert!((single.mae - double.mae).abs() < 1e-15);
    }

    #[test]
    fn image_order_permutation_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let items: Vec<(String, EvalPair)> = (0..7)
            .map(|i| (format!("img{i}"), random_pair(&mut rng, 10, 10)))
            .collect();
        let mut reversed = items.clone();
        reversed.reverse();
        let a = aggregate(&items).unwrap();
        let b = aggregate(&reversed).unwrap();
        assert!((a.s_measure - b.s_measure).abs() <= 1e-12);
        assert!((a.f_measure_max - b.f_measure_max).abs() <= 1e-12);
        assert!((a.e_measure_max - b.e_measure_max).abs() <= 1e-12);
        assert!((a.mae - b.mae).abs() <= 1e-12);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(aggregate(&[]), Err(MetricError::EmptyDataset)));
    }
}
