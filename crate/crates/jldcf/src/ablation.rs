//! Ablation presets: runtime configuration deltas that remove or replace
//! components of the full network, trained and evaluated under identical
//! seed and data for side-by-side comparison.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::SampleTriple;
use crate::dcf::{FusionVariant, Wiring};
use crate::error::TrainError;
use crate::metrics::MetricReport;
use crate::net::{JlDcfNet, ModalityVariant};
use crate::train::{evaluate_net, train, TrainOptions};

/// The ablation catalogue. `A` is the full configuration; the others
/// remove or replace one component at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationPreset {
    /// Full model: CM fusion, dense wiring, FA on, shared backbone.
    A,
    /// Narrower backbone standing in for the weaker-backbone comparison.
    BVggWidth,
    /// CM modules replaced by channel concatenation.
    C,
    /// RGB-only: batch-related ops become identity on the RGB row.
    D,
    /// Depth-only.
    E,
    /// Separate learning: one backbone per modality.
    F,
    /// FA modules removed (decoder linearly sums the skips).
    G,
    /// Dense connections removed (chain edges only).
    H,
    /// Chain edges plus the single FA5 -> FA1 residual skip.
    I,
}

pub const ALL_PRESETS: [AblationPreset; 9] = [
    AblationPreset::A,
    AblationPreset::BVggWidth,
    AblationPreset::C,
    AblationPreset::D,
    AblationPreset::E,
    AblationPreset::F,
    AblationPreset::G,
    AblationPreset::H,
    AblationPreset::I,
];

impl fmt::Display for AblationPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AblationPreset::A => "A",
            AblationPreset::BVggWidth => "B-vgg-width",
            AblationPreset::C => "C",
            AblationPreset::D => "D",
            AblationPreset::E => "E",
            AblationPreset::F => "F",
            AblationPreset::G => "G",
            AblationPreset::H => "H",
            AblationPreset::I => "I",
        };
        f.write_str(s)
    }
}

impl FromStr for AblationPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(AblationPreset::A),
            "B" | "B-VGG-WIDTH" => Ok(AblationPreset::BVggWidth),
            "C" => Ok(AblationPreset::C),
            "D" => Ok(AblationPreset::D),
            "E" => Ok(AblationPreset::E),
            "F" => Ok(AblationPreset::F),
            "G" => Ok(AblationPreset::G),
            "H" => Ok(AblationPreset::H),
            "I" => Ok(AblationPreset::I),
            other => Err(format!(
                "unknown ablation preset `{other}`; expected one of A, B-vgg-width, C, D, E, F, G, H, I"
            )),
        }
    }
}

/// Apply one preset's configuration delta to a base run.
pub fn apply_preset(preset: AblationPreset, base: &RunConfig) -> RunConfig {
    let mut run = base.clone();
    let net = &mut run.network;
    match preset {
        AblationPreset::A => {}
        AblationPreset::BVggWidth => {
            for c in &mut net.backbone.stage_channels {
                *c = (*c / 2).max(2);
            }
            for row in &mut net.backbone.side.rows {
                for conv in row {
                    conv.channels = (conv.channels / 2).max(2);
                }
            }
            net.k = (net.k / 2).max(4);
        }
        AblationPreset::C => net.fusion = FusionVariant::Concat,
        AblationPreset::D => {
            net.fusion = FusionVariant::IdentityRgb;
            net.modality = ModalityVariant::Rgb;
        }
        AblationPreset::E => {
            net.fusion = FusionVariant::IdentityDepth;
            net.modality = ModalityVariant::Depth;
        }
        AblationPreset::F => net.separate_backbones = true,
        AblationPreset::G => net.fa_enabled = false,
        AblationPreset::H => net.wiring = Wiring::Chain,
        AblationPreset::I => net.wiring = Wiring::ChainPlusResidual,
    }
    run
}

#[derive(Debug)]
pub struct AblationResult {
    pub preset: AblationPreset,
    pub report: MetricReport,
    pub param_count: usize,
    pub backbone_param_count: usize,
}

/// Train one preset on `train_data` and evaluate it on `eval_data`,
/// under the base run's seed.
pub fn run_ablation(
    preset: AblationPreset,
    train_data: &[SampleTriple],
    eval_data: &[SampleTriple],
    base: &RunConfig,
    max_iterations: Option<usize>,
) -> Result<AblationResult, TrainError> {
    let run = apply_preset(preset, base);
    let mut net = JlDcfNet::init(&run.network, run.seed)?;
    train(
        &mut net,
        train_data,
        &run,
        &TrainOptions {
            max_iterations,
            rgb_task: None,
        },
    )?;
    let report = evaluate_net(&net, eval_data)?;
    Ok(AblationResult {
        preset,
        report,
        param_count: net.param_count(),
        backbone_param_count: net.backbone_param_count(),
    })
}

/// Comparison table in the ablation-table layout: one column per preset,
/// one row per metric, CSV with a header row.
pub fn comparison_table(results: &[AblationResult]) -> String {
    let mut out = String::from("metric");
    for r in results {
        out.push_str(&format!(",{}", r.preset));
    }
    out.push('\n');
    let rows: [(&str, fn(&MetricReport) -> f64); 4] = [
        ("s_measure", |m| m.s_measure),
        ("f_measure_max", |m| m.f_measure_max),
        ("e_measure_max", |m| m.e_measure_max),
        ("mae", |m| m.mae),
    ];
    for (name, get) in rows {
        out.push_str(name);
        for r in results {
            out.push_str(&format!(",{:.4}", get(&r.report)));
        }
        out.push('\n');
    }
    out.push_str("parameters");
    for r in results {
        out.push_str(&format!(",{}", r.param_count));
    }
    out.push('\n');
    out
}
