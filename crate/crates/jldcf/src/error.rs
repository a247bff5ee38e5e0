use std::path::PathBuf;

/// Errors raised by tensor ops and the autodiff graph.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OpError {
    #[error("{op}: axis {axis} mismatch: expected extent {expected}, got {got}")]
    AxisMismatch {
        op: &'static str,
        axis: usize,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected a {expected}-d tensor, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: output extent along spatial axis {axis} would be {got}; must be >= 1")]
    DegenerateOutput {
        op: &'static str,
        axis: usize,
        got: i64,
    },
    #[error("{op}: invalid parameter {what} = {got}")]
    BadParam {
        op: &'static str,
        what: &'static str,
        got: i64,
    },
    #[error("bilinear_upsample: unsupported factor {0}; expected one of 2, 4, 8, 16")]
    BadUpsampleFactor(usize),
    #[error("split_batch: batch extent {0} is odd")]
    OddBatch(usize),
    #[error("backward: loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("sgd_step: parameter `{0}` has no gradient")]
    MissingGradient(String),
}

/// Errors from network construction and configuration validation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("input side length {0} is not a positive multiple of 16")]
    BadInputSize(usize),
    #[error("fa branch widths {widths:?} sum to {sum}, expected {expected}")]
    BadFaWidths {
        widths: [usize; 4],
        sum: usize,
        expected: usize,
    },
    #[error("head class count must be >= 1, got {0}")]
    BadClassCount(usize),
    #[error("{0}")]
    Invalid(String),
}

/// Errors from the metric implementations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("saliency map is {s_w}x{s_h} but ground truth is {g_w}x{g_h}")]
    ShapeMismatch {
        s_w: usize,
        s_h: usize,
        g_w: usize,
        g_h: usize,
    },
    #[error("ground truth mask has no foreground pixels")]
    EmptyGroundTruth,
    #[error("empty evaluation set")]
    EmptyDataset,
    #[error("map is empty")]
    EmptyMap,
}

/// Errors from training.
#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("loss diverged to {loss} at iteration {iteration} (epoch {epoch}); try a smaller learning rate")]
    Diverged {
        iteration: usize,
        epoch: usize,
        loss: f64,
    },
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Errors from dataset ingestion and image decoding.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("directory not found: {0}")]
    MissingDir(PathBuf),
    #[error("no filename stem is present in all of RGB/, depth/ and GT/")]
    EmptyIntersection,
    #[error("depth map is empty")]
    EmptyDepth,
    #[error("failed to decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Errors from the checkpoint container.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad checkpoint magic (not a jldcf checkpoint)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint is truncated or corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint parameter `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint is missing parameter `{0}`")]
    MissingParam(String),
}
