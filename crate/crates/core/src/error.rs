use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage an error surfaced from, used to label failures of a full run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Search,
    Train,
    Refine,
    Eval,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Search => "search",
            Stage::Train => "train",
            Stage::Refine => "refine",
            Stage::Eval => "eval",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {layer}: expected {expected:?}, got {actual:?}")]
    Shape {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid array: {0}")]
    InvalidArray(String),

    #[error("label {label} out of range for {classes} classes (sample {sample})")]
    LabelOutOfRange {
        sample: usize,
        label: usize,
        classes: usize,
    },

    #[error("missing gradient for trainable parameter {0}")]
    MissingGradient(u64),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid optimizer setting: {0}")]
    Optimizer(String),

    #[error("layers with kernel {first:?} and {second:?} cannot share a tiling plan")]
    KernelMismatch {
        first: (usize, usize),
        second: (usize, usize),
    },

    #[error("layer {layer} ({layer_grid:?}) does not contain the previous layer grid {previous_grid:?}; the cluster must be split")]
    NotNested {
        layer: u32,
        layer_grid: (usize, usize),
        previous_grid: (usize, usize),
    },

    #[error("empty cluster")]
    EmptyCluster,

    #[error("parameter budget {budget} is below the minimum feasible budget {minimum}")]
    BudgetTooSmall { budget: usize, minimum: usize },

    #[error("coefficient vector has length {actual} but the bank has {expected} templates")]
    CoefficientLength { expected: usize, actual: usize },

    #[error("missing slot {slot} for layer {layer}")]
    MissingSlot { layer: u32, slot: u32 },

    #[error("unknown slot {slot} for layer {layer}")]
    UnknownSlot { layer: u32, slot: u32 },

    #[error("layer {0} is not part of the sharing plan")]
    UnknownLayer(u32),

    #[error("(layer {layer}, slot {slot}) is not registered in the gradient ledger")]
    Unregistered { layer: u32, slot: u32 },

    #[error("layers {0} and {1} share no SuperWeight")]
    NoSharedSlot(u32, u32),

    #[error("layers {layer_a} and {layer_b} do not share a coefficient set for slot {slot}")]
    NotSharingCoefficients { layer_a: u32, layer_b: u32, slot: u32 },

    #[error("invalid grouping mode: {0}")]
    InvalidMode(String),

    #[error("invalid grouping: {0}")]
    InvalidGrouping(String),

    #[error("member subset is empty")]
    EmptySubset,

    #[error("no schedule entry fits budget {budget}; the cheapest entry costs {minimum}")]
    NoEntryWithinBudget { budget: u64, minimum: u64 },

    #[error("member error rate is zero; diversity is undefined")]
    ZeroErrorRate,

    #[error("invalid member specification: {0}")]
    Member(String),

    #[error("invalid config value at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("malformed dataset at byte offset {offset}: {message}")]
    DatasetFormat { offset: u64, message: String },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: Stage) -> Self {
        match self {
            already @ Error::Stage { .. } => already,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
