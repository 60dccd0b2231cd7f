use std::fmt;

use thiserror::Error;

/// One failed design invariant, with the object it was found on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub context: String,
    pub message: String,
}

impl Violation {
    pub fn new(context: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            context: context.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.context, self.message)
    }
}

fn join(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{} invariant violation(s): {}", .0.len(), join(.0))]
    Invalid(Vec<Violation>),
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("node {node} has no resistive path to a source")]
    Disconnected { node: usize },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("invalid simulation parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite or divergent voltage {value} at node {node}, t = {time} ps")]
    Diverged { node: usize, time: f64, value: f64 },
    #[error("node {node} never crosses {level} V")]
    NoCrossing { node: usize, level: f64 },
    #[error("pair {pair} references segment {segment} outside the simulated nets")]
    ForeignSegment { pair: String, segment: u32 },
}

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("no oracle result for pair {victim}->{aggressor}")]
    MissingOracle { victim: u32, aggressor: u32 },
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset has no training samples")]
    EmptyTrain,
    #[error("split fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("dataset row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("dataset header mismatch: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("missing layer {0}")]
    MissingLayer(u32),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training split contains a single class")]
    SingleClass,
    #[error("need at least {needed} samples, have {have}")]
    InsufficientSamples { needed: usize, have: usize },
    #[error("evaluation split is empty")]
    EmptyEval,
    #[error("feature dimension mismatch: model expects {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("unsupported model format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("model checksum mismatch: file is corrupt or truncated")]
    Checksum,
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum StaError {
    #[error("per-segment lists differ in length: {taus} delays vs {deltas} deltas")]
    LengthMismatch { taus: usize, deltas: usize },
    #[error("path has no stages")]
    EmptyPath,
    #[error("stage delay must be positive, got {0} ps")]
    NonPositiveStage(f64),
    #[error("net {0} is not in the report")]
    UnknownNet(u32),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("infeasible generator config: {0}")]
    Infeasible(String),
    #[error("invalid generator config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
}
