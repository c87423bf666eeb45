//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("non-finite loss component: {0}")]
    NonFiniteComponent(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("anchor {anchor} (label {label}) has no {kind} in batch")]
    MissingTripletPair {
        anchor: usize,
        label: usize,
        kind: &'static str,
    },

    #[error("unknown view tag `{0}`")]
    UnknownView(String),

    #[error("identity {identity} has only {available} samples in modality {modality}, need {needed}")]
    InsufficientSamples {
        identity: usize,
        modality: u8,
        available: usize,
        needed: usize,
    },

    #[error("query label {0} absent from gallery")]
    QueryLabelMissing(usize),

    #[error("unknown variable `{0}`")]
    UnknownVariable(String),

    #[error("overlapping variable groups: `{0}` appears in more than one group")]
    OverlappingGroups(String),

    #[error("invalid probability table: {0}")]
    InvalidTable(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
