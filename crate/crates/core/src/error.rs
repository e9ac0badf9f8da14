// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error types for every stage of the audit pipeline.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("blob `{blob}` truncated at byte offset {offset}: expected {expected} payload bytes, found {found}")]
    Truncated {
        blob: String,
        offset: u64,
        expected: u64,
        found: u64,
    },
    #[error("blob `{blob}` declares {declared} payload bytes but the manifest implies {expected}")]
    LengthMismatch {
        blob: String,
        declared: u64,
        expected: u64,
    },
    #[error("blob `{blob}` has trailing bytes after offset {offset}")]
    TrailingBytes { blob: String, offset: u64 },
    #[error("`{field}` has {found} elements, expected {expected}")]
    DimensionMismatch {
        field: String,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value {value} in `{field}` at row {row} ({location})")]
    NonFinite {
        field: String,
        row: usize,
        location: String,
        value: f32,
    },
    #[error("`{field}` row {row} has norm {norm:.6}, expected 1")]
    NonUnitRow { field: String, row: usize, norm: f64 },
    #[error("duplicate name `{name}` in `{field}`")]
    DuplicateName { field: String, name: String },
    #[error("`{field}` out of range for image {image}: {message}")]
    OutOfRange {
        field: String,
        image: usize,
        message: String,
    },
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("unknown demographic attribute `{0}`")]
    UnknownAttribute(String),
    #[error("incompatible inputs: {0}")]
    Incompatible(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum DecompositionError {
    #[error("image index {index} out of range for {n_images} images")]
    ImageOutOfRange { index: usize, n_images: usize },
    #[error("head L{layer}H{head} out of range for a {n_layers}x{n_heads} store")]
    HeadOutOfRange {
        layer: usize,
        head: usize,
        n_layers: usize,
        n_heads: usize,
    },
    #[error("ablation plan was built for shape {plan:?}, store has {store:?}")]
    PlanShape {
        plan: (usize, usize, usize),
        store: (usize, usize, usize),
    },
    #[error("classifier is [{classes}, {dim}], store expects [{expected_classes}, {expected_dim}]")]
    ClassifierShape {
        classes: usize,
        dim: usize,
        expected_classes: usize,
        expected_dim: usize,
    },
    #[error("cannot compute head means over an empty store")]
    EmptyStore,
}

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("class is untestable: {0}")]
    Untestable(Untestable),
    #[error("Cramér's V needs both table dimensions >= 2 (got {rows}x{cols})")]
    DegenerateTable { rows: usize, cols: usize },
    #[error("sample size must be positive")]
    EmptySample,
    #[error("p-value {0} outside [0, 1]")]
    InvalidPValue(f64),
    #[error("unknown demographic attribute `{0}`")]
    UnknownAttribute(String),
    #[error("{predictions} predictions for {images} images")]
    Misaligned { predictions: usize, images: usize },
}

/// Why a class could not be tested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum Untestable {
    /// Fewer than two demographic groups reach the minimum group size.
    TooFewGroups { surviving: usize },
    /// All predictions fall in one column after dropping empty columns.
    ZeroDegreesOfFreedom,
}

impl std::fmt::Display for Untestable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Untestable::TooFewGroups { surviving } => {
                write!(f, "only {surviving} group(s) reach the minimum size")
            }
            Untestable::ZeroDegreesOfFreedom => write!(f, "zero degrees of freedom"),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RankingError {
    #[error("attribute `{0}` missing from the store or the prototypes")]
    UnknownAttribute(String),
    #[error("prototype/store mismatch: {0}")]
    Shape(String),
    #[error("directional gap needs at least 2 defined values, got {0}")]
    TooFewValues(usize),
    #[error("invalid thresholds: {0}")]
    Thresholds(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Decomposition(#[from] DecompositionError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Error, PartialEq)]
pub enum TextSpanError {
    #[error("K must be at least 1")]
    ZeroK,
    #[error("dictionary is empty")]
    EmptyDictionary,
    #[error("SVD rank must be at least 1")]
    ZeroRank,
    #[error("dictionary dimension {dict} != store dimension {store}")]
    Dimension { dict: usize, store: usize },
    #[error(transparent)]
    Decomposition(#[from] DecompositionError),
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Decomposition(#[from] DecompositionError),
    #[error(transparent)]
    Ranking(#[from] RankingError),
    #[error(transparent)]
    TextSpan(#[from] TextSpanError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("infeasible control profile: layer {layer} needs {requested} heads, {available} available")]
    InfeasibleProfile {
        layer: usize,
        requested: usize,
        available: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),
    #[error("invalid synthetic spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}
