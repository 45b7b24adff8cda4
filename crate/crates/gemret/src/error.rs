//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {left} vs {right}")]
    DimensionMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric: |a[{row},{col}] - a[{col},{row}]| = {deviation:e}")]
    NotSymmetric {
        row: usize,
        col: usize,
        deviation: f64,
    },

    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    EigNoConvergence { sweeps: usize, residual: f64 },

    #[error("descriptor norm {norm:e} too small to normalize against")]
    DegenerateNorm { norm: f64 },

    #[error("pooling exponent {value} is below the floor of 1")]
    ExponentBelowOne { value: f64 },

    #[error("image {width}x{height} is smaller than the network receptive field {field}x{field}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        field: usize,
    },

    #[error("image channels ({got}) do not match the first layer input maps ({expected})")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("activation tensor shape {got} does not match expected {expected}")]
    TensorShapeMismatch { expected: String, got: String },

    #[error("{}: bad magic bytes, expected {expected:?}", path.display())]
    BadMagic { path: PathBuf, expected: [u8; 4] },

    #[error("{}: header advertises {header} payload bytes but file holds {payload}", path.display())]
    PayloadSizeMismatch {
        path: PathBuf,
        header: usize,
        payload: usize,
    },

    #[error("{}: negative activation {value} at index {index}", path.display())]
    NegativeActivation {
        path: PathBuf,
        index: usize,
        value: f64,
    },

    #[error("unknown image id {0}")]
    UnknownImage(u64),

    #[error("unknown point id {0} in visibility graph")]
    UnknownPoint(u64),

    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u64 },

    #[error("images {0} and {1} co-observe no 3D points")]
    NoCoObservedPoints(u64, u64),

    #[error("positive pool for query {0} is empty")]
    EmptyPool(u64),

    #[error("no candidate passes the overlap/scale thresholds for query {0}")]
    NoValidPositive(u64),

    #[error("only {available} eligible negative candidates for query {query}, {requested} requested")]
    NegativeShortfall {
        query: u64,
        requested: usize,
        available: usize,
    },

    #[error("descriptor table has no entry for image {0}")]
    MissingDescriptor(u64),

    #[error("pair set contains no matching pairs")]
    NoMatchingPairs,

    #[error("pair set contains no non-matching pairs")]
    NoNonMatchingPairs,

    #[error("need at least 2 descriptors to learn a whitening, got {0}")]
    TooFewDescriptors(usize),

    #[error("target dimensionality {requested} exceeds descriptor dimensionality {available}")]
    BadTargetDim { requested: usize, available: usize },

    #[error("learned whitening transform contains non-finite values")]
    NonFiniteTransform,

    #[error("{context} covariance is zero; the descriptors carry no variation to whiten")]
    DegenerateCovariance { context: &'static str },

    #[error("descriptor index is empty")]
    EmptyIndex,

    #[error("no ground truth for query {0}")]
    MissingGroundTruth(u64),

    #[error("relevant set is empty")]
    EmptyRelevantSet,

    #[error("scale {0} shrinks the image below the network receptive field")]
    ScaleTooSmall(f64),

    #[error("scale factor {0} is outside (0, 1]")]
    BadScale(f64),

    #[error("no scales given for the multi-scale descriptor")]
    NoScales,

    #[error("validation tuple set is empty")]
    EmptyValidation,

    #[error("no training tuples could be mined")]
    EmptyTrainingSet,

    #[error("no image store entry for image {0}")]
    MissingImage(u64),

    #[error("{}: {line}: {message}", path.display())]
    Config {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {message}", path.display())]
    Manifest { path: PathBuf, message: String },

    #[error("crop [{x}, {y}, {w}, {h}] exceeds image bounds {width}x{height}")]
    CropOutOfBounds {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },

    #[error("{}: unsupported image format (expected binary PGM `P5` or PPM `P6`)", path.display())]
    UnsupportedImageFormat { path: PathBuf },

    #[error("{}: {message}", path.display())]
    MalformedImage { path: PathBuf, message: String },

    #[error("{}: unsupported checkpoint version {version}", path.display())]
    BadVersion { path: PathBuf, version: u32 },

    #[error("{}: {message}", path.display())]
    MalformedCheckpoint { path: PathBuf, message: String },

    #[error("{}: file is truncated", path.display())]
    Truncated { path: PathBuf },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("gradient check failed: {0}")]
    GradCheckFailed(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
