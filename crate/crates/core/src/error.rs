use std::path::PathBuf;

use thiserror::Error;

use crate::query::{OperatorType, QueryPattern};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed line {line} in {file}")]
    MalformedLine { file: PathBuf, line: usize },
    #[error("id out of range: `{token}` (bound {bound})")]
    IdOutOfRange { token: String, bound: usize },
    #[error("unsupported pattern: {0}")]
    UnsupportedPattern(String),
    #[error("arity mismatch for {pattern}: expected {expected_anchors} anchors / {expected_relations} relations, got {anchors} / {relations}")]
    ArityMismatch {
        pattern: QueryPattern,
        expected_anchors: usize,
        expected_relations: usize,
        anchors: usize,
        relations: usize,
    },
    #[error("{0} is not a union pattern")]
    NotAUnionPattern(QueryPattern),
    #[error("could not instantiate {pattern} after {limit} retries")]
    ExhaustedRetries { pattern: QueryPattern, limit: usize },
    #[error("non-finite loss {value} recorded for {pattern}")]
    NonFiniteLoss { pattern: QueryPattern, value: f64 },
    #[error("refcount must be at least 1 at allocation")]
    ZeroRefcount,
    #[error("tensor {0} released after its refcount reached zero")]
    DoubleRelease(u32),
    #[error("tensor {0} accessed after reclamation")]
    UseAfterFree(u32),
    #[error("index {index} out of range for table of {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("beta parameter out of range: {0}")]
    ParamOutOfRange(f64),
    #[error("special function domain error at x = {0}")]
    DomainError(f64),
    #[error("all operator pools are empty")]
    AllPoolsEmpty,
    #[error("no kernel registered for {0}")]
    MissingKernel(OperatorType),
    #[error("scheduler stalled with {pending} nodes unexecuted")]
    Stalled { pending: usize },
    #[error("cyclic dependency graph")]
    Cyclic,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("every entity is an answer; no negatives available")]
    NoNegativesAvailable,
    #[error("bad magic bytes in {0}")]
    BadMagic(String),
    #[error("row count mismatch: file has {found}, graph has {expected}")]
    CountMismatch { expected: usize, found: usize },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("backbone mismatch: checkpoint is {checkpoint}, config requests {config}")]
    BackboneMismatch { checkpoint: String, config: String },
    #[error("precision mismatch: checkpoint stores {checkpoint}, run uses {run}")]
    PrecisionMismatch { checkpoint: String, run: String },
    #[error("answer target {0} is inside the filter set")]
    TargetFiltered(u32),
    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("worker failure: {0}")]
    Worker(String),
    #[error("pattern {0} requires a query with answers")]
    EmptyAnswers(QueryPattern),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Stable snake_case name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingFile(_) => "missing_file",
            Error::MalformedLine { .. } => "malformed_line",
            Error::IdOutOfRange { .. } => "id_out_of_range",
            Error::UnsupportedPattern(_) => "unsupported_pattern",
            Error::ArityMismatch { .. } => "arity_mismatch",
            Error::NotAUnionPattern(_) => "not_a_union_pattern",
            Error::ExhaustedRetries { .. } => "exhausted_retries",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::ZeroRefcount => "zero_refcount",
            Error::DoubleRelease(_) => "double_release",
            Error::UseAfterFree(_) => "use_after_free",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::ParamOutOfRange(_) => "param_out_of_range",
            Error::DomainError(_) => "domain_error",
            Error::AllPoolsEmpty => "all_pools_empty",
            Error::MissingKernel(_) => "missing_kernel",
            Error::Stalled { .. } => "stalled",
            Error::Cyclic => "cyclic",
            Error::NonFinite(_) => "non_finite",
            Error::NoNegativesAvailable => "no_negatives_available",
            Error::BadMagic(_) => "bad_magic",
            Error::CountMismatch { .. } => "count_mismatch",
            Error::TruncatedFile(_) => "truncated_file",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::BackboneMismatch { .. } => "backbone_mismatch",
            Error::PrecisionMismatch { .. } => "precision_mismatch",
            Error::TargetFiltered(_) => "target_filtered",
            Error::Config { .. } => "config",
            Error::Worker(_) => "worker",
            Error::EmptyAnswers(_) => "empty_answers",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
