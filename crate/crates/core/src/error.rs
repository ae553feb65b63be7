use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {context} (expected {expected}, got {actual})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-positive step size {value} at output channel {channel}")]
    NonPositiveStep { channel: usize, value: f32 },

    #[error("code {code} at ({row}, {col}) outside [{min}, {max}]")]
    CodeOutOfRange {
        row: usize,
        col: usize,
        code: i8,
        min: i8,
        max: i8,
    },

    #[error("truncated {what}: expected {expected} bytes, got {actual}")]
    Truncated {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("base digest mismatch (wrong base): expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("token id {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("empty calibration set")]
    EmptyCalibration,

    #[error("distillation diverged at step {step}: loss {loss:.6e} > 10x initial {initial:.6e}")]
    Diverged { step: usize, loss: f64, initial: f64 },

    #[error("unknown expert {0:?}")]
    UnknownExpert(String),

    #[error("duplicate expert {0:?}")]
    DuplicateExpert(String),

    #[error("budget exceeded: need {needed} bytes, {available} reclaimable of {budget}")]
    BudgetExceeded {
        needed: usize,
        available: usize,
        budget: usize,
    },

    #[error("uncovered domains: {0:?}")]
    UncoveredDomains(Vec<String>),

    #[error("unknown domain {0:?}")]
    UnknownDomain(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }

    /// Short stable identifier, used by the CLI and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonPositiveStep { .. } => "non_positive_step",
            Error::CodeOutOfRange { .. } => "code_out_of_range",
            Error::Truncated { .. } => "truncated",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::DigestMismatch { .. } => "digest_mismatch",
            Error::Manifest(_) => "manifest",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::EmptyCalibration => "empty_calibration",
            Error::Diverged { .. } => "diverged",
            Error::UnknownExpert(_) => "unknown_expert",
            Error::DuplicateExpert(_) => "duplicate_expert",
            Error::BudgetExceeded { .. } => "budget_exceeded",
            Error::UncoveredDomains(_) => "uncovered_domains",
            Error::UnknownDomain(_) => "unknown_domain",
            Error::EmptyDataset => "empty_dataset",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
