use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("dimension mismatch in {context}: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        context: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("brute-force search too large: {evaluations} patch evaluations exceeds {limit}")]
    SizeGuard { evaluations: u64, limit: u64 },
    #[error("non-finite gradient during deconvolution at level {level}, iteration {iteration}")]
    NonFiniteGradient { level: usize, iteration: usize },
    #[error("need at least {needed} matches, got {got}")]
    NotEnoughMatches { needed: usize, got: usize },
    #[error("no model with at least {needed} inliers found")]
    NoModel { needed: usize },
    #[error("transform is not invertible")]
    NonInvertible,
    #[error("no records to average")]
    EmptyRecords,
    #[error("patch support lies entirely outside the image")]
    SupportOutside,
    #[error("descriptor contract violated: {0}")]
    DescriptorContract(String),
}

pub type Result<T> = core::result::Result<T, Error>;
