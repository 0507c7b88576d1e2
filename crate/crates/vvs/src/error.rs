use thiserror::Error;

/// Unified error type for the whole pipeline.
///
/// Variants are grouped by where they surface: operator input validation,
/// data/file handling, fitting, and training. The CLI maps `Usage`-class
/// errors (bad shapes, bad config, bad manifest) to exit code 2 and
/// everything else to exit code 1.
#[derive(Debug, Error)]
pub enum VvsError {
    /// An operator received tensors whose shapes cannot be combined.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration value is outside its documented range.
    #[error("config: {0}")]
    Config(String),

    /// A normalization hit a (near-)zero vector where a direction is required.
    #[error("{op}: zero-norm input (norm {norm:.3e})")]
    ZeroNorm { op: &'static str, norm: f64 },

    /// Dataset manifest failed validation.
    #[error("manifest: {0}")]
    Manifest(String),

    /// A binary artifact is malformed (bad magic, version, or truncation).
    #[error("format {format}: {detail}")]
    Format {
        format: &'static str,
        detail: String,
    },

    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// Whitening fit could not produce the requested output dimension.
    #[error("pca fit: requested {requested} components but covariance rank is {rank}")]
    RankDeficient { requested: usize, rank: usize },

    /// Distractor injection was asked to draw from an empty set.
    #[error("injection: easy-distractor set is empty but ratio range is non-zero")]
    EmptyDistractorSet,

    /// Triplet sampling could not satisfy its contract on this corpus.
    #[error("sampling: {0}")]
    Sampling(String),

    /// A non-finite value appeared during optimization.
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: u64, detail: String },

    /// Embedding store constraint violated (duplicate id, dim mismatch, ...).
    #[error("store: {0}")]
    Store(String),

    /// Evaluation request cannot be answered (unknown query, empty store, ...).
    #[error("eval: {0}")]
    Eval(String),
}

impl VvsError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        VvsError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            VvsError::Shape { .. }
                | VvsError::Config(_)
                | VvsError::Manifest(_)
                | VvsError::Format { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, VvsError>;
