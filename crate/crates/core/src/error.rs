use thiserror::Error;

/// Errors shared by the tensor engine, the fusion block and the data pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not satisfy an operation's shape contract.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A configuration violates its invariants.
    #[error("invalid config: {0}")]
    Config(String),

    /// Batch statistics cannot be computed from a single element.
    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),

    /// Text token axis is empty; attention has nothing to attend to.
    #[error("empty vocabulary: text input has zero tokens")]
    EmptyVocabulary,

    /// A forward op produced a non-finite value from finite inputs.
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },

    /// Backward invoked with activations from a different forward.
    #[error("stale activations: {0}")]
    StaleActivations(String),

    /// Geometry collapsed to zero area during conversion.
    #[error("degenerate geometry for annotation {source_id}: {detail}")]
    DegenerateGeometry { source_id: String, detail: String },

    /// Embedding with zero norm cannot enter cosine similarity.
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    /// Manifest is internally inconsistent.
    #[error("manifest error: {0}")]
    Manifest(String),

    /// Reclassification protocol violation (e.g. response for unknown job).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Evaluation requested on a domain where metrics are undefined.
    #[error("evaluation domain error: {0}")]
    EvalDomain(String),

    /// Drop-in contract violation at a neck level.
    #[error("contract violation at level {level}: {detail}")]
    Contract { level: usize, detail: String },

    #[error("serialization error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
