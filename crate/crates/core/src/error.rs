use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("experts are incompatible: {0}")]
    IncompatibleExperts(String),

    #[error("sequence of length {len} exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("operation requires an active adaptation")]
    AdapterMissing,

    #[error("activation cache is stale (cache version {cache}, model version {model})")]
    StaleCache { cache: u64, model: u64 },

    #[error("unknown task family `{0}`")]
    UnknownFamily(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("training diverged at epoch {epoch}: non-finite parameters")]
    Diverged { epoch: usize },

    #[error("pretraining band [{lo}, {hi}] not reached after {epochs} epochs; accuracies: {accuracies:?}")]
    PretrainBand {
        lo: f64,
        hi: f64,
        epochs: usize,
        accuracies: Vec<(String, f64)>,
    },

    #[error("evaluation set is empty")]
    EmptyEval,

    #[error("expert library has no classifier expert")]
    ClassifierMissing,

    #[error("expert library is empty")]
    EmptyLibrary,

    #[error("value out of range: {0}")]
    Range(String),

    #[error("incompatible architecture: {0}")]
    IncompatibleArchitecture(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
