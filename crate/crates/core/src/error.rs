use thiserror::Error;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("mesh generation failed: {0}")]
    Mesh(String),

    #[error("electrodes {first} and {second} overlap")]
    ElectrodeOverlap { first: usize, second: usize },

    #[error("profile {k} is not finite at frequency index {q}")]
    NonFiniteProfile { k: usize, q: usize },

    #[error("spectral matrix has rank {rank}, expected {expected} (condition number {condition:e})")]
    RankDeficient {
        rank: usize,
        expected: usize,
        condition: f64,
    },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("non-finite value encountered at iteration {iter}")]
    NonFinite { iter: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by the user's input rather than numerics or IO.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }

    /// The innermost error, with stage wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
