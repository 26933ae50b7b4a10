use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(
        "matrix is not positive definite: pivot {pivot} is {value:e} (diagonal ratio {diag_ratio:e})"
    )]
    NotPositiveDefinite {
        pivot: usize,
        value: f64,
        /// max/min of the input diagonal, a cheap conditioning hint.
        diag_ratio: f64,
    },

    #[error("annotation {index} at ({x}, {y}) lies outside the {width}x{height} image")]
    Annotation {
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("degenerate latent: zero-norm vector")]
    DegenerateLatent,

    #[error("state error: {0}")]
    State(String),

    #[error("training diverged at epoch {epoch} ({stage} stage): loss = {loss}")]
    Divergence {
        epoch: usize,
        stage: &'static str,
        loss: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable short name used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Domain(_) => "domain",
            Error::Contract(_) => "contract",
            Error::NotPositiveDefinite { .. } => "numerical",
            Error::Annotation { .. } => "annotation",
            Error::Generation(_) => "generation",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::DegenerateLatent => "degenerate_latent",
            Error::State(_) => "state",
            Error::Divergence { .. } => "divergence",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
