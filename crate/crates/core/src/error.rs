use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// The variants map onto the CLI exit codes: configuration and input
/// problems are "user" errors (exit 2), the numerical ones are exit 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("CFL condition violated at step {step}: max speed {max_speed} m/s gives dt*v/dx = {ratio:.4} > {safety}")]
    Cfl {
        step: usize,
        max_speed: f64,
        ratio: f64,
        safety: f64,
    },

    #[error("degenerate kernel: sum of raw kernel weights is {0}")]
    DegenerateKernel(f64),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for failures caused by numerics rather than by inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Cfl { .. } | Error::DegenerateKernel(_) | Error::NonFinite(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
