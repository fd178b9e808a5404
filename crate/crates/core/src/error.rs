use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two agents occupy the same position; the interaction force is undefined there.
    #[error("singular separation: agents {i} and {j} are at the same position")]
    SingularSeparation { i: usize, j: usize },

    #[error("invalid model parameters: {0}")]
    InvalidParams(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error(
        "could not place agent {agent} of group '{group}' at separation >= {min_separation} after {attempts} attempts"
    )]
    SpawnFailed {
        group: String,
        agent: usize,
        min_separation: f64,
        attempts: usize,
    },

    #[error("trajectory grid mismatch: {0}")]
    GridMismatch(String),

    #[error("degenerate point set: {0}")]
    DegenerateGeometry(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate sample for agent {id} at frame {frame}")]
    DuplicateSample { id: i64, frame: i64 },

    #[error("no agent covers the window [{t0}, {t1}] s")]
    NoCoverage { t0: f64, t1: f64 },

    #[error("non-finite cost at iteration {iteration} (u = {u:?})")]
    NonFiniteCost { iteration: usize, u: [f64; 3] },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
