use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),

    #[error("unsupported schema_version {0} (expected 1)")]
    SchemaVersion(u32),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {what} at flat index {index}")]
    NonFinite { what: String, index: usize },

    #[error("invalid label {label} in {what} (class count {classes})")]
    LabelOutOfRange {
        what: String,
        label: u32,
        classes: usize,
    },

    #[error("invalid fold marker {value} at support index {index}")]
    FoldMarker { index: usize, value: u8 },

    #[error("support instance {index} is REMOVED but its class {class} has {count} support instances")]
    RemovedNotSingleton {
        index: usize,
        class: u32,
        count: usize,
    },

    #[error("query set is not stratified: class {class} has {count} instances, expected {expected}")]
    QueryNotStratified {
        class: usize,
        count: usize,
        expected: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty support set")]
    EmptySupport,

    #[error("optimizer aborted at iteration {iteration}: {reason}")]
    Optimizer { iteration: usize, reason: String },

    #[error("statistics: {0}")]
    Stats(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("episode {episode_id}: {source}")]
    Episode {
        episode_id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path.into());
        }
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_episode(self, episode_id: &str) -> Self {
        Error::Episode {
            episode_id: episode_id.to_string(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad user-supplied configuration rather than
    /// data or runtime failures.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Episode { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
