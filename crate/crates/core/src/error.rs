use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite objective value at coordinate {0}")]
    NonFinite(usize),

    #[error("cannot select {requested} survivors from a population of {available}")]
    SelectionSize { requested: usize, available: usize },

    #[error("layer {layer} out of range 1..={total}")]
    LayerRange { layer: usize, total: usize },

    #[error("unknown device '{0}'")]
    UnknownDevice(String),

    #[error("unknown hardware backend '{name}' (registered: {known})")]
    UnknownBackend { name: String, known: String },

    #[error("lookup table has no row for device '{device}' at {f_compute} GHz / {f_emc:?} GHz")]
    LookupMissing {
        device: String,
        f_compute: f64,
        f_emc: Option<f64>,
    },

    #[error("point does not dominate the reference point")]
    ReferenceViolation,

    #[error("empty inner archive for backbone {0}")]
    EmptyArchive(usize),

    #[error("enumeration refused: {cardinality} candidates exceeds cap {cap}")]
    CapExceeded { cardinality: u128, cap: u128 },

    #[error("exact hypervolume supports 1 to 3 objectives, got {0}")]
    Dimensionality(usize),

    #[error("invalid probability vector: {0}")]
    Probability(String),

    #[error("config digest mismatch in {path}: archive has {found}, config is {expected} (use --force to overwrite)")]
    DigestMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
