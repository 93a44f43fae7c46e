use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown subject `{0}`")]
    UnknownSubject(String),

    #[error("subject `{0}` is registered more than once")]
    DuplicateSubject(String),

    #[error("subject `{subject}`: expected {expected} voxels, got {got}")]
    VoxelLength {
        subject: String,
        expected: usize,
        got: usize,
    },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("dataset is not admissible ({0} violations, first: {1})")]
    Dataset(usize, String),

    #[error("checksum mismatch for `{name}`: manifest {expected:016x}, data {actual:016x}")]
    Checksum { name: String, expected: u64, actual: u64 },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed container: {0}")]
    Format(String),

    #[error("scorer `{name}`: {detail}")]
    Scorer { name: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
