use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("class id {id} outside the {num_classes}-class table")]
    InvalidClass { id: usize, num_classes: usize },

    #[error("invalid class table: {0}")]
    InvalidTable(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimensions {height}x{width} are not multiples of 16")]
    NotMultipleOf16 { height: usize, width: usize },

    #[error("masking fraction {0} outside the allowed range")]
    MaskFraction(f64),

    #[error("codeword index {index} outside a codebook of {size}")]
    IndexOutOfRange { index: i64, size: usize },

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("bitstream: bad magic {0:02x?}")]
    BadMagic([u8; 4]),

    #[error("bitstream: unsupported version {0}")]
    UnsupportedVersion(u8),

    #[error("bitstream: unknown payload mode {0}")]
    UnknownPayloadMode(u8),

    #[error("bitstream: truncated ({0})")]
    Truncated(&'static str),

    #[error("bitstream: {what} count mismatch, header says {expected}, payload has {actual}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("bitstream: {0} trailing bytes after payload")]
    TrailingBytes(usize),

    #[error("bitstream: invalid header field: {0}")]
    InvalidHeader(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("training stage order: {0}")]
    StageOrder(String),

    #[error("segmenter: {0}")]
    Segmenter(String),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
