use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes, channel counts or out-of-range settings.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing weight `{0}`")]
    MissingWeight(String),

    #[error("weight `{name}` has shape {found:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("{} weight(s) were never consumed, first: `{}`", .0.len(), .0[0])]
    UnusedWeights(Vec<String>),

    #[error("not a weight file (bad magic bytes)")]
    BadMagic,

    #[error("unsupported weight file version {0}")]
    BadVersion(u32),

    #[error("weight file checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("weight file truncated or malformed: {0}")]
    Malformed(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Bad user input, e.g. an empty image.
    #[error("input error: {0}")]
    Input(String),

    #[error("fusion pass failed at `{node}`: {msg}")]
    Pass { node: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
