use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // corpus
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid byte {byte:#04x} at position {position}")]
    InvalidByte { position: usize, byte: u8 },
    #[error("toy sequence length must be odd, got {0}")]
    EvenLength(usize),
    #[error("toy sequence length must be at least 3, got {0}")]
    ToyTooShort(usize),
    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    UnknownId { id: u32, vocab: usize },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("corpus of length {len} is shorter than the requested sequence length {seq_len}")]
    CorpusTooShort { len: usize, seq_len: usize },

    // ordering
    #[error("vocabulary is empty")]
    EmptyVocab,
    #[error("no windows to analyse")]
    NoWindows,
    #[error("window of length {got} does not match expected length {expected}")]
    WindowLengthMismatch { expected: usize, got: usize },
    #[error("{blocks} blocks requested but only {nonzero} categories have nonzero probability")]
    BTooLarge { blocks: usize, nonzero: usize },
    #[error("invalid ordering: {0}")]
    InvalidOrdering(String),

    // schedule
    #[error("marginal entropy is zero; the ratio is undefined for a single-category vocabulary")]
    DegenerateEntropy,
    #[error("information ratio decreases between groups {group} and {next} ({from} > {to})")]
    NonMonotonic { group: usize, next: usize, from: f64, to: f64 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid probability vector: {0}")]
    InvalidProbs(String),

    // diffusion
    #[error("timestep {t} outside [{min}, {max}]")]
    BadTimestep { t: usize, min: usize, max: usize },
    #[error("position masked at t={t} but category {category} has zero mask probability")]
    DivisionByZeroMask { t: usize, category: u32 },
    #[error("no category has a positive mask probability at t={0}")]
    EmptySupport(usize),
    #[error("model assigns zero probability to the true category {category}")]
    ZeroProbability { category: u32 },
    #[error("z_T contains an unmasked token at position {0}")]
    NotFullyMasked(usize),
    #[error("generated sequence still contains a mask at position {0}")]
    MaskResidue(usize),
    #[error("instance too large to enumerate: {0}")]
    TooLarge(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    // denoiser
    #[error("bad model configuration: {0}")]
    BadConfig(String),
    #[error("sequence length {len} exceeds the model maximum {max}")]
    LengthExceeded { len: usize, max: usize },
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input is not a toy-dataset configuration: {0}")]
    NonToyInput(String),
    #[error("version mismatch: {0}")]
    VersionMismatch(String),
    #[error("corrupt file: {0}")]
    CorruptFile(String),

    // trainer / cli
    #[error("schedule incompatible with model: {0}")]
    IncompatibleSchedule(String),
    #[error("nothing to export")]
    EmptyInput,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
