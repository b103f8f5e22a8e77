use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch at layer {layer}: {detail}")]
    Shape { layer: usize, detail: String },

    #[error("parameter layout mismatch: expected {expected} values, found {found}")]
    LayoutMismatch { expected: usize, found: usize },

    #[error("non-finite values produced at layer {layer}")]
    NumericOverflow { layer: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("insufficient data: need {needed} entries, have {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("runs are not comparable: {0}")]
    Comparison(String),

    #[error("round {round}, phase {phase}")]
    Phase {
        round: u32,
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed input: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn in_phase(self, round: u32, phase: &'static str) -> Self {
        Error::Phase { round, phase, source: Box::new(self) }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
