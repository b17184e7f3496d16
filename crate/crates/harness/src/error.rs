use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] deconf_core::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("TOML error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("regenerated row differs from the recorded one:\n  recorded:    {recorded}\n  regenerated: {regenerated}")]
    Mismatch { recorded: String, regenerated: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status: 2 configuration, 3 data, 4 training divergence,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Toml(_) => 2,
            Error::Core(e) => core_exit_code(e),
            Error::Json(_) | Error::Csv(_) | Error::Mismatch { .. } => 3,
            Error::Io(_) => 1,
        }
    }
}

/// Exit status for an error raised by the core library.
pub fn core_exit_code(e: &deconf_core::Error) -> i32 {
    use deconf_core::Error as C;
    match e {
        C::Diverged { .. } | C::NonFinite(_) => 4,
        C::Validation(_) | C::Domain(_) => 2,
        C::Data(_) | C::Format(_) | C::Json(_) | C::UndefinedMetric(_) => 3,
        _ => 1,
    }
}
