//! Error type shared by every module in the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Unified error enum; the variant name is the machine-parsable category
/// printed by the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("NotFound: {0}")]
    NotFound(PathBuf),
    #[error("UnsupportedFormat: {0}")]
    UnsupportedFormat(String),
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
    #[error("InvalidChannels: expected {expected}, got {got}")]
    InvalidChannels { expected: &'static str, got: usize },
    #[error("InvalidParameter: {0}")]
    InvalidParameter(String),
    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),
    #[error("NoSeeds: label propagation requires at least one seed")]
    NoSeeds,
    #[error("IncompleteLabeling: {unlabeled} pixels still carry label 0")]
    IncompleteLabeling { unlabeled: usize },
    #[error("ConfigError: {0}")]
    Config(String),
    #[error("NumericalError: {0}")]
    Numerical(String),
    #[error("PairingError: unpaired file {0}")]
    Pairing(PathBuf),
    #[error("EmptyDataset: {0}")]
    EmptyDataset(String),
    #[error("TooSmall: {0}")]
    TooSmall(String),
}

impl Error {
    /// Short category tag, used for single-line CLI error reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::NotFound(_) => "NotFound",
            Error::UnsupportedFormat(_) => "UnsupportedFormat",
            Error::Io(_) => "IoError",
            Error::InvalidChannels { .. } => "InvalidChannels",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NoSeeds => "NoSeeds",
            Error::IncompleteLabeling { .. } => "IncompleteLabeling",
            Error::Config(_) => "ConfigError",
            Error::Numerical(_) => "NumericalError",
            Error::Pairing(_) => "PairingError",
            Error::EmptyDataset(_) => "EmptyDataset",
            Error::TooSmall(_) => "TooSmall",
        }
    }
}
