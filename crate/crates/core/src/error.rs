use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Decoding failures for the blob and params binary formats. Every variant
/// names the field that was rejected.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported version {0} (only version 1 is understood)")]
    UnsupportedVersion(u8),

    #[error("unsupported dtype code {0} (0 = binary32, 1 = binary64)")]
    UnsupportedDtype(u8),

    #[error("reserved field must be zero, found {0}")]
    Reserved(u16),

    #[error("ndim must be at least 1")]
    ZeroRank,

    #[error("dims {0:?} overflow the addressable payload size")]
    DimsOverflow(Vec<u64>),

    #[error("truncated {field}: needed {needed} bytes, {available} available")]
    Truncated {
        field: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("{0} trailing bytes after declared payload")]
    TrailingBytes(usize),

    #[error("entry name is not valid UTF-8")]
    NameEncoding,

    #[error("duplicate entry {0:?}")]
    DuplicateEntry(String),

    #[error("unexpected entry {0:?}")]
    UnknownEntry(String),

    #[error("missing entry {0:?}")]
    MissingEntry(String),

    #[error("entry {name:?} has dtype {found}, expected {expected}")]
    MixedDtype {
        name: String,
        expected: &'static str,
        found: &'static str,
    },
}

/// Problems in a `key = value` training configuration file.
#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },

    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },

    #[error("line {line}: cannot parse `{key}` value {value:?}")]
    Parse {
        line: usize,
        key: String,
        value: String,
    },

    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },

    #[error("`{key}` out of range: {msg}")]
    Range { key: &'static str, msg: String },
}
