use std::fmt;

/// Errors produced by the attention kernels, quantizers and file formats.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("insufficient data: need at least {needed} vectors, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("index out of range: {what} {index} >= {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error at byte offset {offset}: {kind}")]
    Format { offset: u64, kind: FormatErrorKind },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Distinct diagnostics for malformed binary files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormatErrorKind {
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    UnsupportedVersion(u32),
    TruncatedHeader,
    TruncatedPayload { expected: u64, found: u64 },
    TrailingBytes(u64),
    BadHeader(String),
}

impl fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatErrorKind::BadMagic { expected, found } => write!(
                f,
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(found)
            ),
            FormatErrorKind::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            FormatErrorKind::TruncatedHeader => write!(f, "truncated header"),
            FormatErrorKind::TruncatedPayload { expected, found } => write!(
                f,
                "truncated payload: expected {expected} bytes, found {found}"
            ),
            FormatErrorKind::TrailingBytes(n) => write!(f, "{n} unexpected trailing bytes"),
            FormatErrorKind::BadHeader(msg) => write!(f, "bad header: {msg}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn ensure_finite(values: &[f32], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(invalid(format!("{what} has non-finite entry at index {i}"))),
        None => Ok(()),
    }
}
