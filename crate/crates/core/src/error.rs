use thiserror::Error;

/// Error type shared across the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expected layout) do not line up.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("non-finite value in {0}")]
    Numeric(String),

    /// Bad configuration value or unparseable config text.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset files missing, malformed, or inconsistent.
    #[error("data error: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Anything else that has no dedicated variant.
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op: op.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefix an error with the pipeline stage it occurred in, so a numeric
    /// failure deep inside a forward pass names the layer that produced it.
    pub fn in_scope(self, scope: &str) -> Self {
        match self {
            Error::Numeric(s) => Error::Numeric(format!("{scope}: {s}")),
            Error::Shape { op, lhs, rhs } => Error::Shape {
                op: format!("{scope}: {op}"),
                lhs,
                rhs,
            },
            other => other,
        }
    }
}
