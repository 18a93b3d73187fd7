use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error classes. The CLI maps each class to a distinct exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Fit,
    Capability,
    Numerical,
}

impl ErrorClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Config => "config",
            ErrorClass::Data => "data",
            ErrorClass::Fit => "fit",
            ErrorClass::Capability => "capability",
            ErrorClass::Numerical => "numerical",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Fit => 4,
            ErrorClass::Capability => 5,
            ErrorClass::Numerical => 6,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("feature map error: {0}")]
    FeatureMap(String),
    #[error("singular design: {0}")]
    SingularDesign(String),
    #[error("empty stratum: no individuals with treatment {0}")]
    EmptyStratum(u8),
    #[error("fit did not converge: {0}")]
    Fit(String),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("unsupported combination: {0}")]
    Unsupported(String),
    #[error("model contract violated: {0}")]
    Contract(String),
    #[error("numerically singular matrix (condition number {condition:.3e}): {context}")]
    NumericalSingularity { context: String, condition: f64 },
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::FeatureMap(_) => {
                ErrorClass::Config
            }
            Error::Io { .. }
            | Error::Csv(_)
            | Error::Schema(_)
            | Error::Parse { .. }
            | Error::Validation(_) => ErrorClass::Data,
            Error::SingularDesign(_) | Error::EmptyStratum(_) | Error::Fit(_) => ErrorClass::Fit,
            Error::Capability(_)
            | Error::Unsupported(_)
            | Error::Contract(_)
            | Error::IndexOutOfRange { .. } => ErrorClass::Capability,
            Error::NumericalSingularity { .. } => ErrorClass::Numerical,
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
