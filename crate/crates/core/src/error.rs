use peft_forge_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("weight archive: {0}")]
    Archive(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("non-finite gradient for `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: usize },
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
    #[error("mismatched method sets: {0}")]
    MethodSet(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image decode: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Tensor(_) | Error::TensorShape { .. } => "shape",
            Error::Config(_) | Error::MethodSet(_) => "config",
            Error::MissingTensor(_) | Error::Archive(_) => "archive",
            Error::Dataset(_) | Error::Image(_) => "dataset",
            Error::NonFiniteGradient { .. } => "numerical",
            Error::UndefinedCorrelation(_) => "statistics",
            Error::Io(_) | Error::Json(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
