use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("horizon mismatch: expected {expected}, got {got}")]
    HorizonMismatch { expected: usize, got: usize },
    #[error("layer {layer} out of range 1..={max}")]
    LayerOutOfRange { layer: usize, max: usize },
    #[error("horizon {0} too large for exact prefix enumeration (max {1})")]
    HorizonTooLarge(usize, usize),
    #[error("emission process is not decodable: {0}")]
    NotDecodable(String),
    #[error("empty class: {0}")]
    EmptyClass(String),
    #[error("config error at {path}: {msg}")]
    Config { path: String, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
