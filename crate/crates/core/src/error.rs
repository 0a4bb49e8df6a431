use thiserror::Error;

/// Errors raised by the inference library.
#[derive(Debug, Error)]
pub enum PviError {
    #[error("invalid quadrature order {0}: must be in 1..=64")]
    InvalidOrder(usize),

    #[error("matrix is not symmetric positive definite ({0})")]
    Factorization(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<PviError>,
    },
}

impl PviError {
    /// The underlying error with any stage annotations removed.
    pub fn root(&self) -> &PviError {
        match self {
            PviError::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

/// Attach a stage name to errors.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| PviError::Stage { stage, source: Box::new(e) })
    }
}

pub type Result<T> = std::result::Result<T, PviError>;

pub(crate) fn shape_check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(PviError::Shape(msg()))
    }
}
