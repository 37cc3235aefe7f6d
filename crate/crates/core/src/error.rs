use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the perception and mission stack can report.
///
/// `label()` gives a stable kebab-case tag that the CLI prints verbatim.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("no intersection: {0}")]
    NoIntersection(String),
    #[error("point behind camera: {0}")]
    BehindCamera(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate hull: all points collinear")]
    DegenerateHull,
    #[error("training failed at stage {stage}: {reason}")]
    TrainingFailure { stage: usize, reason: String },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("empty bounding box: {0}")]
    EmptyBbox(String),
    #[error("handle segmentation failed: {0}")]
    SegmentationFailure(String),
    #[error("open jaw not found")]
    OpenJawNotFound,
    #[error("incomplete frame window: {got} of {need} frames")]
    IncompleteWindow { got: usize, need: usize },
    #[error("target wrench not found")]
    TargetNotFound,
    #[error("valve not found")]
    ValveNotFound,
    #[error("stereo mismatch: reprojection error {0:.2} px")]
    StereoMismatch(f64),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub fn label(&self) -> &'static str {
        match self {
            Error::DegenerateInput(_) => "degenerate-input",
            Error::ContractViolation(_) => "contract-violation",
            Error::NoIntersection(_) => "no-intersection",
            Error::BehindCamera(_) => "behind-camera",
            Error::Config(_) => "config-error",
            Error::InsufficientData(_) => "insufficient-data",
            Error::DegenerateHull => "degenerate-hull",
            Error::TrainingFailure { .. } => "training-failure",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::EmptyBbox(_) => "empty-bbox",
            Error::SegmentationFailure(_) => "segmentation-failure",
            Error::OpenJawNotFound => "open-jaw-not-found",
            Error::IncompleteWindow { .. } => "incomplete-window",
            Error::TargetNotFound => "target-not-found",
            Error::ValveNotFound => "valve-not-found",
            Error::StereoMismatch(_) => "stereo-mismatch",
            Error::Parse(_) => "parse-error",
            Error::Io(_) => "io-error",
        }
    }

    /// Configuration and parse problems are usage errors; everything else is
    /// a pipeline failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Parse(_) | Error::Io(_))
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
