//! Error and result types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the detection pipeline and its building blocks.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("non-finite coordinate at point {0}")]
    NonFiniteCoordinate(usize),
    #[error("invalid normals: {0}")]
    InvalidNormals(String),
    #[error("operation requires per-point normals")]
    NormalsRequired,
    #[error("point index {index} out of bounds for cloud of {len} points")]
    IndexOutOfBounds { index: usize, len: usize },
    #[error("center and neighbor coincide; the pair frame is undefined")]
    CoincidentPoints,
    #[error("neighborhood is empty")]
    EmptyNeighborhood,
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("no foreground points remain after background removal")]
    EmptyForeground,
    #[error("invalid coreset size: {0}")]
    InvalidSize(String),
    #[error("feature dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("input set is empty")]
    EmptyInput,
    #[error("grid geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("calibration degenerate: {0}")]
    CalibrationDegenerate(String),
    #[error("QP solver did not converge (KKT residual {residual:.3e})")]
    SolverFailed { residual: f64 },
    #[error("degenerate score statistics: branch-2 standard deviation is zero")]
    DegenerateStats,
    #[error("ground truth contains no defect components")]
    NoDefects,
    #[error("defect region covers {percent:.1}% of the shape (limit 50%)")]
    DefectTooLarge { percent: f64 },
    #[error("GAN training diverged at epoch {epoch}, batch {batch} (d_loss {d_loss}, g_loss {g_loss})")]
    TrainingDiverged {
        epoch: usize,
        batch: usize,
        d_loss: f64,
        g_loss: f64,
    },
    #[error("inversion diverged at iteration {iteration} (loss {loss})")]
    InversionDiverged { iteration: usize, loss: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by invalid inputs or configuration rather than
    /// by a runtime failure. The CLI maps these to exit code 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter(_)
                | Error::Config(_)
                | Error::InvalidSize(_)
                | Error::DimMismatch { .. }
                | Error::IndexOutOfBounds { .. }
        )
    }
}
