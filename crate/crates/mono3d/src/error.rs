use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Projection of a point whose depth is at or below `EPS_DEPTH`.
    #[error("point depth {0} is below the projection threshold")]
    DepthTooSmall(f64),
    #[error("camera intrinsics (left 3x3 block of P) are singular")]
    SingularIntrinsics,
    /// The (sin, cos) orientation targets are both near zero.
    #[error("orientation encoding (sin, cos) is degenerate")]
    DegenerateOrientation,
    #[error("distance target must be positive, got {0}")]
    NonpositiveDistance(f64),
    #[error("box dimensions must be positive")]
    NonpositiveDimensions,
    #[error("normal equations are rank deficient")]
    RankDeficient,
    #[error("fit did not converge")]
    NotConverged,
    #[error("no detections to score")]
    EmptyDetections,
    #[error("line {line}: {msg}")]
    MalformedLine { line: usize, msg: String },
    #[error("calibration file has no P2 entry")]
    MissingP2,
    #[error("could not sample a valid scene object in {0} attempts")]
    RejectionOverflow(usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
