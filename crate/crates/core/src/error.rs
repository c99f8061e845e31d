use thiserror::Error;

/// Every failure the numerical routines can report.
///
/// Variant names are surfaced verbatim by the command-line front end, so keep
/// them stable.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabError {
    #[error("NonFinite: non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("NotSymmetric: transition matrix is not symmetric")]
    NotSymmetric,
    #[error("NotDiagonal: transition matrix is not diagonal")]
    NotDiagonal,
    #[error("NotBalanced: |B - C^T|_inf = {gap:e} exceeds tolerance")]
    NotBalanced { gap: f64 },
    #[error("JacobiNoConvergence: off-diagonal norm {off_norm:e} after {sweeps} sweeps")]
    JacobiNoConvergence { sweeps: usize, off_norm: f64 },
    #[error("DegenerateDenominator: |B + C^T| is zero")]
    DegenerateDenominator,
    #[error("IllConditionedVandermonde: residual {residual:e}")]
    IllConditionedVandermonde { residual: f64 },
    #[error("WindowOutOfRange: [{start}, {end}) with available horizon {available}")]
    WindowOutOfRange {
        start: usize,
        end: usize,
        available: usize,
    },
    #[error("ZeroSystem: |CB| = {cb:e} is below tolerance")]
    ZeroSystem { cb: f64 },
    #[error("RankDeficientHankel: pivot {pivot:e} at column {column}")]
    RankDeficientHankel { column: usize, pivot: f64 },
    #[error("ComplexOrOutOfRangeRoots: found {found} of {expected} real roots in [{lo}, {hi}]")]
    ComplexOrOutOfRangeRoots {
        found: usize,
        expected: usize,
        lo: f64,
        hi: f64,
    },
    #[error("NegativeWeight: weight {weight:e} at atom {index}")]
    NegativeWeight { index: usize, weight: f64 },
    #[error("SearchFailed: {0}")]
    SearchFailed(String),
    #[error("DegenerateTeacher: response tail max {tail_max:e}")]
    DegenerateTeacher { tail_max: f64 },
    #[error("SingularMatrix: pivot {pivot:e} at column {column}")]
    SingularMatrix { column: usize, pivot: f64 },
    #[error("InvalidArgument: {0}")]
    InvalidArgument(String),
}

impl LabError {
    /// Short variant name, used for CLI diagnostics and CSV status columns.
    pub fn name(&self) -> &'static str {
        match self {
            LabError::NonFinite { .. } => "NonFinite",
            LabError::NotSymmetric => "NotSymmetric",
            LabError::NotDiagonal => "NotDiagonal",
            LabError::NotBalanced { .. } => "NotBalanced",
            LabError::JacobiNoConvergence { .. } => "JacobiNoConvergence",
            LabError::DegenerateDenominator => "DegenerateDenominator",
            LabError::IllConditionedVandermonde { .. } => "IllConditionedVandermonde",
            LabError::WindowOutOfRange { .. } => "WindowOutOfRange",
            LabError::ZeroSystem { .. } => "ZeroSystem",
            LabError::RankDeficientHankel { .. } => "RankDeficientHankel",
            LabError::ComplexOrOutOfRangeRoots { .. } => "ComplexOrOutOfRangeRoots",
            LabError::NegativeWeight { .. } => "NegativeWeight",
            LabError::SearchFailed(_) => "SearchFailed",
            LabError::DegenerateTeacher { .. } => "DegenerateTeacher",
            LabError::SingularMatrix { .. } => "SingularMatrix",
            LabError::InvalidArgument(_) => "InvalidArgument",
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
