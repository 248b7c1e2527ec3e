use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("covariance not SPD")]
    NotSpd,

    #[error("A not full rank")]
    NotFullRank,

    #[error("bandwidth undefined for single particle")]
    BandwidthUndefined,

    #[error("query outside KDE support")]
    OutsideKdeSupport,

    #[error("particle outside reference support")]
    OutsideReferenceSupport,

    #[error("density {0:e} below the log-density floor")]
    DensityUnderflow(f64),

    #[error("diffusion coefficient overflowed")]
    CoefficientOverflow,

    #[error("W2 driver is 1-D only")]
    NotOneDimensional,

    #[error("flow diverged (reduce dt)")]
    Diverged,

    #[error("chi2 step too large")]
    Chi2StepTooLarge,

    #[error("unstable step: dt = {dt} must be below {limit}")]
    UnstableStep { dt: f64, limit: f64 },

    #[error("linear solve failed: relative residual {residual:e}")]
    SolverFailed { residual: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether the failure is numerical (as opposed to bad input or config).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::OutsideKdeSupport
                | Error::OutsideReferenceSupport
                | Error::DensityUnderflow(_)
                | Error::Diverged
                | Error::CoefficientOverflow
                | Error::Chi2StepTooLarge
                | Error::SolverFailed { .. }
                | Error::BandwidthUndefined
        )
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
