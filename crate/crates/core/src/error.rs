use thiserror::Error;

/// Errors raised by model construction, normal forms and the estimators.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// |μ| = 2 within tolerance: the free transfer matrix has a Jordan block.
    #[error("channel {channel} is parabolic (mu = {mu})")]
    ParabolicChannel { channel: usize, mu: f64 },

    #[error("numerical degeneracy in {what}: residual {residual:e}")]
    NumericalDegeneracy { what: &'static str, residual: f64 },

    #[error("rank collapse while orthonormalizing slot {slot} (norm {norm:e})")]
    RankCollapse { slot: usize, norm: f64 },

    #[error("invalid index combination: {0}")]
    InvalidCase(String),

    #[error("missing moments: {0}")]
    MissingMoments(&'static str),

    #[error("formula requires all channels elliptic")]
    HyperbolicPresent,

    #[error("energy {energy} outside the free spectrum [{lo}, {hi}]")]
    OutsideSpectrum { energy: f64, lo: f64, hi: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
