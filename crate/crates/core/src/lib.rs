//! Lyapunov spectra of the Anderson model on a strip of width `L`.
//!
//! The crate is organized bottom-up:
//!
//! * [`model`]: disorder laws, potential columns and the `2L x 2L` symplectic
//!   transfer matrices.
//! * [`spectral`]: channel decomposition of the free transfer matrix
//!   (elliptic / hyperbolic channels, rotation phases, the non-resonance check).
//! * [`normalform`]: the real symplectic basis change to the rotation normal
//!   form, the privileged complex basis `W`, channel projections and the
//!   perturbation matrix `P(n)`.
//! * [`frames`]: symplectic frames, their evolution by Gram-Schmidt, channel
//!   weights and mergeable weight statistics.
//! * [`lyapunov`]: Monte-Carlo estimation of the spectrum with batch-means
//!   error bars.
//! * [`perturbative`]: second-order formulas for the bottom, top and summed
//!   exponents and the mean-field weight equations.
//! * [`verify`]: numerical checks of the algebraic identities and moment
//!   formulas the perturbation theory rests on.

pub mod error;
pub mod frames;
pub mod linalg;
pub mod lyapunov;
pub mod model;
pub mod normalform;
pub mod perturbative;
pub mod spectral;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use frames::{
    channel_weights, frame_action, random_frame, run_trajectory, Coordinates, StepResult, SymplecticFrame,
    TrajectoryConfig, TrajectoryOutput, WeightStats, WeightTable,
};
pub use lyapunov::{estimate_partial_sum, estimate_spectrum, EstimateConfig, LyapunovEstimate};
pub use model::{
    build_transfer, laplacian, sample_column, DisorderLaw, PotentialColumn, StripModel,
    TransferMatrix,
};
pub use normalform::{
    build_normal_form, build_p, fourier_potential, moment_targets, FourierPotential, MomentItem,
    NormalFormData, PerturbationMatrix,
};
pub use perturbative::{
    gamma_bottom_bounds, gamma_bottom_formula, gamma_sum_formula, gamma_top_formula,
    meanfield_residual, meanfield_weights, Bounds, MeanFieldWeights,
};
pub use spectral::{
    channel_spectrum, check_main_hypothesis, free_spectrum_interval, h_av_squared, Channel,
    ChannelData, ChannelKind, HypothesisReport, Interval,
};
pub use stats::BatchMeans;
pub use verify::{verify_algebra, verify_dynamics, verify_moments, CheckEntry, VerifyReport};
