//! Strip model, disorder sampling and transfer matrices.
//!
//! Random streams are ChaCha8 (a counter-based generator with 64-bit stream
//! selection). A trajectory with index `t` draws its disorder from stream
//! `2t` and its initial frame from stream `2t + 1` of the model seed, so runs
//! are reproducible independently of scheduling.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// The random stream type used everywhere in the crate.
pub type RandomStream = ChaCha8Rng;

/// Opens substream `stream` of `seed`.
pub fn random_stream(seed: u64, stream: u64) -> RandomStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn disorder_stream(seed: u64, trajectory: u64) -> RandomStream {
    random_stream(seed, 2 * trajectory)
}

pub fn frame_stream(seed: u64, trajectory: u64) -> RandomStream {
    random_stream(seed, 2 * trajectory + 1)
}

/// Single-site distribution of the potential. Every law is centered with unit variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisorderLaw {
    /// Uniform on {-1, +1}.
    #[default]
    Rademacher,
    /// Uniform on [-sqrt 3, sqrt 3].
    Uniform,
    /// Standard normal (ziggurat sampler of `rand_distr`).
    Gaussian,
}

impl DisorderLaw {
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            DisorderLaw::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            DisorderLaw::Uniform => 3f64.sqrt() * (2.0 * rng.random::<f64>() - 1.0),
            DisorderLaw::Gaussian => rng.sample(StandardNormal),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DisorderLaw::Rademacher => "rademacher",
            DisorderLaw::Uniform => "uniform",
            DisorderLaw::Gaussian => "gaussian",
        }
    }
}

impl fmt::Display for DisorderLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DisorderLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rademacher" | "binary" => Ok(DisorderLaw::Rademacher),
            "uniform" | "box" => Ok(DisorderLaw::Uniform),
            "gaussian" | "normal" => Ok(DisorderLaw::Gaussian),
            other => Err(Error::InvalidArgument(format!("unknown disorder law `{other}`"))),
        }
    }
}

/// Anderson model on a periodic strip of width `L` at fixed energy and coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StripModel {
    pub width: usize,
    pub energy: f64,
    pub coupling: f64,
    pub disorder: DisorderLaw,
    pub seed: u64,
}

impl StripModel {
    pub fn new(width: usize, energy: f64, coupling: f64, disorder: DisorderLaw, seed: u64) -> Result<Self> {
        let model = StripModel { width, energy, coupling, disorder, seed };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::InvalidArgument("strip width must be at least 1".into()));
        }
        if !self.energy.is_finite() || !self.coupling.is_finite() {
            return Err(Error::InvalidArgument("energy and coupling must be finite".into()));
        }
        Ok(())
    }

    pub fn with_coupling(&self, coupling: f64) -> Self {
        StripModel { coupling, ..self.clone() }
    }

    pub fn with_energy(&self, energy: f64) -> Self {
        StripModel { energy, ..self.clone() }
    }
}

/// On-site potential `v(n, 1..L)` of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialColumn {
    pub values: Vec<f64>,
}

impl PotentialColumn {
    pub fn new(values: Vec<f64>) -> Self {
        PotentialColumn { values }
    }

    pub fn zeros(width: usize) -> Self {
        PotentialColumn { values: vec![0.0; width] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A `2L x 2L` real symplectic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    pub entries: DMatrix<f64>,
}

impl TransferMatrix {
    pub fn width(&self) -> usize {
        self.entries.nrows() / 2
    }

    /// `max |T^t J T - J|`.
    pub fn symplectic_residual(&self) -> f64 {
        linalg::symplectic_residual(&self.entries)
    }
}

/// Transverse periodic Laplacian `-S - S^t`, with the conventions `0` for
/// `L = 1` and `-S` for `L = 2`.
pub fn laplacian(width: usize) -> DMatrix<f64> {
    let mut delta = DMatrix::zeros(width, width);
    match width {
        0 | 1 => {}
        2 => {
            delta[(0, 1)] = -1.0;
            delta[(1, 0)] = -1.0;
        }
        _ => {
            for l in 0..width {
                delta[(l, (l + 1) % width)] -= 1.0;
                delta[((l + 1) % width, l)] -= 1.0;
            }
        }
    }
    delta
}

/// Eigenvalue of [`laplacian`] on the Fourier mode `q` (0-based, `q = 0` is the constant mode).
pub fn laplacian_eigenvalue(width: usize, q: usize) -> f64 {
    match width {
        1 => 0.0,
        2 => {
            if q % 2 == 0 {
                -1.0
            } else {
                1.0
            }
        }
        _ => -2.0 * (2.0 * std::f64::consts::PI * q as f64 / width as f64).cos(),
    }
}

pub fn sample_column<R: Rng + ?Sized>(model: &StripModel, rng: &mut R) -> PotentialColumn {
    let mut values = vec![0.0; model.width];
    fill_column(model.disorder, rng, &mut values);
    PotentialColumn { values }
}

pub(crate) fn fill_column<R: Rng + ?Sized>(law: DisorderLaw, rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = law.sample(rng);
    }
}

/// `T = [[Δ_L + λV - E, -1], [1, 0]]`.
pub fn build_transfer(model: &StripModel, column: &PotentialColumn) -> TransferMatrix {
    let width = model.width;
    assert_eq!(column.len(), width, "potential column length must equal the strip width");
    let delta = laplacian(width);
    let mut t = DMatrix::zeros(2 * width, 2 * width);
    for r in 0..width {
        for c in 0..width {
            t[(r, c)] = delta[(r, c)];
        }
        t[(r, r)] += model.coupling * column.values[r] - model.energy;
        t[(r, r + width)] = -1.0;
        t[(r + width, r)] = 1.0;
    }
    TransferMatrix { entries: t }
}
