//! Channel decomposition of the free transfer matrix.
//!
//! Fourier modes are labeled `q = 0..L` with `q = 0` the constant mode. Channel
//! `j = 0..=L/2` collects the modes `{j, L - j}`; channel 0 and, for even `L`,
//! channel `L/2` are simple. Each channel carries `μ_j = ε_j - E` where `ε_j`
//! is the Laplacian eigenvalue, and is elliptic (`|μ| < 2`, rotation by `η`
//! with `2 cos η = μ`) or hyperbolic (`|μ| > 2`, expansion by `η` with
//! `2 cosh η = |μ|`).

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::laplacian_eigenvalue;

/// `| |μ| - 2 |` below this is treated as parabolic.
pub const PARABOLIC_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_HYPOTHESIS_TOLERANCE: f64 = 1e-6;
/// Residuals below this (but above the tolerance) are reported as warnings.
pub const NEAR_RESONANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Elliptic,
    Hyperbolic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub index: usize,
    pub mu: f64,
    pub kind: ChannelKind,
    /// Rotation angle in `(0, π)` or hyperbolic angle `> 0`.
    pub eta: f64,
    /// `sin(η)^(-1/2)` or `sinh(η)^(-1/2)`.
    pub h: f64,
    pub nu: usize,
    pub fourier_indices: Vec<usize>,
}

impl Channel {
    pub fn is_elliptic(&self) -> bool {
        self.kind == ChannelKind::Elliptic
    }

    /// `1` for elliptic, `i` for hyperbolic channels.
    pub fn g(&self) -> Complex64 {
        match self.kind {
            ChannelKind::Elliptic => Complex64::new(1.0, 0.0),
            ChannelKind::Hyperbolic => Complex64::new(0.0, 1.0),
        }
    }

    pub fn g_squared(&self) -> f64 {
        match self.kind {
            ChannelKind::Elliptic => 1.0,
            ChannelKind::Hyperbolic => -1.0,
        }
    }

    pub fn h_squared(&self) -> f64 {
        self.h * self.h
    }

    pub fn mu_sign(&self) -> f64 {
        if self.mu < 0.0 {
            -1.0
        } else {
            1.0
        }
    }

    /// Eigenvalue of the normal form `R` on `w^±` of this channel.
    ///
    /// Elliptic: `e^{±iη}`. Hyperbolic: `μ/2 ± sinh η`, which is `e^{±η}` for
    /// `μ > 2` and `-e^{∓η}` for `μ < -2`.
    pub fn eigenvalue(&self, sign: f64) -> Complex64 {
        match self.kind {
            ChannelKind::Elliptic => Complex64::from_polar(1.0, sign * self.eta),
            ChannelKind::Hyperbolic => Complex64::new(0.5 * self.mu + sign * self.eta.sinh(), 0.0),
        }
    }

    /// The sign `s` such that `w^s` is the expanding direction of a hyperbolic channel.
    pub fn expanding_sign(&self) -> f64 {
        self.mu_sign()
    }

    /// `cosh((1 - g²) η)`: 1 on elliptic channels, `cosh 2η` on hyperbolic ones.
    pub fn cosh_weight(&self) -> f64 {
        ((1.0 - self.g_squared()) * self.eta).cosh()
    }
}

/// Spectral data of all `⌊L/2⌋ + 1` channels at one energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelData {
    pub width: usize,
    pub energy: f64,
    pub channels: Vec<Channel>,
    /// Channel index of each Fourier mode.
    pub channel_of_mode: Vec<usize>,
    pub h_av_sq: f64,
}

impl ChannelData {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// `⌊L/2⌋`, the largest channel index.
    pub fn l_c(&self) -> usize {
        self.width / 2
    }

    pub fn hyperbolic(&self) -> impl Iterator<Item = &Channel> {
        self.channels.iter().filter(|c| !c.is_elliptic())
    }

    pub fn elliptic(&self) -> impl Iterator<Item = &Channel> {
        self.channels.iter().filter(|c| c.is_elliptic())
    }

    pub fn hyperbolic_indices(&self) -> Vec<usize> {
        self.hyperbolic().map(|c| c.index).collect()
    }

    /// Number of hyperbolic channels minus one (`-1` if there are none).
    pub fn l_h(&self) -> i64 {
        self.hyperbolic().count() as i64 - 1
    }

    pub fn all_elliptic(&self) -> bool {
        self.channels.iter().all(Channel::is_elliptic)
    }

    pub fn any_elliptic(&self) -> bool {
        self.channels.iter().any(Channel::is_elliptic)
    }

    /// Number of frame slots taken by hyperbolic channels (`Σ ν` over hyperbolic channels).
    pub fn hyperbolic_slots(&self) -> usize {
        self.hyperbolic().map(|c| c.nu).sum()
    }

    /// Hyperbolic channels in order of decreasing expansion rate, i.e. the
    /// order in which they capture the leading frame slots.
    pub fn hyperbolic_by_rate(&self) -> Vec<&Channel> {
        let mut hyp: Vec<&Channel> = self.hyperbolic().collect();
        hyp.sort_by(|a, b| b.eta.total_cmp(&a.eta).then(a.index.cmp(&b.index)));
        hyp
    }

    /// Expansion exponent of each frame slot `p = 1..=L` at zero coupling.
    pub fn slot_exponents(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width);
        for c in self.hyperbolic_by_rate() {
            out.extend(std::iter::repeat_n(c.eta, c.nu));
        }
        out.resize(self.width, 0.0);
        out
    }

    /// The channel aligned with each hyperbolic slot (same order as [`slot_exponents`](Self::slot_exponents)).
    pub fn slot_channels(&self) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.width);
        for c in self.hyperbolic_by_rate() {
            out.extend(std::iter::repeat_n(Some(c.index), c.nu));
        }
        out.resize(self.width, None);
        out
    }
}

/// Channel decomposition at width `L` and energy `E`.
pub fn channel_spectrum(width: usize, energy: f64) -> Result<ChannelData> {
    if width == 0 {
        return Err(Error::InvalidArgument("strip width must be at least 1".into()));
    }
    if !energy.is_finite() {
        return Err(Error::InvalidArgument("energy must be finite".into()));
    }
    let l_c = width / 2;
    let mut channels = Vec::with_capacity(l_c + 1);
    let mut channel_of_mode = vec![0; width];
    for j in 0..=l_c {
        let fourier_indices = if j == 0 || 2 * j == width { vec![j] } else { vec![j, width - j] };
        for &q in &fourier_indices {
            channel_of_mode[q] = j;
        }
        let mu = laplacian_eigenvalue(width, j) - energy;
        let abs = mu.abs();
        if (abs - 2.0).abs() <= PARABOLIC_TOLERANCE {
            return Err(Error::ParabolicChannel { channel: j, mu });
        }
        let (kind, eta, h) = if abs < 2.0 {
            let sin = 0.5 * (4.0 - mu * mu).sqrt();
            (ChannelKind::Elliptic, sin.atan2(0.5 * mu), sin.powf(-0.5))
        } else {
            let t = 0.5 * abs - 1.0;
            let sinh = (t * (t + 2.0)).sqrt();
            (ChannelKind::Hyperbolic, (t + sinh).ln_1p(), sinh.powf(-0.5))
        };
        channels.push(Channel { index: j, mu, kind, eta, h, nu: fourier_indices.len(), fourier_indices });
    }
    let mut data = ChannelData { width, energy, channels, channel_of_mode, h_av_sq: 0.0 };
    data.h_av_sq = h_av_squared(&data);
    Ok(data)
}

/// Closed interval of reals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// Spectrum of the free strip operator: the union of the channel bands `[ε_q - 2, ε_q + 2]`.
///
/// `[-4, 4]` for even `L > 2`, `[-4, 2 + 2cos(π/L)]` for odd `L > 1`; `[-2, 2]`
/// for `L = 1` and `[-3, 3]` for `L = 2` under the Laplacian conventions used there.
pub fn free_spectrum_interval(width: usize) -> Interval {
    let (lo, hi) = (0..width.max(1))
        .map(|q| laplacian_eigenvalue(width.max(1), q))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| (lo.min(e), hi.max(e)));
    Interval { lo: lo - 2.0, hi: hi + 2.0 }
}

/// One resonance `e^{iθ} ≈ 1` among the elliptic phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resonance {
    /// Channel indices: `(k, j)` for pair relations, `(k, l, m, j)` for quadruple ones.
    pub channels: Vec<usize>,
    pub sigma: i8,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub satisfied: bool,
    pub violations: Vec<Resonance>,
    /// Relations with residual below [`NEAR_RESONANCE`] that still pass the tolerance.
    pub warnings: Vec<Resonance>,
    pub tolerance: f64,
}

fn phase_residual(theta: f64) -> f64 {
    2.0 * (0.5 * theta).sin().abs()
}

/// Checks the non-resonance conditions `e^{i(η_k + σ η_j)} ≠ 1` and
/// `e^{i(η_k + η_l + σ η_m + σ η_j)} ≠ 1` over all elliptic channels, skipping
/// `σ = -1` with `j = k`, resp. `{k, l} = {m, j}`.
pub fn check_main_hypothesis(channels: &ChannelData, tol: f64) -> HypothesisReport {
    let ell: Vec<(usize, f64)> = channels.elliptic().map(|c| (c.index, c.eta)).collect();
    let mut violations = Vec::new();
    let mut warnings = Vec::new();
    let mut record = |chans: Vec<usize>, sigma: i8, theta: f64| {
        let residual = phase_residual(theta);
        if residual < tol {
            violations.push(Resonance { channels: chans, sigma, residual });
        } else if residual < NEAR_RESONANCE {
            warnings.push(Resonance { channels: chans, sigma, residual });
        }
    };
    for sigma in [1i8, -1] {
        let s = sigma as f64;
        for &(k, ek) in &ell {
            for &(j, ej) in &ell {
                if sigma == -1 && j == k {
                    continue;
                }
                record(vec![k, j], sigma, ek + s * ej);
            }
        }
        for &(k, ek) in &ell {
            for &(l, el) in &ell {
                for &(m, em) in &ell {
                    for &(j, ej) in &ell {
                        if sigma == -1 && ((k == m && l == j) || (k == j && l == m)) {
                            continue;
                        }
                        record(vec![k, l, m, j], sigma, ek + el + s * (em + ej));
                    }
                }
            }
        }
    }
    HypothesisReport { satisfied: violations.is_empty(), violations, warnings, tolerance: tol }
}

/// `h²_av = (1/L) Σ_k ν_k h_k² cosh((1 - g_k²) η_k)`.
pub fn h_av_squared(channels: &ChannelData) -> f64 {
    channels.channels.iter().map(|c| c.nu as f64 * c.h_squared() * c.cosh_weight()).sum::<f64>()
        / channels.width as f64
}
