//! Second-order formulas for the Lyapunov exponents and the mean-field weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::WeightStats;
use crate::spectral::{free_spectrum_interval, ChannelData};

fn h2(channels: &ChannelData) -> Vec<f64> {
    channels.channels.iter().map(|c| c.h_squared()).collect()
}

fn check_stats(channels: &ChannelData, stats: &WeightStats) -> Result<()> {
    if stats.n_samples == 0 {
        return Err(Error::MissingMoments("no weight samples"));
    }
    if stats.channels != channels.len() {
        return Err(Error::MissingMoments("weight table has the wrong number of channels"));
    }
    Ok(())
}

/// `Σ_{j,k} h_j² h_k² (2 - δ_jk) m(j, k)`.
fn pair_sum(h2: &[f64], m: impl Fn(usize, usize) -> f64) -> f64 {
    let mut s = 0.0;
    for (j, hj) in h2.iter().enumerate() {
        for (k, hk) in h2.iter().enumerate() {
            let w = if j == k { 1.0 } else { 2.0 };
            s += hj * hk * w * m(j, k);
        }
    }
    s
}

/// `γ_L ≈ (λ²/8L) Σ_{j,k} h_j² h_k² (2 - δ_jk) <ρ_{L,j} ρ_{L,k}>`.
pub fn gamma_bottom_formula(channels: &ChannelData, stats: &WeightStats, coupling: f64) -> Result<f64> {
    check_stats(channels, stats)?;
    if stats.slots != channels.width {
        return Err(Error::MissingMoments("bottom-slot moments need a full frame"));
    }
    let l = channels.width as f64;
    Ok(coupling * coupling / (8.0 * l) * pair_sum(&h2(channels), |j, k| stats.second_bottom(j, k)))
}

/// `Σ_l γ_l ≈ (L λ²/8) (h²_av)²`, all channels elliptic.
pub fn gamma_sum_formula(channels: &ChannelData, coupling: f64) -> Result<f64> {
    if !channels.all_elliptic() {
        return Err(Error::HyperbolicPresent);
    }
    Ok(channels.width as f64 * coupling * coupling / 8.0 * channels.h_av_sq * channels.h_av_sq)
}

/// `γ_1 ≈ (λ²/4)[Σ_j h²_av h_j² <ρ_{1,j}> - (1/2L) Σ_{j,k} h_j² h_k² (2 - δ_jk) <ρ_{1,j} ρ_{1,k}>]`.
pub fn gamma_top_formula(channels: &ChannelData, stats: &WeightStats, coupling: f64) -> Result<f64> {
    check_stats(channels, stats)?;
    let h2 = h2(channels);
    let l = channels.width as f64;
    let first: f64 = h2.iter().enumerate().map(|(j, h)| channels.h_av_sq * h * stats.mean(0, j)).sum();
    let second = pair_sum(&h2, |j, k| stats.second_top(j, k)) / (2.0 * l);
    Ok(coupling * coupling / 4.0 * (first - second))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    /// `λ²/(8L)`.
    pub lower_bulk: f64,
    /// `λ²/(8L|ε|)` with `ε = E - E_b`.
    pub lower_edge: Option<f64>,
    pub epsilon: Option<f64>,
}

/// Lower bounds on `γ_L`; `band_edge` enables the band-edge bound.
pub fn gamma_bottom_bounds(channels: &ChannelData, coupling: f64, band_edge: Option<f64>) -> Result<Bounds> {
    let spec = free_spectrum_interval(channels.width);
    let energy = channels.energy;
    if !spec.contains(energy) {
        return Err(Error::OutsideSpectrum { energy, lo: spec.lo, hi: spec.hi });
    }
    let lower_bulk = coupling * coupling / (8.0 * channels.width as f64);
    let epsilon = band_edge.map(|eb| energy - eb);
    if epsilon == Some(0.0) {
        return Err(Error::InvalidArgument("energy coincides with the band edge".into()));
    }
    Ok(Bounds { lower_bulk, lower_edge: epsilon.map(|e| lower_bulk / e.abs()), epsilon })
}

/// Band edge of the free spectrum closest to `energy`.
pub fn nearest_band_edge(width: usize, energy: f64) -> f64 {
    let spec = free_spectrum_interval(width);
    if (energy - spec.lo).abs() <= (spec.hi - energy).abs() {
        spec.lo
    } else {
        spec.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldWeights {
    /// `<ρ_{1,k}> = 1/(1 + Z sin η_k)`.
    pub rho1: Vec<f64>,
    pub z: f64,
    /// `|Σ_k <ρ_{1,k}> - 1|`.
    pub residual: f64,
}

/// Solves `Σ_k 1/(1 + Z sin η_k) = 1` for `Z ≥ 0`.
pub fn meanfield_weights(channels: &ChannelData) -> Result<MeanFieldWeights> {
    if !channels.all_elliptic() {
        return Err(Error::HyperbolicPresent);
    }
    let sines: Vec<f64> = channels.channels.iter().map(|c| c.eta.sin()).collect();
    let f = |z: f64| sines.iter().map(|s| 1.0 / (1.0 + z * s)).sum::<f64>() - 1.0;
    let z = if sines.len() == 1 {
        0.0
    } else {
        let mut hi = 1.0;
        while f(hi) > 0.0 {
            hi *= 2.0;
            if !hi.is_finite() {
                return Err(Error::NumericalDegeneracy { what: "mean-field bracket", residual: f(hi) });
            }
        }
        let mut lo = 0.0;
        while hi - lo > 1e-15 * hi {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mut z = 0.5 * (lo + hi);
        // Newton polish
        for _ in 0..3 {
            let df: f64 = -sines.iter().map(|s| s / (1.0 + z * s).powi(2)).sum::<f64>();
            let step = f(z) / df;
            if step.is_finite() {
                z -= step;
            }
        }
        z
    };
    let rho1: Vec<f64> = sines.iter().map(|s| 1.0 / (1.0 + z * s)).collect();
    let residual = (rho1.iter().sum::<f64>() - 1.0).abs();
    Ok(MeanFieldWeights { rho1, z, residual })
}

/// The four terms of the stationarity condition for `<ρ_{1,k}>`, each with its `1/(2L)` prefactor.
pub fn meanfield_terms(channels: &ChannelData, stats: &WeightStats) -> Result<Vec<[f64; 4]>> {
    check_stats(channels, stats)?;
    if !stats.has_third_moments() {
        return Err(Error::MissingMoments("third moments of the top-slot weights"));
    }
    let h2 = h2(channels);
    let nu: Vec<f64> = channels.channels.iter().map(|c| c.nu as f64).collect();
    let nc = h2.len();
    let pre = 1.0 / (2.0 * channels.width as f64);
    let nu_h2: f64 = nu.iter().zip(&h2).map(|(n, h)| n * h).sum();
    let out = (0..nc)
        .map(|k| {
            let t1: f64 = (0..nc).map(|l| nu[k] * h2[k] * h2[l] * stats.mean(0, l)).sum();
            let t2: f64 = (0..nc).map(|l| nu_h2 * h2[l] * stats.second_top(l, k)).sum();
            let t3 = pair_sum(&h2, |l, m| stats.third_top(l, m, k).unwrap());
            let t4: f64 = (0..nc)
                .map(|l| h2[l] * h2[k] * if l == k { 1.0 } else { 2.0 } * stats.second_top(l, k))
                .sum();
            [pre * t1, -pre * t2, pre * t3, -pre * t4]
        })
        .collect();
    Ok(out)
}

/// Residual of the stationarity condition for each channel `k`.
pub fn meanfield_residual(channels: &ChannelData, stats: &WeightStats) -> Result<Vec<f64>> {
    Ok(meanfield_terms(channels, stats)?.iter().map(|t| t.iter().sum()).collect())
}
