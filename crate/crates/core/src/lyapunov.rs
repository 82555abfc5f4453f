//! Monte-Carlo estimation of Lyapunov spectra.
//!
//! Trajectories are independent (each owns its disorder and frame streams)
//! and run in parallel on the global rayon pool. Outputs are merged in
//! trajectory order, so results do not depend on scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{default_burn_in, run_trajectory, Coordinates, TrajectoryConfig, TrajectoryOutput, WeightStats};
use crate::model::StripModel;
use crate::normalform::{build_normal_form, NormalFormData};
use crate::spectral::channel_spectrum;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    /// Steps per trajectory, burn-in included.
    pub steps: u64,
    /// Defaults to `max(10³, ⌈10/λ²⌉)`.
    pub burn_in: Option<u64>,
    pub trajectories: usize,
    pub coordinates: Coordinates,
    pub track_weights: bool,
    pub third_moments: bool,
    pub control_variate: bool,
    pub batch_len: usize,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            steps: 1_000_000,
            burn_in: None,
            trajectories: 8,
            coordinates: Coordinates::Normal,
            track_weights: true,
            third_moments: false,
            control_variate: true,
            batch_len: 1000,
        }
    }
}

impl EstimateConfig {
    pub fn new(steps: u64, trajectories: usize) -> Self {
        EstimateConfig { steps, trajectories, ..Default::default() }
    }

    pub fn resolved_burn_in(&self, coupling: f64) -> u64 {
        self.burn_in.unwrap_or_else(|| default_burn_in(coupling))
    }

    fn trajectory_config(&self, coupling: f64, frame_size: Option<usize>) -> TrajectoryConfig {
        let mut t = TrajectoryConfig::new(self.steps, self.resolved_burn_in(coupling));
        t.frame_size = frame_size;
        t.coordinates = self.coordinates;
        t.track_weights = self.track_weights;
        t.third_moments = self.third_moments;
        t.control_variate = self.control_variate;
        t.batch_len = self.batch_len;
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovEstimate {
    pub model: StripModel,
    /// `γ_1 ≥ … ≥ γ_L`.
    pub gammas: Vec<f64>,
    pub stderrs: Vec<f64>,
    /// `Σ γ_l` estimated from the log volume.
    pub sum: f64,
    pub sum_stderr: f64,
    pub steps: u64,
    pub burn_in: u64,
    pub trajectories: usize,
    pub n_batches: u64,
    pub coordinates: Coordinates,
    pub control_variate: bool,
    pub weights: Option<WeightStats>,
    pub max_sum_rule_defect: f64,
    pub max_frame_defect: f64,
}

impl LyapunovEstimate {
    /// `(γ_L, stderr)`.
    pub fn bottom(&self) -> (f64, f64) {
        (*self.gammas.last().unwrap(), *self.stderrs.last().unwrap())
    }

    /// `(γ_1, stderr)`.
    pub fn top(&self) -> (f64, f64) {
        (self.gammas[0], self.stderrs[0])
    }
}

/// Runs all trajectories and merges them in index order.
pub(crate) fn run_trajectories(
    model: &StripModel,
    nf: &NormalFormData,
    config: &TrajectoryConfig,
    trajectories: usize,
) -> Result<TrajectoryOutput> {
    if trajectories == 0 {
        return Err(Error::InvalidArgument("at least one trajectory is required".into()));
    }
    let outs: Vec<TrajectoryOutput> = (0..trajectories as u64)
        .into_par_iter()
        .map(|t| run_trajectory(model, nf, config, t))
        .collect::<Result<_>>()?;
    let mut iter = outs.into_iter();
    let mut merged = iter.next().unwrap();
    for o in iter {
        merged.merge(&o);
    }
    Ok(merged)
}

/// Estimates the non-negative half of the spectrum.
pub fn estimate_spectrum(model: &StripModel, config: &EstimateConfig) -> Result<LyapunovEstimate> {
    model.validate()?;
    let nf = build_normal_form(&channel_spectrum(model.width, model.energy)?)?;
    estimate_with_normal_form(model, &nf, config)
}

pub fn estimate_with_normal_form(
    model: &StripModel,
    nf: &NormalFormData,
    config: &EstimateConfig,
) -> Result<LyapunovEstimate> {
    let tcfg = config.trajectory_config(model.coupling, None);
    let out = run_trajectories(model, nf, &tcfg, config.trajectories)?;
    Ok(LyapunovEstimate {
        model: model.clone(),
        gammas: out.log_growth.iter().map(|b| b.mean()).collect(),
        stderrs: out.log_growth.iter().map(|b| b.stderr()).collect(),
        sum: out.volume.mean(),
        sum_stderr: out.volume.stderr(),
        steps: config.steps,
        burn_in: tcfg.burn_in,
        trajectories: config.trajectories,
        n_batches: out.volume.n_batches(),
        coordinates: config.coordinates,
        control_variate: tcfg.control_variate,
        weights: out.weights,
        max_sum_rule_defect: out.max_sum_rule_defect,
        max_frame_defect: out.max_frame_defect,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartialSum {
    pub p: usize,
    pub value: f64,
    pub stderr: f64,
}

/// `Σ_{l ≤ p} γ_l` from the volume growth of a `p`-frame.
pub fn estimate_partial_sum(model: &StripModel, p: usize, config: &EstimateConfig) -> Result<PartialSum> {
    model.validate()?;
    if p == 0 || p > model.width {
        return Err(Error::InvalidArgument(format!("partial sum index {p} must be in 1..={}", model.width)));
    }
    let nf = build_normal_form(&channel_spectrum(model.width, model.energy)?)?;
    let mut tcfg = config.trajectory_config(model.coupling, Some(p));
    tcfg.track_weights = false;
    let out = run_trajectories(model, &nf, &tcfg, config.trajectories)?;
    Ok(PartialSum { p, value: out.volume.mean(), stderr: out.volume.stderr() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DisorderLaw;

    fn model(width: usize, energy: f64, coupling: f64) -> StripModel {
        StripModel::new(width, energy, coupling, DisorderLaw::Rademacher, 2024).unwrap()
    }

    #[test]
    fn zero_coupling_elliptic_spectrum_vanishes() {
        let est = estimate_spectrum(&model(13, -0.03, 0.0), &EstimateConfig::new(3000, 2)).unwrap();
        assert!(est.gammas.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn zero_coupling_mixed_spectrum_equals_hyperbolic_angles() {
        let est = estimate_spectrum(&model(13, 0.95, 0.0), &EstimateConfig::new(4000, 2)).unwrap();
        let ch = channel_spectrum(13, 0.95).unwrap();
        let eta: Vec<f64> = ch.channels.iter().map(|c| c.eta).collect();
        let want = [eta[0], eta[1], eta[1], eta[2], eta[2]];
        for (p, g) in est.gammas.iter().enumerate() {
            let w = if p < 5 { want[p] } else { 0.0 };
            assert!((g - w).abs() < 1e-8, "slot {p}: {g} vs {w}");
        }
    }

    #[test]
    fn seed_determinism() {
        let cfg = EstimateConfig::new(5000, 3);
        let a = estimate_spectrum(&model(4, 0.3, 0.2), &cfg).unwrap();
        let b = estimate_spectrum(&model(4, 0.3, 0.2), &cfg).unwrap();
        assert_eq!(a, b);
        let c = estimate_spectrum(&model(4, 0.3, 0.2).with_coupling(0.21), &cfg).unwrap();
        assert_ne!(a.gammas, c.gammas);
    }

    #[test]
    fn partial_sums_match_full_spectrum() {
        let m = model(3, 0.4, 0.3);
        let cfg = EstimateConfig { track_weights: false, ..EstimateConfig::new(100_000, 4) };
        let full = estimate_spectrum(&m, &cfg).unwrap();
        let p1 = estimate_partial_sum(&m, 1, &cfg).unwrap();
        let se = p1.stderr.hypot(full.stderrs[0]);
        assert!((p1.value - full.gammas[0]).abs() < 3.0 * se + 1e-12, "{} vs {}", p1.value, full.gammas[0]);
        let p3 = estimate_partial_sum(&m, 3, &cfg).unwrap();
        let se = p3.stderr.hypot(full.sum_stderr);
        assert!((p3.value - full.sum).abs() < 3.0 * se + 1e-12);
        let summed: f64 = full.gammas.iter().sum();
        assert!((summed - full.sum).abs() < 1e-12);
        assert!(estimate_partial_sum(&m, 4, &cfg).is_err());
    }

    #[test]
    fn spectrum_is_ordered_and_nonnegative() {
        let cfg = EstimateConfig { track_weights: false, ..EstimateConfig::new(100_000, 2) };
        let est = estimate_spectrum(&model(5, -0.2, 0.4), &cfg).unwrap();
        for p in 0..4 {
            assert!(est.gammas[p] + 2.0 * (est.stderrs[p] + est.stderrs[p + 1]) >= est.gammas[p + 1]);
        }
        let (g, se) = est.bottom();
        assert!(g >= -2.0 * se);
    }

    #[test]
    fn parabolic_model_is_rejected() {
        assert!(matches!(
            estimate_spectrum(&model(4, 0.0, 0.1), &EstimateConfig::new(10, 1)),
            Err(Error::ParabolicChannel { .. })
        ));
    }
}
