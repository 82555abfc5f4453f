use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use striplyap_core::DisorderLaw;

#[derive(Debug, Parser)]
#[command(name = "striplyap", version, about = "Lyapunov spectra of the Anderson model on a strip")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Channel decomposition of the free transfer matrix and the non-resonance check.
    Analyze(AnalyzeArgs),
    /// Monte-Carlo estimate of the Lyapunov spectrum.
    Estimate(EstimateArgs),
    /// Direct estimates next to the perturbative formulas and bounds, one row per sweep point.
    Compare(EstimateArgs),
    /// Exact identities, moment formulas and trajectory checks.
    Verify(VerifyArgs),
    /// Mean-field channel weights.
    Meanfield(MeanfieldArgs),
}

/// `start:stop:count`, inclusive, `count ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sweep {
    pub start: f64,
    pub stop: f64,
    pub count: usize,
}

impl Sweep {
    pub fn points(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.start];
        }
        let step = (self.stop - self.start) / (self.count - 1) as f64;
        (0..self.count).map(|i| if i + 1 == self.count { self.stop } else { self.start + step * i as f64 }).collect()
    }
}

impl FromStr for Sweep {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let [a, b, n] = parts.as_slice() else {
            return Err(format!("expected start:stop:count, got {s:?}"));
        };
        let start: f64 = a.trim().parse().map_err(|e| format!("bad start {a:?}: {e}"))?;
        let stop: f64 = b.trim().parse().map_err(|e| format!("bad stop {b:?}: {e}"))?;
        let count: usize = n.trim().parse().map_err(|e| format!("bad count {n:?}: {e}"))?;
        if count == 0 {
            return Err("sweep count must be at least 1".into());
        }
        if !start.is_finite() || !stop.is_finite() {
            return Err("sweep bounds must be finite".into());
        }
        Ok(Sweep { start, stop, count })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Text,
    Csv,
    Json,
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Text => "text",
            Format::Csv => "csv",
            Format::Json => "json",
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output format. Defaults to text for analyze/verify/meanfield and csv for estimate/compare.
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Args)]
pub struct WidthArg {
    /// Strip width L.
    #[arg(short = 'L', long)]
    pub width: usize,
}

#[derive(Debug, Clone, Args)]
pub struct EnergyArgs {
    /// Energy E.
    #[arg(short = 'E', long, allow_negative_numbers = true, conflicts_with = "sweep_energy", required_unless_present = "sweep_energy")]
    pub energy: Option<f64>,
    /// Energy sweep `start:stop:count`.
    #[arg(long, allow_hyphen_values = true)]
    pub sweep_energy: Option<Sweep>,
}

impl EnergyArgs {
    pub fn points(&self) -> Vec<f64> {
        match (self.energy, self.sweep_energy) {
            (Some(e), _) => vec![e],
            (None, Some(s)) => s.points(),
            (None, None) => unreachable!("clap requires one of --energy / --sweep-energy"),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub width: WidthArg,
    #[command(flatten)]
    pub energy: EnergyArgs,
    /// Tolerance of the non-resonance check.
    #[arg(long, default_value_t = striplyap_core::spectral::DEFAULT_HYPOTHESIS_TOLERANCE)]
    pub tolerance: f64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct DisorderArgs {
    /// Disorder law: rademacher, uniform or gaussian.
    #[arg(long = "dist", default_value_t = DisorderLaw::default())]
    pub dist: DisorderLaw,
    /// Base seed of all random streams.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub width: WidthArg,
    #[command(flatten)]
    pub energy: EnergyArgs,
    /// Coupling λ.
    #[arg(long, allow_negative_numbers = true, conflicts_with = "sweep_lambda", required_unless_present = "sweep_lambda")]
    pub lambda: Option<f64>,
    /// Coupling sweep `start:stop:count`.
    #[arg(long, allow_hyphen_values = true)]
    pub sweep_lambda: Option<Sweep>,
    /// Steps per trajectory, burn-in included.
    #[arg(long, default_value_t = 1_000_000)]
    pub steps: u64,
    /// Discarded initial steps; defaults to max(1000, 10/λ²) capped at half the steps.
    #[arg(long)]
    pub burn_in: Option<u64>,
    #[arg(long, default_value_t = 8)]
    pub trajectories: usize,
    #[command(flatten)]
    pub disorder: DisorderArgs,
    /// Iterate the raw transfer matrices instead of the normal-form factors.
    #[arg(long)]
    pub raw: bool,
    /// Disable the control variate on the log growth.
    #[arg(long)]
    pub no_control_variate: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

impl EstimateArgs {
    pub fn lambdas(&self) -> Vec<f64> {
        match (self.lambda, self.sweep_lambda) {
            (Some(l), _) => vec![l],
            (None, Some(s)) => s.points(),
            (None, None) => unreachable!("clap requires one of --lambda / --sweep-lambda"),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub width: WidthArg,
    /// Energy E.
    #[arg(short = 'E', long, allow_negative_numbers = true)]
    pub energy: f64,
    /// Coupling λ used by the algebraic and trajectory checks.
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    /// Random potentials and frames for the algebraic checks.
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Monte-Carlo draws for the moment checks; 0 skips them.
    #[arg(long, default_value_t = 20_000)]
    pub draws: usize,
    /// Steps of the trajectory checks; 0 skips them.
    #[arg(long, default_value_t = 0)]
    pub steps: u64,
    #[command(flatten)]
    pub disorder: DisorderArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct MeanfieldArgs {
    #[command(flatten)]
    pub width: WidthArg,
    #[command(flatten)]
    pub energy: EnergyArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_parsing() {
        let s: Sweep = "-0.5:0.5:3".parse().unwrap();
        assert_eq!(s.points(), vec![-0.5, 0.0, 0.5]);
        assert_eq!("1:2:1".parse::<Sweep>().unwrap().points(), vec![1.0]);
        assert!("1:2".parse::<Sweep>().is_err());
        assert!("1:2:0".parse::<Sweep>().is_err());
        assert!("a:2:3".parse::<Sweep>().is_err());
    }

    #[test]
    fn sweep_endpoints_are_exact() {
        let s: Sweep = "0.1:0.7:7".parse().unwrap();
        let p = s.points();
        assert_eq!(p[0], 0.1);
        assert_eq!(p[6], 0.7);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
