//! Symplectic frames and their random dynamics.
//!
//! A frame is a `2L x p` real matrix with orthonormal, mutually isotropic
//! columns. A symplectic map acts by `u ↦ Gram-Schmidt(T u)`; the logarithms
//! of the Gram-Schmidt diagonal are the per-slot expansions whose time
//! averages are the Lyapunov exponents.
//!
//! Trajectories normally run in normal-form coordinates with the factor
//! `R (1 - λ P(n))`, where channel projections are constant. Raw coordinates
//! apply `T(n)` directly and are kept as a cross-check.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::model::{disorder_stream, fill_column, frame_stream, StripModel, TransferMatrix};
use crate::normalform::NormalFormData;
use crate::stats::BatchMeans;

/// Gram-Schmidt norms below this are a rank collapse.
const COLLAPSE_NORM: f64 = 1e-290;

#[derive(Debug, Clone, PartialEq)]
pub struct SymplecticFrame {
    pub columns: DMatrix<f64>,
}

impl SymplecticFrame {
    pub fn new(columns: DMatrix<f64>) -> Self {
        SymplecticFrame { columns }
    }

    pub fn width(&self) -> usize {
        self.columns.nrows() / 2
    }

    pub fn size(&self) -> usize {
        self.columns.ncols()
    }

    /// `max |uᵗu - 1|`.
    pub fn orthonormality_residual(&self) -> f64 {
        let g = self.columns.transpose() * &self.columns;
        crate::linalg::identity_residual(&g)
    }

    /// `max |<u_l|J|u_k>|`.
    pub fn isotropy_residual(&self) -> f64 {
        let j = crate::linalg::symplectic_form(self.width());
        crate::linalg::max_abs(&(self.columns.transpose() * j * &self.columns))
    }

    /// Isotropy for the twisted form `[[0, -G], [G, 0]]`, `G = diag(form)`.
    pub fn isotropy_residual_with(&self, form: &[f64]) -> f64 {
        let p = self.size();
        let mut worst = 0.0f64;
        for a in 0..p {
            for b in a + 1..p {
                let x = dot_j(form, self.columns.column(a).as_slice(), self.columns.column(b).as_slice());
                worst = worst.max(x.abs());
            }
        }
        worst
    }

    /// `Π = u uᵗ`.
    pub fn projection(&self) -> DMatrix<f64> {
        &self.columns * self.columns.transpose()
    }

    /// `(u, J u)`: orthogonal and symplectic when `p = L`.
    pub fn unitary_extension(&self) -> DMatrix<f64> {
        let (n, p) = self.columns.shape();
        let mut out = DMatrix::zeros(n, 2 * p);
        out.columns_mut(0, p).copy_from(&self.columns);
        let ju = crate::linalg::symplectic_form(n / 2) * &self.columns;
        out.columns_mut(p, p).copy_from(&ju);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub frame: SymplecticFrame,
    pub log_expansions: Vec<f64>,
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `Σ_q g²_q (u_q v_{q+L} - u_{q+L} v_q)`, i.e. `<K u, v>` with `K u = (-G u_bot, G u_top)`.
#[inline]
fn dot_j(form: &[f64], u: &[f64], v: &[f64]) -> f64 {
    let l = form.len();
    let mut acc = 0.0;
    for q in 0..l {
        acc += form[q] * (u[q] * v[q + l] - u[q + l] * v[q]);
    }
    acc
}

/// `v += a K u`.
#[inline]
fn axpy_j(form: &[f64], a: f64, u: &[f64], v: &mut [f64]) {
    let l = form.len();
    for q in 0..l {
        let ag = a * form[q];
        v[q] -= ag * u[q + l];
        v[q + l] += ag * u[q];
    }
}

/// Modified Gram-Schmidt with one re-orthogonalization pass. Writes `log r_kk` to `logs`.
pub(crate) fn orthonormalize(cols: &mut DMatrix<f64>, logs: &mut [f64]) -> Result<()> {
    let (n, p) = cols.shape();
    let data = cols.as_mut_slice();
    for k in 0..p {
        let (done, rest) = data.split_at_mut(k * n);
        let v = &mut rest[..n];
        for _ in 0..2 {
            for i in 0..k {
                let u = &done[i * n..(i + 1) * n];
                let c = dot(u, v);
                axpy(-c, u, v);
            }
        }
        let norm = dot(v, v).sqrt();
        if !(norm > COLLAPSE_NORM && norm.is_finite()) {
            return Err(Error::RankCollapse { slot: k, norm });
        }
        logs[k] = norm.ln();
        let inv = 1.0 / norm;
        v.iter_mut().for_each(|x| *x *= inv);
    }
    Ok(())
}

/// Re-imposes isotropy: orthogonalizes each column against `u_i` and `J u_i`, `i < k`.
/// Re-orthonormalizes while restoring isotropy for the form `[[0, -G], [G, 0]]`, `G = diag(form)`.
pub(crate) fn reproject(cols: &mut DMatrix<f64>, form: &[f64]) -> Result<()> {
    let (n, p) = cols.shape();
    let data = cols.as_mut_slice();
    for k in 0..p {
        let (done, rest) = data.split_at_mut(k * n);
        let v = &mut rest[..n];
        for _ in 0..2 {
            for i in 0..k {
                let u = &done[i * n..(i + 1) * n];
                let c = dot_j(form, u, v);
                axpy_j(form, -c, u, v);
                let c = dot(u, v);
                axpy(-c, u, v);
            }
        }
        let norm = dot(v, v).sqrt();
        if !(norm > COLLAPSE_NORM && norm.is_finite()) {
            return Err(Error::RankCollapse { slot: k, norm });
        }
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(())
}

/// Random `p`-frame: symplectic Gram-Schmidt of i.i.d. Gaussian vectors.
pub fn random_frame<R: Rng + ?Sized>(rng: &mut R, width: usize, p: usize) -> Result<SymplecticFrame> {
    if width == 0 || p == 0 || p > width {
        return Err(Error::InvalidArgument(format!("frame size {p} must be in 1..={width}")));
    }
    let n = 2 * width;
    let form = vec![1.0; width];
    let mut cols = DMatrix::zeros(n, p);
    let data = cols.as_mut_slice();
    for k in 0..p {
        let (done, rest) = data.split_at_mut(k * n);
        let v = &mut rest[..n];
        loop {
            v.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
            for _ in 0..2 {
                for i in 0..k {
                    let u = &done[i * n..(i + 1) * n];
                    let c = dot_j(&form, u, v);
                    axpy_j(&form, -c, u, v);
                    let c = dot(u, v);
                    axpy(-c, u, v);
                }
            }
            let norm = dot(v, v).sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                break;
            }
        }
    }
    Ok(SymplecticFrame { columns: cols })
}

/// A linear map acting on frame columns in place.
pub trait FrameMap {
    fn apply(&self, cols: &mut DMatrix<f64>);
}

impl FrameMap for DMatrix<f64> {
    fn apply(&self, cols: &mut DMatrix<f64>) {
        *cols = self * &*cols;
    }
}

impl FrameMap for TransferMatrix {
    fn apply(&self, cols: &mut DMatrix<f64>) {
        self.entries.apply(cols);
    }
}

/// The normal-form factor `R (1 - λ P)` for one potential column.
pub struct NormalFormFactor<'a> {
    pub nf: &'a NormalFormData,
    pub column: &'a [f64],
    pub coupling: f64,
}

impl FrameMap for NormalFormFactor<'_> {
    fn apply(&self, cols: &mut DMatrix<f64>) {
        let mut scratch = NormalScratch::new(self.nf.width, cols.ncols());
        scratch.perturb(self.nf, self.column, self.coupling, cols, None);
        apply_r(self.nf, cols);
    }
}

/// `𝒰_T`: maps `u` to the orthonormalized `T u` and reports the per-slot log growth.
pub fn frame_action<T: FrameMap + ?Sized>(t: &T, frame: &SymplecticFrame) -> Result<StepResult> {
    let mut cols = frame.columns.clone();
    t.apply(&mut cols);
    let mut logs = vec![0.0; cols.ncols()];
    orthonormalize(&mut cols, &mut logs)?;
    Ok(StepResult { frame: SymplecticFrame { columns: cols }, log_expansions: logs })
}

struct NormalScratch {
    z: DMatrix<f64>,
    y: DMatrix<f64>,
}

impl NormalScratch {
    fn new(width: usize, p: usize) -> Self {
        NormalScratch { z: DMatrix::zeros(width, p), y: DMatrix::zeros(width, p) }
    }

    /// `bottom -= λ B top`. With `cv`, also writes the first-order term of each slot's log growth.
    fn perturb(
        &mut self,
        nf: &NormalFormData,
        column: &[f64],
        coupling: f64,
        cols: &mut DMatrix<f64>,
        cv: Option<&mut [f64]>,
    ) {
        let l = nf.width;
        let p = cols.ncols();
        if coupling == 0.0 {
            if let Some(cv) = cv {
                cv.iter_mut().for_each(|x| *x = 0.0);
            }
            return;
        }
        self.z.gemm(1.0, &nf.mh, &cols.rows(0, l), 0.0);
        for c in 0..p {
            for (zs, &v) in self.z.column_mut(c).iter_mut().zip(column) {
                *zs *= v;
            }
        }
        self.y.gemm(1.0, &nf.ghmt, &self.z, 0.0);
        if let Some(cv) = cv {
            // d/dλ log |R(1 - λP) u| at λ = 0: -<Ru, R P u> / |Ru|²
            for c in 0..p {
                let u = cols.column(c);
                let y = self.y.column(c);
                let (mut num, mut den) = (0.0, 0.0);
                for (q, b) in nf.r_blocks.iter().enumerate() {
                    let (t, s) = (u[q], u[q + l]);
                    let ru0 = b[0] * t + b[1] * s;
                    let ru1 = b[2] * t + b[3] * s;
                    num += ru0 * b[1] * y[q] + ru1 * b[3] * y[q];
                    den += ru0 * ru0 + ru1 * ru1;
                }
                cv[c] = -coupling * num / den;
            }
        }
        cols.rows_mut(l, l).zip_apply(&self.y, |a, b| *a -= coupling * b);
    }
}

fn apply_r(nf: &NormalFormData, cols: &mut DMatrix<f64>) {
    let l = nf.width;
    for mut col in cols.column_iter_mut() {
        for (q, b) in nf.r_blocks.iter().enumerate() {
            let (t, s) = (col[q], col[q + l]);
            col[q] = b[0] * t + b[1] * s;
            col[q + l] = b[2] * t + b[3] * s;
        }
    }
}

/// Raw transfer step `T(n) u` using the ring structure of the Laplacian.
/// With `cv`, writes the first-order term `λ <A u, (V top, 0)> / |A u|²` of each slot.
fn apply_raw(model: &StripModel, column: &[f64], cols: &mut DMatrix<f64>, tmp: &mut [f64], cv: Option<&mut [f64]>) {
    let l = model.width;
    let (lam, e) = (model.coupling, model.energy);
    let mut cv = cv;
    for (c, mut col) in cols.column_iter_mut().enumerate() {
        for r in 0..l {
            let neighbors = match l {
                1 => 0.0,
                2 => -col[1 - r],
                _ => -col[(r + 1) % l] - col[(r + l - 1) % l],
            };
            tmp[r] = neighbors - e * col[r] - col[r + l];
        }
        if let Some(cv) = cv.as_deref_mut() {
            let mut num = 0.0;
            let mut den = 0.0;
            for r in 0..l {
                num += tmp[r] * column[r] * col[r];
                den += tmp[r] * tmp[r] + col[r] * col[r];
            }
            cv[c] = lam * num / den;
        }
        for r in 0..l {
            let top = col[r];
            col[r] = tmp[r] + lam * column[r] * top;
            col[r + l] = top;
        }
    }
}

/// Channel weights `ρ^±_{p,j} = <u_p|π_j^±|u_p>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub slots: usize,
    pub channels: usize,
    /// Row-major `[slot][channel]`.
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
}

impl WeightTable {
    pub fn zeros(slots: usize, channels: usize) -> Self {
        WeightTable { slots, channels, plus: vec![0.0; slots * channels], minus: vec![0.0; slots * channels] }
    }

    pub fn plus(&self, p: usize, j: usize) -> f64 {
        self.plus[p * self.channels + j]
    }

    pub fn minus(&self, p: usize, j: usize) -> f64 {
        self.minus[p * self.channels + j]
    }

    pub fn signed(&self, p: usize, j: usize, sign: f64) -> f64 {
        if sign > 0.0 {
            self.plus(p, j)
        } else {
            self.minus(p, j)
        }
    }

    pub fn total(&self, p: usize, j: usize) -> f64 {
        self.plus(p, j) + self.minus(p, j)
    }

    /// `max_p |Σ_j ρ_{p,j} - 1|`.
    pub fn slot_sum_defect(&self) -> f64 {
        (0..self.slots)
            .map(|p| ((0..self.channels).map(|j| self.total(p, j)).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `max_j |Σ_p ρ_{p,j} - ν_j|` (meaningful for full frames).
    pub fn channel_sum_defect(&self, nu: &[usize]) -> f64 {
        (0..self.channels)
            .map(|j| ((0..self.slots).map(|p| self.total(p, j)).sum::<f64>() - nu[j] as f64).abs())
            .fold(0.0, f64::max)
    }
}

fn fill_weights(cols: &DMatrix<f64>, nf: &NormalFormData, table: &mut WeightTable) {
    let l = nf.width;
    table.plus.iter_mut().for_each(|x| *x = 0.0);
    table.minus.iter_mut().for_each(|x| *x = 0.0);
    let nc = table.channels;
    for (p, u) in cols.column_iter().enumerate() {
        for (idx, entries) in nf.w_sparse.iter().enumerate() {
            let q = idx % l;
            let amp: Complex64 = entries.iter().map(|&(row, w)| w.conj() * u[row]).sum();
            let j = nf.channels.channel_of_mode[q];
            if idx < l {
                table.plus[p * nc + j] += amp.norm_sqr();
            } else {
                table.minus[p * nc + j] += amp.norm_sqr();
            }
        }
    }
}

/// Channel weights of a frame given in normal-form coordinates.
pub fn channel_weights(frame: &SymplecticFrame, nf: &NormalFormData) -> WeightTable {
    let mut table = WeightTable::zeros(frame.size(), nf.channels.len());
    fill_weights(&frame.columns, nf, &mut table);
    table
}

/// Running sums of channel-weight moments. Merging adds sums, so it is exact
/// up to floating-point reassociation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub n_samples: u64,
    pub slots: usize,
    pub channels: usize,
    first_plus: Vec<f64>,
    first_minus: Vec<f64>,
    second_top: Vec<f64>,
    second_bottom: Vec<f64>,
    third_top: Option<Vec<f64>>,
}

impl WeightStats {
    pub fn new(slots: usize, channels: usize, third_moments: bool) -> Self {
        WeightStats {
            n_samples: 0,
            slots,
            channels,
            first_plus: vec![0.0; slots * channels],
            first_minus: vec![0.0; slots * channels],
            second_top: vec![0.0; channels * channels],
            second_bottom: vec![0.0; channels * channels],
            third_top: third_moments.then(|| vec![0.0; channels * channels * channels]),
        }
    }

    pub fn push(&mut self, table: &WeightTable) {
        let nc = self.channels;
        self.n_samples += 1;
        for (s, x) in self.first_plus.iter_mut().zip(&table.plus) {
            *s += x;
        }
        for (s, x) in self.first_minus.iter_mut().zip(&table.minus) {
            *s += x;
        }
        let last = self.slots - 1;
        for j in 0..nc {
            let (tj, bj) = (table.total(0, j), table.total(last, j));
            for k in 0..nc {
                self.second_top[j * nc + k] += tj * table.total(0, k);
                self.second_bottom[j * nc + k] += bj * table.total(last, k);
            }
        }
        if let Some(third) = self.third_top.as_mut() {
            for j in 0..nc {
                let tj = table.total(0, j);
                for m in 0..nc {
                    let tjm = tj * table.total(0, m);
                    for k in 0..nc {
                        third[(j * nc + m) * nc + k] += tjm * table.total(0, k);
                    }
                }
            }
        }
    }

    pub fn merge(&mut self, other: &WeightStats) {
        assert_eq!((self.slots, self.channels), (other.slots, other.channels), "incompatible weight tables");
        self.n_samples += other.n_samples;
        let add = |a: &mut Vec<f64>, b: &Vec<f64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.first_plus, &other.first_plus);
        add(&mut self.first_minus, &other.first_minus);
        add(&mut self.second_top, &other.second_top);
        add(&mut self.second_bottom, &other.second_bottom);
        match (self.third_top.as_mut(), other.third_top.as_ref()) {
            (Some(a), Some(b)) => add(a, b),
            _ => self.third_top = None,
        }
    }

    fn norm(&self) -> f64 {
        if self.n_samples == 0 {
            f64::NAN
        } else {
            1.0 / self.n_samples as f64
        }
    }

    pub fn mean_plus(&self, p: usize, j: usize) -> f64 {
        self.first_plus[p * self.channels + j] * self.norm()
    }

    pub fn mean_minus(&self, p: usize, j: usize) -> f64 {
        self.first_minus[p * self.channels + j] * self.norm()
    }

    pub fn mean_signed(&self, p: usize, j: usize, sign: f64) -> f64 {
        if sign > 0.0 {
            self.mean_plus(p, j)
        } else {
            self.mean_minus(p, j)
        }
    }

    /// `<ρ_{p,j}>`.
    pub fn mean(&self, p: usize, j: usize) -> f64 {
        self.mean_plus(p, j) + self.mean_minus(p, j)
    }

    /// `<ρ_{1,j}>` over channels.
    pub fn top_means(&self) -> Vec<f64> {
        (0..self.channels).map(|j| self.mean(0, j)).collect()
    }

    /// `<ρ_{last,j}>` over channels.
    pub fn bottom_means(&self) -> Vec<f64> {
        (0..self.channels).map(|j| self.mean(self.slots - 1, j)).collect()
    }

    /// `<ρ_{1,j} ρ_{1,k}>`.
    pub fn second_top(&self, j: usize, k: usize) -> f64 {
        self.second_top[j * self.channels + k] * self.norm()
    }

    /// `<ρ_{last,j} ρ_{last,k}>`.
    pub fn second_bottom(&self, j: usize, k: usize) -> f64 {
        self.second_bottom[j * self.channels + k] * self.norm()
    }

    pub fn has_third_moments(&self) -> bool {
        self.third_top.is_some()
    }

    /// `<ρ_{1,j} ρ_{1,m} ρ_{1,k}>` if tracked.
    pub fn third_top(&self, j: usize, m: usize, k: usize) -> Option<f64> {
        let nc = self.channels;
        self.third_top.as_ref().map(|t| t[(j * nc + m) * nc + k] * self.norm())
    }

    /// Moments of a weight process that is constant and equal to `rho` in slots 1 and `L`.
    pub fn from_factorized(rho_top: &[f64], rho_bottom: &[f64], slots: usize) -> Self {
        let nc = rho_top.len();
        let mut stats = WeightStats::new(slots, nc, true);
        let mut table = WeightTable::zeros(slots, nc);
        for j in 0..nc {
            table.plus[j] = 0.5 * rho_top[j];
            table.minus[j] = 0.5 * rho_top[j];
            table.plus[(slots - 1) * nc + j] = 0.5 * rho_bottom[j];
            table.minus[(slots - 1) * nc + j] = 0.5 * rho_bottom[j];
        }
        stats.push(&table);
        stats
    }
}

/// Frame evolution coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coordinates {
    /// `R (1 - λ P(n))` in normal-form coordinates.
    #[default]
    Normal,
    /// `T(n)` in site coordinates.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    /// Total number of steps including burn-in.
    pub steps: u64,
    pub burn_in: u64,
    /// Frame size `p` (defaults to `L`).
    pub frame_size: Option<usize>,
    pub coordinates: Coordinates,
    pub track_weights: bool,
    pub third_moments: bool,
    /// Subtract the zero-mean first-order term of each slot's log growth.
    pub control_variate: bool,
    pub reproject_every: u64,
    pub batch_len: usize,
}

impl TrajectoryConfig {
    pub fn new(steps: u64, burn_in: u64) -> Self {
        TrajectoryConfig {
            steps,
            burn_in,
            frame_size: None,
            coordinates: Coordinates::Normal,
            track_weights: true,
            third_moments: false,
            control_variate: true,
            reproject_every: 1000,
            batch_len: 1000,
        }
    }
}

/// Default burn-in `max(10³, ⌈10/λ²⌉)`.
pub fn default_burn_in(coupling: f64) -> u64 {
    if coupling == 0.0 {
        1000
    } else {
        (10.0 / (coupling * coupling)).ceil().clamp(1000.0, 1e12) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryOutput {
    /// Per-slot log growth after burn-in.
    pub log_growth: Vec<BatchMeans>,
    /// Summed log growth (log volume) after burn-in.
    pub volume: BatchMeans,
    pub weights: Option<WeightStats>,
    pub max_sum_rule_defect: f64,
    pub max_frame_defect: f64,
    pub steps: u64,
    pub burn_in: u64,
}

impl TrajectoryOutput {
    pub fn merge(&mut self, other: &TrajectoryOutput) {
        for (a, b) in self.log_growth.iter_mut().zip(&other.log_growth) {
            a.merge(b);
        }
        self.volume.merge(&other.volume);
        match (self.weights.as_mut(), other.weights.as_ref()) {
            (Some(a), Some(b)) => a.merge(b),
            _ => self.weights = None,
        }
        self.max_sum_rule_defect = self.max_sum_rule_defect.max(other.max_sum_rule_defect);
        self.max_frame_defect = self.max_frame_defect.max(other.max_frame_defect);
        self.steps += other.steps;
        self.burn_in += other.burn_in;
    }
}

/// State visible to a trajectory observer after each step.
pub struct StepView<'a> {
    pub step: u64,
    pub retained: bool,
    pub frame: &'a DMatrix<f64>,
    pub log_expansions: &'a [f64],
    pub weights: Option<&'a WeightTable>,
}

pub fn run_trajectory(
    model: &StripModel,
    nf: &NormalFormData,
    config: &TrajectoryConfig,
    trajectory: u64,
) -> Result<TrajectoryOutput> {
    run_trajectory_with(model, nf, config, trajectory, |_| {})
}

/// Evolves a random initial frame for `config.steps` steps, calling `observer` after each one.
///
/// Disorder for trajectory `t` comes from stream `2t` of the model seed and
/// the initial frame from stream `2t + 1`.
pub fn run_trajectory_with<F: FnMut(&StepView<'_>)>(
    model: &StripModel,
    nf: &NormalFormData,
    config: &TrajectoryConfig,
    trajectory: u64,
    mut observer: F,
) -> Result<TrajectoryOutput> {
    model.validate()?;
    let l = model.width;
    if nf.width != l || (nf.energy - model.energy).abs() > 0.0 {
        return Err(Error::InvalidArgument("normal form does not match the model".into()));
    }
    if config.burn_in >= config.steps {
        return Err(Error::InvalidArgument(format!(
            "steps ({}) must exceed burn-in ({})",
            config.steps, config.burn_in
        )));
    }
    let p = config.frame_size.unwrap_or(l);
    let mut frame = random_frame(&mut frame_stream(model.seed, trajectory), l, p)?.columns;
    let mut rng = disorder_stream(model.seed, trajectory);
    let mut column = vec![0.0; l];
    let mut logs = vec![0.0; p];
    let mut cv = vec![0.0; p];
    let mut tmp = vec![0.0; l];
    let mut scratch = NormalScratch::new(l, p);
    let normal = config.coordinates == Coordinates::Normal;
    let form = if normal { nf.mode_g2.clone() } else { vec![1.0; l] };
    for (q, &g2) in form.iter().enumerate() {
        frame.row_mut(q + l).scale_mut(g2);
    }
    let track = config.track_weights && normal;
    let mut table = WeightTable::zeros(p, nf.channels.len());
    let nu: Vec<usize> = nf.channels.channels.iter().map(|c| c.nu).collect();
    let mut out = TrajectoryOutput {
        log_growth: (0..p).map(|_| BatchMeans::new(config.batch_len)).collect(),
        volume: BatchMeans::new(config.batch_len),
        weights: track.then(|| WeightStats::new(p, nf.channels.len(), config.third_moments)),
        max_sum_rule_defect: 0.0,
        max_frame_defect: 0.0,
        steps: config.steps,
        burn_in: config.burn_in,
    };
    let use_cv = config.control_variate && model.coupling != 0.0;
    for step in 0..config.steps {
        fill_column(model.disorder, &mut rng, &mut column);
        if normal {
            scratch.perturb(nf, &column, model.coupling, &mut frame, use_cv.then_some(&mut cv[..]));
            apply_r(nf, &mut frame);
        } else {
            apply_raw(model, &column, &mut frame, &mut tmp, use_cv.then_some(&mut cv[..]));
        }
        orthonormalize(&mut frame, &mut logs)?;
        if config.reproject_every > 0 && (step + 1) % config.reproject_every == 0 {
            let f = SymplecticFrame { columns: frame };
            out.max_frame_defect = out.max_frame_defect.max(f.orthonormality_residual()).max(f.isotropy_residual_with(&form));
            frame = f.columns;
            reproject(&mut frame, &form)?;
        }
        let retained = step >= config.burn_in;
        if retained {
            let mut total = 0.0;
            for (slot, acc) in out.log_growth.iter_mut().enumerate() {
                let x = if use_cv { logs[slot] - cv[slot] } else { logs[slot] };
                acc.push(x);
                total += x;
            }
            out.volume.push(total);
        }
        if track {
            fill_weights(&frame, nf, &mut table);
            if retained {
                let mut defect = table.slot_sum_defect();
                if p == l {
                    defect = defect.max(table.channel_sum_defect(&nu));
                }
                out.max_sum_rule_defect = out.max_sum_rule_defect.max(defect);
                if let Some(w) = out.weights.as_mut() {
                    w.push(&table);
                }
            }
        }
        observer(&StepView {
            step,
            retained,
            frame: &frame,
            log_expansions: &logs,
            weights: track.then_some(&table),
        });
    }
    let f = SymplecticFrame { columns: frame };
    out.max_frame_defect = out.max_frame_defect.max(f.orthonormality_residual()).max(f.isotropy_residual_with(&form));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use crate::model::{build_transfer, random_stream, sample_column, DisorderLaw, PotentialColumn};
    use crate::normalform::{build_normal_form, build_p};
    use crate::spectral::channel_spectrum;
    use proptest::prelude::*;

    fn nf(width: usize, energy: f64) -> NormalFormData {
        build_normal_form(&channel_spectrum(width, energy).unwrap()).unwrap()
    }

    #[test]
    fn random_frames_are_symplectic() {
        let mut rng = random_stream(3, 3);
        for width in 1..=9 {
            for p in 1..=width {
                let f = random_frame(&mut rng, width, p).unwrap();
                assert!(f.orthonormality_residual() < 1e-12);
                assert!(f.isotropy_residual() < 1e-12);
            }
            let f = random_frame(&mut rng, width, width).unwrap();
            let u = f.unitary_extension();
            assert!(linalg::identity_residual(&(u.transpose() * &u)) < 1e-12);
            assert!(linalg::symplectic_residual(&u) < 1e-12);
        }
        let a = random_frame(&mut random_stream(1, 0), 4, 2).unwrap();
        let b = random_frame(&mut random_stream(2, 0), 4, 2).unwrap();
        assert_ne!(a, b);
        assert!(random_frame(&mut rng, 3, 4).is_err());
    }

    #[test]
    fn isometry_has_zero_growth() {
        let nf = nf(13, -0.03);
        let mut rng = random_stream(4, 0);
        let f = random_frame(&mut rng, 13, 13).unwrap();
        let step = frame_action(&nf.r, &f).unwrap();
        assert!(step.log_expansions.iter().all(|x| x.abs() < 1e-12));
        assert!(linalg::max_abs(&(&step.frame.columns - &nf.r * &f.columns)) < 1e-12);
    }

    #[test]
    fn power_iteration_single_chain() {
        let t = DMatrix::from_row_slice(2, 2, &[-3.0, -1.0, 1.0, 0.0]);
        let mut f = SymplecticFrame::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0]));
        let mut last = 0.0;
        for _ in 0..100 {
            let s = frame_action(&t, &f).unwrap();
            last = s.log_expansions[0];
            f = s.frame;
        }
        let kappa = (3.0 + 5f64.sqrt()) / 2.0;
        assert!((last - kappa.ln()).abs() < 1e-12);
    }

    #[test]
    fn cocycle_property() {
        let model = StripModel::new(5, 0.3, 0.4, DisorderLaw::Gaussian, 2).unwrap();
        let mut rng = random_stream(2, 0);
        let s = build_transfer(&model, &sample_column(&model, &mut rng));
        let t = build_transfer(&model, &sample_column(&model, &mut rng));
        let f = random_frame(&mut rng, 5, 5).unwrap();
        let once = frame_action(&(&s.entries * &t.entries), &f).unwrap();
        let step1 = frame_action(&t, &f).unwrap();
        let step2 = frame_action(&s, &step1.frame).unwrap();
        assert!(linalg::max_abs(&(&once.frame.columns - &step2.frame.columns)) < 1e-8);
        for p in 0..5 {
            let twice = step1.log_expansions[p] + step2.log_expansions[p];
            assert!((once.log_expansions[p] - twice).abs() < 1e-8);
        }
    }

    #[test]
    fn volume_growth_matches_gram_determinant() {
        let model = StripModel::new(4, 0.5, 0.6, DisorderLaw::Uniform, 9).unwrap();
        let mut rng = random_stream(9, 0);
        let t = build_transfer(&model, &sample_column(&model, &mut rng));
        let f = random_frame(&mut rng, 4, 3).unwrap();
        let s = frame_action(&t, &f).unwrap();
        for q in 1..=3 {
            let tu = &t.entries * f.columns.columns(0, q);
            let gram = tu.transpose() * &tu;
            let want = 0.5 * gram.determinant().ln();
            let got: f64 = s.log_expansions[..q].iter().sum();
            assert!((want - got).abs() < 1e-10);
        }
    }

    #[test]
    fn normal_form_factor_matches_conjugated_transfer() {
        let model = StripModel::new(6, 0.7, 0.3, DisorderLaw::Gaussian, 5).unwrap();
        let nf = nf(6, 0.7);
        let mut rng = random_stream(5, 0);
        let col = sample_column(&model, &mut rng);
        let f = random_frame(&mut rng, 6, 6).unwrap();
        let factor = NormalFormFactor { nf: &nf, column: &col.values, coupling: 0.3 };
        let a = frame_action(&factor, &f).unwrap();
        let one = DMatrix::<f64>::identity(12, 12);
        let dense = &nf.r * (one - build_p(&nf, &col).p * 0.3);
        let b = frame_action(&dense, &f).unwrap();
        assert!(linalg::max_abs(&(&a.frame.columns - &b.frame.columns)) < 1e-12);
    }

    #[test]
    fn raw_step_matches_dense_transfer() {
        for width in [1usize, 2, 3, 5] {
            let model = StripModel::new(width, 0.4, 0.7, DisorderLaw::Gaussian, 8).unwrap();
            let mut rng = random_stream(8, 0);
            let col = sample_column(&model, &mut rng);
            let f = random_frame(&mut rng, width, width).unwrap();
            let mut cols = f.columns.clone();
            let mut tmp = vec![0.0; width];
            apply_raw(&model, &col.values, &mut cols, &mut tmp, None);
            let dense = build_transfer(&model, &col).entries * &f.columns;
            assert!(linalg::max_abs(&(cols - dense)) < 1e-13);
        }
    }

    #[test]
    fn weights_of_fundamental_direction() {
        let nf = nf(5, -0.2);
        let mut cols = DMatrix::zeros(10, 1);
        cols[(0, 0)] = 1.0;
        let w = channel_weights(&SymplecticFrame::new(cols), &nf);
        assert!((w.total(0, 0) - 1.0).abs() < 1e-14);
        for j in 1..w.channels {
            assert!(w.total(0, j).abs() < 1e-14);
        }
    }

    #[test]
    fn weights_match_dense_projections() {
        let nf = nf(13, 0.95);
        let mut rng = random_stream(6, 0);
        let f = random_frame(&mut rng, 13, 13).unwrap();
        let w = channel_weights(&f, &nf);
        for p in 0..13 {
            let u = linalg::to_complex(&f.columns.columns(p, 1).into_owned());
            for j in 0..w.channels {
                let plus = (u.adjoint() * nf.projection(j, 1) * &u)[(0, 0)];
                let minus = (u.adjoint() * nf.projection(j, -1) * &u)[(0, 0)];
                assert!((plus.re - w.plus(p, j)).abs() < 1e-12 && plus.im.abs() < 1e-12);
                assert!((minus.re - w.minus(p, j)).abs() < 1e-12);
            }
        }
        assert!(w.slot_sum_defect() < 1e-10);
        let nu: Vec<usize> = nf.channels.channels.iter().map(|c| c.nu).collect();
        assert!(w.channel_sum_defect(&nu) < 1e-10);
    }

    #[test]
    fn elliptic_weights_are_balanced_for_real_vectors() {
        let nf = nf(8, 0.5);
        let mut rng = random_stream(7, 0);
        let f = random_frame(&mut rng, 8, 3).unwrap();
        let w = channel_weights(&f, &nf);
        for (j, c) in nf.channels.channels.iter().enumerate() {
            if c.is_elliptic() {
                for p in 0..3 {
                    assert!((w.plus(p, j) - w.minus(p, j)).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn zero_coupling_elliptic_trajectory() {
        let model = StripModel::new(13, -0.03, 0.0, DisorderLaw::Rademacher, 1).unwrap();
        let nf = nf(13, -0.03);
        let mut first: Option<Vec<f64>> = None;
        let mut constant = true;
        let out = run_trajectory_with(&model, &nf, &TrajectoryConfig::new(3000, 1000), 0, |v| {
            let w = v.weights.unwrap();
            let totals: Vec<f64> = (0..w.channels).map(|j| (0..w.slots).map(|p| w.total(p, j)).sum()).collect();
            match &first {
                None => first = Some(totals),
                Some(f) => constant &= f.iter().zip(&totals).all(|(a, b)| (a - b).abs() < 1e-10),
            }
        })
        .unwrap();
        assert!(constant);
        assert!(out.log_growth.iter().all(|b| b.mean().abs() < 1e-12));
    }

    #[test]
    fn mixed_zero_coupling_aligns() {
        let model = StripModel::new(13, 0.95, 0.0, DisorderLaw::Rademacher, 1).unwrap();
        let ch = channel_spectrum(13, 0.95).unwrap();
        let nf = build_normal_form(&ch).unwrap();
        let out = run_trajectory(&model, &nf, &TrajectoryConfig::new(4000, 1000), 0).unwrap();
        let eta = ch.slot_exponents();
        for (b, e) in out.log_growth.iter().zip(&eta) {
            assert!((b.mean() - e).abs() < 1e-8, "{} vs {}", b.mean(), e);
        }
    }

    #[test]
    fn merged_half_trajectories() {
        let table_a = {
            let nf = nf(5, -0.2);
            let f = random_frame(&mut random_stream(1, 1), 5, 5).unwrap();
            channel_weights(&f, &nf)
        };
        let table_b = {
            let nf = nf(5, -0.2);
            let f = random_frame(&mut random_stream(1, 2), 5, 5).unwrap();
            channel_weights(&f, &nf)
        };
        let mut whole = WeightStats::new(5, 3, true);
        let mut a = WeightStats::new(5, 3, true);
        let mut b = WeightStats::new(5, 3, true);
        for t in [&table_a, &table_b, &table_a] {
            whole.push(t);
        }
        a.push(&table_a);
        b.push(&table_b);
        b.push(&table_a);
        a.merge(&b);
        for j in 0..3 {
            assert!((a.mean(0, j) - whole.mean(0, j)).abs() < 1e-14);
            for k in 0..3 {
                assert!((a.second_bottom(j, k) - whole.second_bottom(j, k)).abs() < 1e-14);
                assert!((a.third_top(j, k, 1).unwrap() - whole.third_top(j, k, 1).unwrap()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn frames_stay_symplectic_under_long_runs() {
        let model = StripModel::new(16, 0.3, 0.3, DisorderLaw::Gaussian, 4).unwrap();
        let nf = nf(16, 0.3);
        let mut cfg = TrajectoryConfig::new(50_000, 1000);
        cfg.track_weights = false;
        let out = run_trajectory(&model, &nf, &cfg, 0).unwrap();
        assert!(out.max_frame_defect < 1e-8, "{}", out.max_frame_defect);
    }

    #[test]
    fn control_variate_is_unbiased_and_reduces_noise() {
        let model = StripModel::new(5, -0.2, 0.2, DisorderLaw::Rademacher, 12).unwrap();
        let nf = nf(5, -0.2);
        let mut with = TrajectoryConfig::new(200_000, 2000);
        with.track_weights = false;
        let mut without = with.clone();
        without.control_variate = false;
        let a = run_trajectory(&model, &nf, &with, 0).unwrap();
        let b = run_trajectory(&model, &nf, &without, 0).unwrap();
        let (x, y) = (&a.log_growth[4], &b.log_growth[4]);
        assert!(x.stderr() < 0.5 * y.stderr());
        let z = (x.mean() - y.mean()) / y.stderr();
        assert!(z.abs() < 4.0, "{z}");
    }

    #[test]
    fn raw_and_normal_coordinates_agree() {
        let model = StripModel::new(3, 0.4, 0.3, DisorderLaw::Uniform, 3).unwrap();
        let nf = nf(3, 0.4);
        let mut cfg = TrajectoryConfig::new(200_000, 2000);
        cfg.track_weights = false;
        let a = run_trajectory(&model, &nf, &cfg, 0).unwrap();
        cfg.coordinates = Coordinates::Raw;
        let b = run_trajectory(&model, &nf, &cfg, 0).unwrap();
        for p in 0..3 {
            let (x, y) = (&a.log_growth[p], &b.log_growth[p]);
            let se = x.stderr().hypot(y.stderr());
            assert!((x.mean() - y.mean()).abs() < 4.0 * se + 1e-4, "slot {p}");
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let model = StripModel::new(3, 0.4, 0.3, DisorderLaw::Uniform, 3).unwrap();
        let nf = nf(3, 0.4);
        assert!(run_trajectory(&model, &nf, &TrajectoryConfig::new(10, 10), 0).is_err());
        let other = nf_for(4);
        assert!(run_trajectory(&model, &other, &TrajectoryConfig::new(10, 1), 0).is_err());
    }

    fn nf_for(width: usize) -> NormalFormData {
        nf(width, 0.4)
    }

    #[test]
    fn zero_column_factor_is_r() {
        let nf = nf(4, 0.3);
        let col = PotentialColumn::zeros(4);
        let f = random_frame(&mut random_stream(0, 0), 4, 4).unwrap();
        let factor = NormalFormFactor { nf: &nf, column: &col.values, coupling: 1.0 };
        let a = frame_action(&factor, &f).unwrap();
        let b = frame_action(&nf.r, &f).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn sum_rules_for_random_frames(width in 1usize..12, energy in -3.9f64..3.9, seed in 0u64..1000) {
            let Ok(ch) = channel_spectrum(width, energy) else { return Ok(()) };
            prop_assume!(ch.channels.iter().all(|c| (c.mu.abs() - 2.0).abs() > 1e-3));
            let nf = build_normal_form(&ch).unwrap();
            let f = random_frame(&mut random_stream(seed, 0), width, width).unwrap();
            let w = channel_weights(&f, &nf);
            let nu: Vec<usize> = ch.channels.iter().map(|c| c.nu).collect();
            prop_assert!(w.slot_sum_defect() < 1e-10);
            prop_assert!(w.channel_sum_defect(&nu) < 1e-10);
            prop_assert!(w.plus.iter().chain(&w.minus).all(|&x| (-1e-14..=1.0 + 1e-12).contains(&x)));
        }
    }
}
