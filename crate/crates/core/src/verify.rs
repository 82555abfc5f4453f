//! Numerical checks of the exact identities and moment formulas.
//!
//! Each check produces a [`CheckEntry`] holding a residual (compared against
//! an absolute threshold), a z-score (compared against `|z| ≤ 5`) or a ratio
//! (compared against a window).

use std::fmt;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{channel_weights, random_frame, run_trajectory_with, TrajectoryConfig};
use crate::linalg::{self, inner, max_abs, max_abs_c, to_complex};
use crate::model::{build_transfer, random_stream, sample_column, DisorderLaw, StripModel};
use crate::normalform::{build_normal_form, build_p, fourier_potential, matrix_element, moment_targets, MomentItem, NormalFormData};
use crate::spectral::{channel_spectrum, ChannelData};
use crate::stats::BatchMeans;

pub const RESIDUAL_THRESHOLD: f64 = 1e-8;
pub const Z_THRESHOLD: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    Residual,
    ZScore,
    Ratio,
    Flag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckEntry {
    pub name: String,
    /// The identity being checked, in formula form.
    pub identity: String,
    pub kind: CheckKind,
    pub value: f64,
    /// Upper bound for residuals and `|z|`; lower end of the window for ratios.
    pub threshold: f64,
    /// Upper end of the window for ratios.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub title: String,
    pub entries: Vec<CheckEntry>,
    pub passed: bool,
}

impl VerifyReport {
    pub fn new(title: impl Into<String>) -> Self {
        VerifyReport { title: title.into(), entries: Vec::new(), passed: true }
    }

    fn push(&mut self, entry: CheckEntry) {
        self.passed &= entry.passed;
        self.entries.push(entry);
    }

    pub fn residual(&mut self, name: &str, identity: &str, value: f64, threshold: f64) {
        self.push(CheckEntry {
            name: name.into(),
            identity: identity.into(),
            kind: CheckKind::Residual,
            value,
            threshold,
            upper: None,
            passed: value <= threshold,
        });
    }

    pub fn z_score(&mut self, name: &str, identity: &str, z: f64) {
        self.push(CheckEntry {
            name: name.into(),
            identity: identity.into(),
            kind: CheckKind::ZScore,
            value: z,
            threshold: Z_THRESHOLD,
            upper: None,
            passed: z.abs() <= Z_THRESHOLD,
        });
    }

    pub fn ratio(&mut self, name: &str, identity: &str, value: f64, lo: f64, hi: f64) {
        self.push(CheckEntry {
            name: name.into(),
            identity: identity.into(),
            kind: CheckKind::Ratio,
            value,
            threshold: lo,
            upper: Some(hi),
            passed: value >= lo && value <= hi,
        });
    }

    pub fn flag(&mut self, name: &str, identity: &str, ok: bool) {
        self.push(CheckEntry {
            name: name.into(),
            identity: identity.into(),
            kind: CheckKind::Flag,
            value: if ok { 1.0 } else { 0.0 },
            threshold: 1.0,
            upper: None,
            passed: ok,
        });
    }

    pub fn extend(&mut self, other: VerifyReport) {
        for e in other.entries {
            self.push(e);
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.title)?;
        for e in &self.entries {
            let bound = match (e.kind, e.upper) {
                (CheckKind::Ratio, Some(hi)) => format!("[{}, {}]", e.threshold, hi),
                (CheckKind::ZScore, _) => format!("|z| <= {}", e.threshold),
                (CheckKind::Flag, _) => "true".to_string(),
                _ => format!("<= {:.0e}", e.threshold),
            };
            writeln!(
                f,
                "  {:4} {:44} {:>12.4e}  {:14}  {}",
                if e.passed { "ok" } else { "FAIL" },
                e.name,
                e.value,
                bound,
                e.identity
            )?;
        }
        write!(f, "overall: {}", if self.passed { "PASS" } else { "FAIL" })
    }
}

fn rejection_report(title: String, err: &Error) -> VerifyReport {
    let mut r = VerifyReport::new(title);
    r.flag("parabolic channel rejected", &format!("||mu| - 2| <= 1e-9 raises an error: {err}"), true);
    r
}

fn channels_or_report(width: usize, energy: f64, title: &str) -> std::result::Result<ChannelData, VerifyReport> {
    match channel_spectrum(width, energy) {
        Ok(c) => Ok(c),
        Err(e @ Error::ParabolicChannel { .. }) => Err(rejection_report(title.to_string(), &e)),
        Err(e) => {
            let mut r = VerifyReport::new(title.to_string());
            r.flag("channel spectrum", &e.to_string(), false);
            Err(r)
        }
    }
}

/// Deterministic identities of the normal form, the perturbation and frames.
pub fn verify_algebra(width: usize, energy: f64, coupling: f64, trials: usize, seed: u64) -> VerifyReport {
    let title = format!("algebra: L={width} E={energy} lambda={coupling} trials={trials} seed={seed}");
    let channels = match channels_or_report(width, energy, &title) {
        Ok(c) => c,
        Err(r) => return r,
    };
    let mut report = VerifyReport::new(title);
    let nf = match build_normal_form(&channels) {
        Ok(nf) => nf,
        Err(e) => {
            report.flag("normal form construction", &e.to_string(), false);
            return report;
        }
    };
    let tol = RESIDUAL_THRESHOLD;
    let n = 2 * width;
    let jc = to_complex(&linalg::symplectic_form(width));

    report.residual("M M^-1 = 1", "M M^-1 - 1", nf.inverse_residual(), tol);
    report.residual("normal form of free transfer", "M^-1 A M - R", nf.conjugation_residual(), tol);
    report.residual("M^t J M = J_g", "M^t J M - [[0,-g^2],[g^2,0]]", nf.m_symplectic_residual(), tol);
    report.residual("R symplectic", "R^t J R - J", linalg::symplectic_residual(&nf.r), tol);
    report.residual("reflection", "d d^t - S", max_abs_c(&(&nf.d * nf.d.transpose() - to_complex(&nf.reflection))), tol);
    report.residual("W unitary", "W* W - 1", linalg::identity_residual_c(&(nf.w.adjoint() * &nf.w)), tol);
    report.residual(
        "W* J W",
        "W* J W - (i/2)[[g+g*, (g*-g)S], [(g-g*)S, -g-g*]]",
        max_abs_c(&(nf.w.adjoint() * &jc * &nf.w - nf.basis_form_target())),
        tol,
    );
    let rc = to_complex(&nf.r);
    let eig = (0..width)
        .flat_map(|q| [(q, 1i8), (q, -1i8)])
        .map(|(q, s)| {
            let w = nf.w_column(q, s);
            (&rc * &w - &w * nf.mode_eigenvalue(q, s)).iter().map(|z| z.norm()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    report.residual("R eigenvectors", "R w^s_q - kappa^s_q w^s_q", eig, tol);
    let ell_j = (0..width)
        .filter(|&q| nf.mode_g2[q] > 0.0)
        .flat_map(|q| [(q, 1i8), (q, -1i8)])
        .map(|(q, s)| {
            let w = nf.w_column(q, s);
            (&jc * &w - &w * Complex64::new(0.0, s as f64)).iter().map(|z| z.norm()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    report.residual("J eigenvectors (elliptic)", "J w^s = i s w^s", ell_j, tol);

    let mut total = DMatrix::<Complex64>::zeros(n, n);
    let (mut idem, mut orth) = (0.0f64, 0.0f64);
    for j in 0..channels.len() {
        for s in [1i8, -1] {
            let p = nf.projection(j, s);
            total += p;
            idem = idem.max(max_abs_c(&(p * p - p)));
            for k in 0..channels.len() {
                orth = orth.max(max_abs_c(&(p * nf.projection(k, -s))));
                if k != j {
                    orth = orth.max(max_abs_c(&(p * nf.projection(k, s))));
                }
            }
        }
    }
    report.residual("projection resolution", "sum_j (pi_j^+ + pi_j^-) - 1", linalg::identity_residual_c(&total), tol);
    report.residual("projections idempotent", "pi pi - pi", idem, tol);
    report.residual("projections orthogonal", "pi_j^s pi_k^t, (j,s) != (k,t)", orth, tol);

    let model = StripModel { width, energy, coupling, disorder: DisorderLaw::Gaussian, seed };
    let mut rng = random_stream(seed, u64::MAX);
    let (mut conj, mut lie, mut sym, mut elems, mut tsym, mut lagr, mut unit, mut sums, mut fourier) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let one = DMatrix::<f64>::identity(n, n);
    let nu: Vec<usize> = channels.channels.iter().map(|c| c.nu).collect();
    let j_eigs = canonical_j_eigenvectors(width);
    let w_eigs: Vec<(DVector<Complex64>, f64)> = (0..width)
        .filter(|&q| nf.mode_g2[q] > 0.0)
        .flat_map(|q| [(nf.w_column(q, 1), 1.0), (nf.w_column(q, -1), -1.0)])
        .collect();
    for _ in 0..trials {
        let col = sample_column(&model, &mut rng);
        let t = build_transfer(&model, &col);
        tsym = tsym.max(t.symplectic_residual() / max_abs(&t.entries).powi(2).max(1.0));
        let pm = build_p(&nf, &col);
        conj = conj.max(max_abs(&(&nf.m_inv * &t.entries * &nf.m_full - &nf.r * (&one - &pm.p * coupling))));
        lie = lie.max(pm.lie_algebra_residual());
        sym = sym.max(pm.symmetry_residual());
        let fp = fourier_potential(&col);
        let parseval: f64 = fp.vhat.iter().map(|v| v.norm_sqr()).sum::<f64>()
            - col.values.iter().map(|v| v * v).sum::<f64>() / width as f64;
        fourier = fourier.max(parseval.abs());
        let wpw = nf.w.adjoint() * to_complex(&pm.p) * &nf.w;
        for l in 0..width {
            for k in 0..width {
                for (ti, tau) in [(0, 1i8), (width, -1)] {
                    for (si, sigma) in [(0, 1i8), (width, -1)] {
                        let want = matrix_element(&nf, &fp, l, k, tau, sigma);
                        elems = elems.max((wpw[(l + ti, k + si)] - want).norm());
                    }
                }
            }
        }
        let frame = match random_frame(&mut rng, width, width) {
            Ok(f) => f,
            Err(e) => {
                report.flag("random frame", &e.to_string(), false);
                return report;
            }
        };
        let pi = to_complex(&frame.projection());
        for family in [&j_eigs, &w_eigs] {
            for (a, (va, sa)) in family.iter().enumerate() {
                let pv: Vec<Complex64> = family.iter().map(|(vb, _)| inner(va, &(&pi * vb))).collect();
                for (b, (_, sb)) in family.iter().enumerate() {
                    let want = if a == b { 1.0 } else { 0.0 };
                    lagr = lagr.max((pv[b] * (1.0 + sa * sb) - want).norm());
                }
            }
        }
        let u = frame.unitary_extension();
        unit = unit.max(linalg::identity_residual(&(u.transpose() * &u))).max(linalg::symplectic_residual(&u));
        let w = channel_weights(&frame, &nf);
        sums = sums.max(w.slot_sum_defect()).max(w.channel_sum_defect(&nu));
    }
    report.residual("transfer symplectic", "T^t J T - J (relative to max(1, |T|^2))", tsym, 1e-10);
    report.residual("perturbed normal form", "M^-1 T M - R (1 - lambda P)", conj, tol);
    report.residual("P infinitesimally preserves J_g", "P^t J_g + J_g P", lie, tol);
    report.residual("g^2-weighted block symmetric", "G B - (G B)^t, G = diag(g^2)", sym, tol);
    report.residual("Parseval", "sum |vhat|^2 - (1/L) sum v^2", fourier, tol);
    report.residual("matrix elements", "<w_l^t|P|w_k^s> - t (i/2) g_l h_l h_k vhat(s k - t l)", elems, tol);
    report.residual("Lagrangian identity", "(1 + s_j s_k) <v_j|Pi|v_k> - delta_jk", lagr, tol);
    report.residual("unitary correspondence", "(u, Ju) orthogonal and symplectic", unit, tol);
    report.residual("weight sum rules", "sum_j rho_pj = 1, sum_p rho_pj = nu_j", sums, tol);
    report
}

fn canonical_j_eigenvectors(width: usize) -> Vec<(DVector<Complex64>, f64)> {
    let s2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut out = Vec::with_capacity(2 * width);
    for l in 0..width {
        for s in [1.0, -1.0] {
            let mut v = DVector::zeros(2 * width);
            v[l] = Complex64::new(s2, 0.0);
            v[l + width] = Complex64::new(0.0, -s * s2);
            out.push((v, s));
        }
    }
    out
}

/// `P w` for `P = [[0, 0], [B, 0]]`.
fn apply_p(b: &DMatrix<Complex64>, w: &DVector<Complex64>) -> DVector<Complex64> {
    let l = b.nrows();
    let mut out = DVector::zeros(2 * l);
    out.rows_mut(l, l).copy_from(&(b * w.rows(0, l)));
    out
}

/// `Pᵗ w`.
fn apply_pt(b: &DMatrix<Complex64>, w: &DVector<Complex64>) -> DVector<Complex64> {
    let l = b.nrows();
    let mut out = DVector::zeros(2 * l);
    out.rows_mut(0, l).copy_from(&(b.transpose() * w.rows(l, l)));
    out
}

#[derive(Clone)]
struct MomentCase {
    item: MomentItem,
    l: usize,
    k: usize,
    tau: i8,
    sigma: i8,
    target: Complex64,
    re: BatchMeans,
    im: BatchMeans,
}

fn moment_cases(channels: &ChannelData) -> Vec<MomentCase> {
    let nc = channels.len();
    let mut picks: Vec<usize> = vec![0, nc / 2, nc - 1];
    picks.dedup();
    let mut cases = Vec::new();
    let mut add = |item, l, k, tau, sigma| {
        if let Ok(target) = moment_targets(channels, item, l, k, tau, sigma) {
            cases.push(MomentCase {
                item,
                l,
                k,
                tau,
                sigma,
                target,
                re: BatchMeans::new(100),
                im: BatchMeans::new(100),
            });
        }
    };
    add(MomentItem::I, 0, nc - 1, 1, -1);
    add(MomentItem::I, nc / 2, nc / 2, -1, -1);
    for &l in &picks {
        for &k in &picks {
            for (tau, sigma) in [(1, 1), (1, -1), (-1, 1)] {
                add(MomentItem::Ii, l, k, tau, sigma);
                add(MomentItem::Iii, l, k, tau, sigma);
            }
            add(MomentItem::Iv, l, k, 1, 1);
            add(MomentItem::Iv, l, k, 1, -1);
        }
        add(MomentItem::V, l, l, 1, 1);
        add(MomentItem::V, l, l, 1, -1);
    }
    cases
}

/// Monte-Carlo averages of the perturbation moments against their closed forms.
///
/// The unit vectors `w_l^τ ∈ ran π_l^τ` are redrawn uniformly at every trial.
pub fn verify_moments(width: usize, energy: f64, trials: usize, seed: u64) -> VerifyReport {
    let title = format!("moments: L={width} E={energy} trials={trials} seed={seed}");
    let channels = match channels_or_report(width, energy, &title) {
        Ok(c) => c,
        Err(r) => return r,
    };
    let mut report = VerifyReport::new(title);
    let nf = match build_normal_form(&channels) {
        Ok(nf) => nf,
        Err(e) => {
            report.flag("normal form construction", &e.to_string(), false);
            return report;
        }
    };
    let model = StripModel { width, energy, coupling: 1.0, disorder: DisorderLaw::Rademacher, seed };
    let mut vrng = random_stream(seed, 0);
    let mut wrng = random_stream(seed, 1);
    let mut cases = moment_cases(&channels);
    let rc = to_complex(&nf.r);
    for _ in 0..trials {
        let col = sample_column(&model, &mut vrng);
        let b = to_complex(&nf.p_block(&col));
        for case in cases.iter_mut() {
            let value = moment_sample(&nf, &b, &rc, case, &mut wrng);
            case.re.push(value.re);
            case.im.push(value.im);
        }
    }
    for case in &cases {
        let label = format!("{} l={} k={} tau={:+} sigma={:+}", case.item.name(), case.l, case.k, case.tau, case.sigma);
        let scale = case.target.norm().max(Complex64::new(case.re.mean(), case.im.mean()).norm());
        let z = |acc: &BatchMeans, target: f64| {
            let se = acc.stderr().max(1e-10 * scale);
            let d = acc.mean() - target;
            if se > 0.0 {
                d / se
            } else if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        };
        let (zr, zi) = (z(&case.re, case.target.re), z(&case.im, case.target.im));
        let identity = format!(
            "E = {:.6e}{:+.6e}i, measured {:.6e}{:+.6e}i",
            case.target.re,
            case.target.im,
            case.re.mean(),
            case.im.mean()
        );
        let worst = if zr.abs() >= zi.abs() { zr } else { zi };
        report.z_score(&label, &identity, worst);
    }
    report
}

fn moment_sample<R: Rng + ?Sized>(
    nf: &NormalFormData,
    b: &DMatrix<Complex64>,
    rc: &DMatrix<Complex64>,
    case: &MomentCase,
    rng: &mut R,
) -> Complex64 {
    match case.item {
        MomentItem::I => {
            let w = nf.random_channel_vector(rng, case.l, case.tau);
            let w2 = nf.random_channel_vector(rng, case.k, case.sigma);
            inner(&w, &apply_p(b, &w2))
        }
        MomentItem::Ii => {
            let wl = nf.random_channel_vector(rng, case.l, case.tau);
            let wk = nf.random_channel_vector(rng, case.k, case.sigma);
            inner(&wl, &apply_p(b, &wk)) * inner(&wk, &apply_p(b, &wl))
        }
        MomentItem::Iii => {
            let wl = nf.random_channel_vector(rng, case.l, case.tau);
            let wk = nf.random_channel_vector(rng, case.k, case.sigma);
            inner(&wl, &apply_pt(b, &wk)) * inner(&wk, &apply_p(b, &wl))
        }
        MomentItem::Iv => {
            let wl = nf.random_channel_vector(rng, case.l, case.sigma);
            let wk = nf.random_channel_vector(rng, case.k, -case.sigma);
            let pt = |w: &DVector<Complex64>| apply_p(b, w) + apply_pt(b, w);
            inner(&wl, &pt(&wk)) * inner(&wk, &pt(&wl))
        }
        MomentItem::V => {
            let wl = nf.random_channel_vector(rng, case.l, case.sigma);
            let rpw = rc * apply_p(b, &wl);
            Complex64::new(rpw.norm_squared(), 0.0)
        }
    }
}

/// Amplitudes `<w^s_q|u_b>` for the modes of `channel` and the given slots.
fn overlap_gram(nf: &NormalFormData, frame: &DMatrix<f64>, channel: usize, sign: f64, slots: &[usize]) -> f64 {
    let modes = &nf.channels.channels[channel].fourier_indices;
    let amp = |q: usize, slot: usize| -> Complex64 {
        let idx = if sign > 0.0 { q } else { q + nf.width };
        let u = frame.column(slot);
        nf.w_sparse[idx].iter().map(|&(row, w)| w.conj() * u[row]).sum()
    };
    match (modes.len(), slots.len()) {
        (1, 1) => amp(modes[0], slots[0]).norm_sqr(),
        (2, 2) => {
            let det = amp(modes[0], slots[0]) * amp(modes[1], slots[1]) - amp(modes[0], slots[1]) * amp(modes[1], slots[0]);
            det.norm_sqr()
        }
        _ => f64::NAN,
    }
}

struct DynamicsRun {
    misalignment: Vec<f64>,
    balance: Vec<(usize, usize, BatchMeans, f64)>,
    log_means: Vec<f64>,
    sum_rule: f64,
    frame_defect: f64,
}

fn dynamics_run(model: &StripModel, nf: &NormalFormData, steps: u64, burn_in: u64) -> Result<DynamicsRun> {
    let ch = &nf.channels;
    let hyperbolic = ch.hyperbolic_by_rate();
    let mut slot = 0;
    let groups: Vec<(usize, f64, Vec<usize>)> = hyperbolic
        .iter()
        .map(|c| {
            let slots: Vec<usize> = (slot..slot + c.nu).collect();
            slot += c.nu;
            (c.index, c.expanding_sign(), slots)
        })
        .collect();
    let first_elliptic_slot = slot;
    let mut mis_sum = vec![0.0; groups.len()];
    let mut n_retained = 0u64;
    let mut balance: Vec<(usize, usize, BatchMeans, f64)> = (first_elliptic_slot..model.width)
        .flat_map(|p| hyperbolic.iter().map(move |c| (p, c.index, BatchMeans::new(1000), 0.0)))
        .collect();
    let cfg = TrajectoryConfig::new(steps, burn_in);
    let out = run_trajectory_with(model, nf, &cfg, 0, |view| {
        if !view.retained {
            return;
        }
        n_retained += 1;
        for (g, (channel, sign, slots)) in groups.iter().enumerate() {
            mis_sum[g] += 1.0 - overlap_gram(nf, view.frame, *channel, *sign, slots);
        }
        if let Some(w) = view.weights {
            for (p, j, acc, sum) in balance.iter_mut() {
                acc.push(w.plus(*p, *j) - w.minus(*p, *j));
                *sum += w.total(*p, *j);
            }
        }
    })?;
    for b in balance.iter_mut() {
        b.3 /= n_retained as f64;
    }
    Ok(DynamicsRun {
        misalignment: mis_sum.iter().map(|s| s / n_retained as f64).collect(),
        balance,
        log_means: out.log_growth.iter().map(|b| b.mean()).collect(),
        sum_rule: out.max_sum_rule_defect,
        frame_defect: out.max_frame_defect,
    })
}

/// Trajectory-level checks: alignment of hyperbolic slots, its `λ²` scaling,
/// the `±` balance of elliptic slots in hyperbolic channels and the sum rules.
pub fn verify_dynamics(model: &StripModel, steps: u64, seed: u64) -> VerifyReport {
    let title = format!(
        "dynamics: L={} E={} lambda={} steps={} seed={}",
        model.width, model.energy, model.coupling, steps, seed
    );
    let channels = match channels_or_report(model.width, model.energy, &title) {
        Ok(c) => c,
        Err(r) => return r,
    };
    let mut report = VerifyReport::new(title);
    let nf = match build_normal_form(&channels) {
        Ok(nf) => nf,
        Err(e) => {
            report.flag("normal form construction", &e.to_string(), false);
            return report;
        }
    };
    let model = StripModel { seed, ..model.clone() };
    let burn_in = crate::frames::default_burn_in(model.coupling).min(steps / 2);
    let free = match dynamics_run(&model.with_coupling(0.0), &nf, steps, burn_in) {
        Ok(r) => r,
        Err(e) => {
            report.flag("free trajectory", &e.to_string(), false);
            return report;
        }
    };
    let slot_err = free.log_means.iter().zip(&nf.eta_hat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    report.residual("free slot exponents", "gamma_p(lambda=0) - eta_hat_p", slot_err, RESIDUAL_THRESHOLD);
    if !free.misalignment.is_empty() {
        let worst = free.misalignment.iter().cloned().fold(0.0, f64::max);
        report.residual("free hyperbolic alignment", "1 - |<w^s_k ^ ...|u_p ^ ...>|^2 at lambda=0", worst, RESIDUAL_THRESHOLD);
    }
    if model.coupling == 0.0 {
        report.residual("weight sum rules", "max over steps", free.sum_rule, RESIDUAL_THRESHOLD);
        report.residual("frame defect", "orthonormality and isotropy", free.frame_defect, RESIDUAL_THRESHOLD);
        return report;
    }
    let full = dynamics_run(&model, &nf, steps, burn_in);
    let half = dynamics_run(&model.with_coupling(0.5 * model.coupling), &nf, steps, burn_in);
    let (full, half) = match (full, half) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => {
            report.flag("perturbed trajectory", &e.to_string(), false);
            return report;
        }
    };
    report.residual("weight sum rules", "max over steps", full.sum_rule.max(half.sum_rule), RESIDUAL_THRESHOLD);
    report.residual("frame defect", "orthonormality and isotropy", full.frame_defect.max(half.frame_defect), RESIDUAL_THRESHOLD);
    let hyp = channels.hyperbolic_by_rate();
    for (g, c) in hyp.iter().enumerate() {
        let ratio = full.misalignment[g] / half.misalignment[g];
        report.ratio(
            &format!("misalignment scaling, channel {}", c.index),
            &format!(
                "avg(1 - overlap) at lambda vs lambda/2: {:.3e} / {:.3e}",
                full.misalignment[g], half.misalignment[g]
            ),
            ratio,
            2.0,
            8.0,
        );
        report.residual(
            &format!("wedge overlap, channel {}", c.index),
            "1 - avg |<w ^ w|u ^ u>|^2 (must be small)",
            full.misalignment[g],
            0.1,
        );
    }
    if let Some((p, j, ratio)) = full
        .balance
        .iter()
        .map(|(p, j, acc, total)| (*p, *j, acc.mean().abs() / (0.2 * total + 5.0 * acc.stderr())))
        .max_by(|a, b| a.2.total_cmp(&b.2))
    {
        report.residual(
            "+/- balance, elliptic slots in hyperbolic channels",
            &format!(
                "max |<rho+> - <rho->| / (0.2 (<rho+> + <rho->) + 5 se), worst at slot {} channel {j}",
                p + 1
            ),
            ratio,
            1.0,
        );
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn algebra_small_strip_passes() {
        let r = verify_algebra(5, 0.2, 0.3, 10, 1);
        assert!(r.passed, "{r}");
    }

    #[test]
    fn algebra_mixed_strip_passes() {
        let r = verify_algebra(13, 0.95, 0.1, 3, 1);
        assert!(r.passed, "{r}");
    }

    #[test]
    fn parabolic_is_a_single_entry() {
        let r = verify_algebra(4, 0.0, 0.1, 3, 1);
        assert_eq!(r.entries.len(), 1);
        assert!(r.passed);
    }

    #[test]
    fn report_serialization_is_stable() {
        let a = serde_json::to_string(&verify_algebra(3, 0.3, 0.2, 2, 9)).unwrap();
        let b = serde_json::to_string(&verify_algebra(3, 0.3, 0.2, 2, 9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_chain_moments() {
        let r = verify_moments(1, 0.0, 20_000, 3);
        assert!(r.passed, "{r}");
    }

    #[test]
    fn report_overall_flag() {
        let mut r = VerifyReport::new("t");
        r.residual("a", "x", 1e-12, 1e-8);
        assert!(r.passed);
        r.ratio("b", "y", 9.0, 2.0, 8.0);
        assert!(!r.passed);
        assert_eq!(r.failures().count(), 1);
    }
}
