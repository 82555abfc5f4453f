//! Rotation normal form of the free transfer matrix and the perturbation.
//!
//! Coordinates: the real orthogonal matrix `m` has columns `Φ_q`, the real
//! eigenvectors of the Laplacian:
//!
//! * `Φ_0 = 1/√L`, and `Φ_{L/2}(c) = (-1)^c / √L` for even `L`;
//! * `Φ_q(c) = √(2/L) sin(2πqc/L)` and `Φ_{L-q}(c) = √(2/L) cos(2πqc/L)` for `1 ≤ q < L/2`.
//!
//! With the unitary Fourier matrix `f_{c,q} = e^{2πiqc/L}/√L`, the matrix
//! `d = f* m` is block diagonal with blocks `(1/√2)[[-i, 1], [i, 1]]` on
//! `(q, L-q)`. The basis change
//!
//! ```text
//! M = [[m h, 0], [m (μ/2) h, m h⁻¹ g²]]
//! ```
//!
//! brings `A = [[Δ - E, -1], [1, 0]]` to the block rotation `R`, and
//! `M⁻¹ T(n) M = R (1 - λ P(n))` with `P = [[0, 0], [B, 0]]`,
//! `B = g² h mᵗ V m h`.
//!
//! On a hyperbolic channel `det` of the `2 x 2` block of `M` equals `g² = -1`,
//! so `Mᵗ J M = J_g` where `J_g` carries `g²` on its off-diagonal blocks.
//! `R` and `1 - λP` are symplectic in every case.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{laplacian, PotentialColumn};
use crate::spectral::{ChannelData, ChannelKind};

const I: Complex64 = Complex64::new(0.0, 1.0);
const BUILD_TOLERANCE: f64 = 1e-8;

/// Sparse column of `W`: (component, value) pairs.
pub type SparseColumn = Vec<(usize, Complex64)>;

#[derive(Debug, Clone)]
pub struct NormalFormData {
    pub width: usize,
    pub energy: f64,
    pub channels: ChannelData,
    /// Real eigenvectors of the Laplacian (columns).
    pub m: DMatrix<f64>,
    /// Unitary discrete Fourier matrix.
    pub f: DMatrix<Complex64>,
    /// `f* m`.
    pub d: DMatrix<Complex64>,
    /// Reflection `q ↦ -q mod L`.
    pub reflection: DMatrix<f64>,
    pub mode_mu: Vec<f64>,
    pub mode_h: Vec<f64>,
    pub mode_g2: Vec<f64>,
    pub m_full: DMatrix<f64>,
    pub m_inv: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Columns `w⁺_0..w⁺_{L-1}, w⁻_0..w⁻_{L-1}`.
    pub w: DMatrix<Complex64>,
    /// Nonzero entries of each column of `w`, same order.
    pub w_sparse: Vec<SparseColumn>,
    /// `projections[j][0] = π_j⁺`, `projections[j][1] = π_j⁻`.
    pub projections: Vec<[DMatrix<Complex64>; 2]>,
    pub eta_hat: Vec<f64>,
    /// `2 x 2` blocks of `R` acting on `(q, q + L)`, row major.
    pub r_blocks: Vec<[f64; 4]>,
    /// `m h` (columns scaled).
    pub(crate) mh: DMatrix<f64>,
    /// `g² h mᵗ`.
    pub(crate) ghmt: DMatrix<f64>,
}

fn real_eigenbasis(width: usize) -> DMatrix<f64> {
    let l = width as f64;
    let mut m = DMatrix::zeros(width, width);
    for c in 0..width {
        m[(c, 0)] = 1.0 / l.sqrt();
    }
    if width % 2 == 0 && width >= 2 {
        for c in 0..width {
            m[(c, width / 2)] = if c % 2 == 0 { 1.0 } else { -1.0 } / l.sqrt();
        }
    }
    let scale = (2.0 / l).sqrt();
    for q in 1..width.div_ceil(2) {
        for c in 0..width {
            let theta = 2.0 * std::f64::consts::PI * ((q * c) % width) as f64 / l;
            m[(c, q)] = scale * theta.sin();
            m[(c, width - q)] = scale * theta.cos();
        }
    }
    m
}

fn fourier_matrix(width: usize) -> DMatrix<Complex64> {
    let l = width as f64;
    DMatrix::from_fn(width, width, |c, q| {
        Complex64::from_polar(1.0 / l.sqrt(), 2.0 * std::f64::consts::PI * ((q * c) % width) as f64 / l)
    })
}

fn reflection(width: usize) -> DMatrix<f64> {
    DMatrix::from_fn(width, width, |a, b| if (a + b) % width == 0 { 1.0 } else { 0.0 })
}

/// Symplectic form twisted by `g²`: `[[0, -g²], [g², 0]]`.
pub fn twisted_form(mode_g2: &[f64]) -> DMatrix<f64> {
    let width = mode_g2.len();
    let mut j = DMatrix::zeros(2 * width, 2 * width);
    for (q, &g2) in mode_g2.iter().enumerate() {
        j[(q, q + width)] = -g2;
        j[(q + width, q)] = g2;
    }
    j
}

/// `A = [[Δ - E, -1], [1, 0]]`.
pub fn free_transfer(width: usize, energy: f64) -> DMatrix<f64> {
    let delta = laplacian(width);
    let mut a = DMatrix::zeros(2 * width, 2 * width);
    for r in 0..width {
        for c in 0..width {
            a[(r, c)] = delta[(r, c)];
        }
        a[(r, r)] -= energy;
        a[(r, r + width)] = -1.0;
        a[(r + width, r)] = 1.0;
    }
    a
}

/// Normal form for the given channel data.
pub fn build_normal_form(channels: &ChannelData) -> Result<NormalFormData> {
    let width = channels.width;
    let energy = channels.energy;
    let m = real_eigenbasis(width);
    let f = fourier_matrix(width);
    let d = f.adjoint() * m.map(|x| Complex64::new(x, 0.0));

    let mode_channel = &channels.channel_of_mode;
    let ch = |q: usize| &channels.channels[mode_channel[q]];
    let mode_mu: Vec<f64> = (0..width).map(|q| ch(q).mu).collect();
    let mode_h: Vec<f64> = (0..width).map(|q| ch(q).h).collect();
    let mode_g2: Vec<f64> = (0..width).map(|q| ch(q).g_squared()).collect();

    let n = 2 * width;
    let mut m_full = DMatrix::zeros(n, n);
    let mut m_inv = DMatrix::zeros(n, n);
    for q in 0..width {
        let (h, mu, g2) = (mode_h[q], mode_mu[q], mode_g2[q]);
        for c in 0..width {
            let x = m[(c, q)];
            m_full[(c, q)] = x * h;
            m_full[(c + width, q)] = x * 0.5 * mu * h;
            m_full[(c + width, q + width)] = x * g2 / h;
            m_inv[(q, c)] = x / h;
            m_inv[(q + width, c)] = -0.5 * g2 * mu * h * x;
            m_inv[(q + width, c + width)] = g2 * h * x;
        }
    }

    let mut r = DMatrix::zeros(n, n);
    let mut r_blocks = Vec::with_capacity(width);
    for q in 0..width {
        let c = ch(q);
        let block = match c.kind {
            ChannelKind::Elliptic => {
                let (s, co) = c.eta.sin_cos();
                [co, -s, s, co]
            }
            ChannelKind::Hyperbolic => {
                let s = c.eta.sinh();
                [0.5 * c.mu, s, s, 0.5 * c.mu]
            }
        };
        r[(q, q)] = block[0];
        r[(q, q + width)] = block[1];
        r[(q + width, q)] = block[2];
        r[(q + width, q + width)] = block[3];
        r_blocks.push(block);
    }

    // W = (1/√2) [[d*, dᵗ], [-i g d*, i g dᵗ]]
    let ds = d.adjoint();
    let dt = d.transpose();
    let mut w = DMatrix::zeros(n, n);
    let s2 = std::f64::consts::FRAC_1_SQRT_2;
    for row in 0..width {
        let g = ch(row).g();
        for col in 0..width {
            w[(row, col)] = ds[(row, col)] * s2;
            w[(row, col + width)] = dt[(row, col)] * s2;
            w[(row + width, col)] = -I * g * ds[(row, col)] * s2;
            w[(row + width, col + width)] = I * g * dt[(row, col)] * s2;
        }
    }
    let w_sparse: Vec<SparseColumn> = (0..n)
        .map(|col| (0..n).filter(|&row| w[(row, col)].norm() > 1e-14).map(|row| (row, w[(row, col)])).collect())
        .collect();

    let projections = channels
        .channels
        .iter()
        .map(|c| {
            let proj = |offset: usize| {
                let mut p = DMatrix::<Complex64>::zeros(n, n);
                for &q in &c.fourier_indices {
                    let col = w.column(q + offset);
                    p += col * col.adjoint();
                }
                p
            };
            [proj(0), proj(width)]
        })
        .collect();

    let mh = DMatrix::from_fn(width, width, |c, q| m[(c, q)] * mode_h[q]);
    let ghmt = DMatrix::from_fn(width, width, |q, c| mode_g2[q] * mode_h[q] * m[(c, q)]);

    let nf = NormalFormData {
        width,
        energy,
        channels: channels.clone(),
        reflection: reflection(width),
        eta_hat: channels.slot_exponents(),
        m,
        f,
        d,
        mode_mu,
        mode_h,
        mode_g2,
        m_full,
        m_inv,
        r,
        w,
        w_sparse,
        projections,
        r_blocks,
        mh,
        ghmt,
    };
    let residual = nf.inverse_residual().max(nf.conjugation_residual());
    if !(residual <= BUILD_TOLERANCE) {
        return Err(Error::NumericalDegeneracy { what: "normal form", residual });
    }
    Ok(nf)
}

impl NormalFormData {
    pub fn channel_of_mode(&self, q: usize) -> usize {
        self.channels.channel_of_mode[q]
    }

    /// `max |M M⁻¹ - 1|`.
    pub fn inverse_residual(&self) -> f64 {
        linalg::identity_residual(&(&self.m_full * &self.m_inv))
    }

    /// `max |M⁻¹ A M - R|`.
    pub fn conjugation_residual(&self) -> f64 {
        let a = free_transfer(self.width, self.energy);
        linalg::max_abs(&(&self.m_inv * a * &self.m_full - &self.r))
    }

    /// `max |Mᵗ J M - J_g|` (see module docs).
    pub fn m_symplectic_residual(&self) -> f64 {
        let j = linalg::symplectic_form(self.width);
        linalg::max_abs(&(self.m_full.transpose() * j * &self.m_full - twisted_form(&self.mode_g2)))
    }

    /// Column `w^s_q` (`sign = +1` or `-1`).
    pub fn w_column(&self, q: usize, sign: i8) -> DVector<Complex64> {
        self.w.column(if sign > 0 { q } else { q + self.width }).into_owned()
    }

    pub fn projection(&self, channel: usize, sign: i8) -> &DMatrix<Complex64> {
        &self.projections[channel][if sign > 0 { 0 } else { 1 }]
    }

    /// Eigenvalue of `R` on `w^s_q`.
    pub fn mode_eigenvalue(&self, q: usize, sign: i8) -> Complex64 {
        self.channels.channels[self.channel_of_mode(q)].eigenvalue(sign as f64)
    }

    /// `B = g² h mᵗ V m h`, the lower-left block of `P`.
    pub fn p_block(&self, column: &PotentialColumn) -> DMatrix<f64> {
        let mut vmh = self.mh.clone();
        for (c, &v) in column.values.iter().enumerate() {
            vmh.row_mut(c).scale_mut(v);
        }
        &self.ghmt * vmh
    }

    /// `W* J W` predicted in closed form: `(i/2)[[g + g*, (g* - g) S], [(g - g*) S, -g - g*]]`.
    pub fn basis_form_target(&self) -> DMatrix<Complex64> {
        let l = self.width;
        let mut out = DMatrix::zeros(2 * l, 2 * l);
        for a in 0..l {
            let g = self.channels.channels[self.channel_of_mode(a)].g();
            let b = (l - a) % l;
            out[(a, a)] = 0.5 * I * (g + g.conj());
            out[(a + l, a + l)] = -0.5 * I * (g + g.conj());
            out[(a, b + l)] = 0.5 * I * (g.conj() - g);
            out[(a + l, b)] = 0.5 * I * (g - g.conj());
        }
        out
    }

    /// Random unit vector in the range of `π_j^s`.
    pub fn random_channel_vector<R: Rng + ?Sized>(&self, rng: &mut R, channel: usize, sign: i8) -> DVector<Complex64> {
        let modes = &self.channels.channels[channel].fourier_indices;
        let mut coeffs: Vec<Complex64> =
            modes.iter().map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))).collect();
        let norm = coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        coeffs.iter_mut().for_each(|c| *c /= norm);
        let mut out = DVector::zeros(2 * self.width);
        for (&q, &c) in modes.iter().zip(&coeffs) {
            out += self.w_column(q, sign) * c;
        }
        out
    }
}

/// `v̂(k) = (1/L) Σ_s v_s e^{2πisk/L}` and the Toeplitz matrix `V̂_{a,b} = v̂(b - a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierPotential {
    pub vhat: Vec<Complex64>,
    pub matrix: DMatrix<Complex64>,
}

impl FourierPotential {
    /// `v̂(k)` for any integer `k` (periodic in `L`).
    pub fn at(&self, k: i64) -> Complex64 {
        let l = self.vhat.len() as i64;
        self.vhat[k.rem_euclid(l) as usize]
    }
}

pub fn fourier_potential(column: &PotentialColumn) -> FourierPotential {
    let width = column.len();
    let l = width as f64;
    let vhat: Vec<Complex64> = (0..width)
        .map(|k| {
            column
                .values
                .iter()
                .enumerate()
                .map(|(s, &v)| Complex64::from_polar(v, 2.0 * std::f64::consts::PI * ((s * k) % width) as f64 / l))
                .sum::<Complex64>()
                / l
        })
        .collect();
    let matrix = DMatrix::from_fn(width, width, |a, b| vhat[(b + width - a) % width]);
    FourierPotential { vhat, matrix }
}

/// `P = [[0, 0], [B, 0]]` and `P̃ = P + Pᵗ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationMatrix {
    pub p: DMatrix<f64>,
    pub ptilde: DMatrix<f64>,
    /// `g²` per Fourier mode.
    pub mode_g2: Vec<f64>,
}

impl PerturbationMatrix {
    pub fn width(&self) -> usize {
        self.p.nrows() / 2
    }

    pub fn block(&self) -> DMatrix<f64> {
        let l = self.width();
        self.p.view((l, 0), (l, l)).into_owned()
    }

    /// `max |Pᵗ J_g + J_g P|` with the twisted form `J_g`; equals `J` when all channels are elliptic.
    pub fn lie_algebra_residual(&self) -> f64 {
        let j = twisted_form(&self.mode_g2);
        linalg::max_abs(&(self.p.transpose() * &j + &j * &self.p))
    }

    /// `max |G B - (G B)ᵗ|` with `G = diag(g²)`.
    pub fn symmetry_residual(&self) -> f64 {
        let mut gb = self.block();
        for (r, &g2) in self.mode_g2.iter().enumerate() {
            gb.row_mut(r).scale_mut(g2);
        }
        linalg::max_abs(&(&gb - gb.transpose()))
    }
}

pub fn build_p(nf: &NormalFormData, column: &PotentialColumn) -> PerturbationMatrix {
    let l = nf.width;
    assert_eq!(column.len(), l, "potential column length must equal the strip width");
    let b = nf.p_block(column);
    let mut p = DMatrix::zeros(2 * l, 2 * l);
    p.view_mut((l, 0), (l, l)).copy_from(&b);
    let ptilde = &p + p.transpose();
    PerturbationMatrix { p, ptilde, mode_g2: nf.mode_g2.clone() }
}

/// Closed-form matrix element `<w_l^τ|P|w_k^σ> = τ (i/2) g_l h_l h_k v̂(σk - τl)` (Fourier mode indices).
pub fn matrix_element(nf: &NormalFormData, vhat: &FourierPotential, l: usize, k: usize, tau: i8, sigma: i8) -> Complex64 {
    let g = nf.channels.channels[nf.channel_of_mode(l)].g();
    let arg = sigma as i64 * k as i64 - tau as i64 * l as i64;
    tau as f64 * 0.5 * I * g * nf.mode_h[l] * nf.mode_h[k] * vhat.at(arg)
}

/// Items of the second-moment identities for the perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MomentItem {
    /// `E <w|P|w'> = 0`.
    I,
    /// `E <w_l^τ|P|w_k^σ><w_k^σ|P|w_l^τ>`.
    Ii,
    /// `E <w_l^τ|P*|w_k^σ><w_k^σ|P|w_l^τ>`.
    Iii,
    /// `E <w_l^σ|P̃|w_k^{-σ}><w_k^{-σ}|P̃|w_l^σ>`, elliptic channels.
    Iv,
    /// `E <w_l^σ| |RP|² |w_l^σ>`.
    V,
}

impl MomentItem {
    pub const ALL: [MomentItem; 5] = [MomentItem::I, MomentItem::Ii, MomentItem::Iii, MomentItem::Iv, MomentItem::V];

    pub fn name(self) -> &'static str {
        match self {
            MomentItem::I => "i",
            MomentItem::Ii => "ii",
            MomentItem::Iii => "iii",
            MomentItem::Iv => "iv",
            MomentItem::V => "v",
        }
    }
}

/// Closed-form expectation of a moment item for channels `l`, `k` and signs `τ`, `σ`.
///
/// Item (iv) uses the sign pair `(σ, -σ)`, so only `sigma` is read; item (v)
/// reads `l` and `sigma` only.
pub fn moment_targets(
    channels: &ChannelData,
    item: MomentItem,
    l: usize,
    k: usize,
    tau: i8,
    sigma: i8,
) -> Result<Complex64> {
    if l >= channels.len() || k >= channels.len() {
        return Err(Error::InvalidCase(format!("channel index out of range ({l}, {k})")));
    }
    if tau.abs() != 1 || sigma.abs() != 1 {
        return Err(Error::InvalidCase("signs must be +1 or -1".into()));
    }
    let cl = &channels.channels[l];
    let ck = &channels.channels[k];
    let big_l = channels.width as f64;
    let hh = cl.h_squared() * ck.h_squared();
    let excluded = || {
        if l == k && tau == sigma {
            Err(Error::InvalidCase(format!("diagonal case l = k = {l}, tau = sigma")))
        } else {
            Ok(())
        }
    };
    match item {
        MomentItem::I => Ok(Complex64::new(0.0, 0.0)),
        MomentItem::Ii => {
            excluded()?;
            Ok(-(tau as f64) * sigma as f64 / (4.0 * big_l) * cl.g() * ck.g() * hh)
        }
        MomentItem::Iii => {
            excluded()?;
            Ok(Complex64::new(hh / (4.0 * big_l), 0.0))
        }
        MomentItem::Iv => {
            if !cl.is_elliptic() || !ck.is_elliptic() {
                return Err(Error::InvalidCase("item iv requires elliptic channels".into()));
            }
            Ok(Complex64::new(hh / big_l, 0.0))
        }
        MomentItem::V => Ok(Complex64::new(0.5 * channels.h_av_sq * cl.h_squared(), 0.0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_transfer, random_stream, sample_column, DisorderLaw, StripModel};
    use crate::spectral::channel_spectrum;
    use proptest::prelude::*;

    fn nf(width: usize, energy: f64) -> NormalFormData {
        build_normal_form(&channel_spectrum(width, energy).unwrap()).unwrap()
    }

    fn cmax(m: &DMatrix<Complex64>) -> f64 {
        linalg::max_abs_c(m)
    }

    #[test]
    fn single_chain_band_center() {
        let nf = nf(1, 0.0);
        assert!(linalg::identity_residual(&nf.m_full) < 1e-15);
        assert!(linalg::max_abs(&(&nf.r - linalg::symplectic_form(1))) < 1e-15);
    }

    #[test]
    fn eigenbasis_is_orthogonal_and_diagonalizes() {
        for width in 1..=16 {
            let m = real_eigenbasis(width);
            assert!(linalg::identity_residual(&(m.transpose() * &m)) < 1e-12, "{width}");
            let diag = m.transpose() * laplacian(width) * &m;
            for a in 0..width {
                for b in 0..width {
                    let want = if a == b { crate::model::laplacian_eigenvalue(width, a) } else { 0.0 };
                    assert!((diag[(a, b)] - want).abs() < 1e-12, "{width} {a} {b}");
                }
            }
        }
    }

    #[test]
    fn d_blocks_and_reflection() {
        for width in [1usize, 2, 3, 4, 5, 8, 13] {
            let nf = nf(width, if width == 4 || width == 8 { 0.3 } else { 0.1 });
            let s = std::f64::consts::FRAC_1_SQRT_2;
            for q in 1..width.div_ceil(2) {
                let p = width - q;
                assert!((nf.d[(q, q)] - Complex64::new(0.0, -s)).norm() < 1e-12);
                assert!((nf.d[(q, p)] - Complex64::new(s, 0.0)).norm() < 1e-12);
                assert!((nf.d[(p, q)] - Complex64::new(0.0, s)).norm() < 1e-12);
                assert!((nf.d[(p, p)] - Complex64::new(s, 0.0)).norm() < 1e-12);
            }
            let ddt = &nf.d * nf.d.transpose();
            assert!(cmax(&(ddt - linalg::to_complex(&nf.reflection))) < 1e-12, "{width}");
            assert!(linalg::identity_residual_c(&(nf.d.adjoint() * &nf.d)) < 1e-12);
        }
    }

    #[test]
    fn normal_form_invariants() {
        for &(width, energy) in &[(13usize, -0.03), (13, 0.95), (5, 0.2), (2, 0.4), (6, 3.1), (7, -3.5), (4, 0.3)] {
            let nf = nf(width, energy);
            assert!(nf.inverse_residual() < 1e-10);
            assert!(nf.conjugation_residual() < 1e-10, "{width} {energy}");
            assert!(nf.m_symplectic_residual() < 1e-10);
            assert!(linalg::symplectic_residual(&nf.r) < 1e-10);
            assert!(linalg::identity_residual_c(&(nf.w.adjoint() * &nf.w)) < 1e-10);
            let wjw = nf.w.adjoint() * linalg::to_complex(&linalg::symplectic_form(width)) * &nf.w;
            assert!(cmax(&(wjw - nf.basis_form_target())) < 1e-10, "{width} {energy}");
            assert!(nf.mode_h.iter().all(|&h| h > 0.0));
        }
    }

    #[test]
    fn m_is_symplectic_when_all_elliptic() {
        let nf = nf(13, -0.03);
        assert!(linalg::symplectic_residual(&nf.m_full) < 1e-10);
        let mixed = self::nf(13, 0.95);
        assert!(linalg::symplectic_residual(&mixed.m_full) > 0.5);
    }

    #[test]
    fn r_eigenvectors() {
        for &(width, energy) in &[(13usize, 0.95), (6, 3.1), (5, 0.2)] {
            let nf = nf(width, energy);
            let r = linalg::to_complex(&nf.r);
            for q in 0..width {
                for sign in [1i8, -1] {
                    let w = nf.w_column(q, sign);
                    let lhs = &r * &w;
                    let rhs = &w * nf.mode_eigenvalue(q, sign);
                    assert!((lhs - rhs).camax() < 1e-10, "{width} {energy} {q} {sign}");
                }
            }
        }
    }

    #[test]
    fn mixed_normal_form_blocks() {
        let nf = nf(13, 0.95);
        let hyperbolic = nf.mode_g2.iter().filter(|&&g| g < 0.0).count();
        assert_eq!(hyperbolic, 5);
        // eigenvalues of A restricted to each block agree with channel data
        for (q, b) in nf.r_blocks.iter().enumerate() {
            let tr = b[0] + b[3];
            let det = b[0] * b[3] - b[1] * b[2];
            assert!((det - 1.0).abs() < 1e-12);
            assert!((tr - nf.mode_mu[q]).abs() < 1e-12);
            let c = &nf.channels.channels[nf.channel_of_mode(q)];
            let expected = match c.kind {
                ChannelKind::Elliptic => 2.0 * c.eta.cos(),
                ChannelKind::Hyperbolic => c.mu.signum() * 2.0 * c.eta.cosh(),
            };
            assert!((tr - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn projections_resolve_identity() {
        for &(width, energy) in &[(13usize, 0.95), (8, 0.5), (1, 0.3)] {
            let nf = nf(width, energy);
            let n = 2 * width;
            let mut total = DMatrix::<Complex64>::zeros(n, n);
            for (j, c) in nf.channels.channels.iter().enumerate() {
                for s in [1i8, -1] {
                    let p = nf.projection(j, s);
                    total += p;
                    assert!(cmax(&(p * p - p)) < 1e-12);
                    let trace: Complex64 = p.trace();
                    assert!((trace.re - c.nu as f64).abs() < 1e-12);
                    for (k, _) in nf.channels.channels.iter().enumerate() {
                        assert!(cmax(&(p * nf.projection(k, -s))) < 1e-12);
                        if k != j {
                            assert!(cmax(&(p * nf.projection(k, s))) < 1e-12);
                        }
                    }
                }
            }
            assert!(linalg::identity_residual_c(&total) < 1e-12);
        }
    }

    #[test]
    fn fourier_potential_basics() {
        let fp = fourier_potential(&PotentialColumn::new(vec![0.7; 6]));
        assert!((fp.vhat[0] - Complex64::new(0.7, 0.0)).norm() < 1e-15);
        assert!(fp.vhat[1..].iter().all(|v| v.norm() < 1e-15));
        let col = PotentialColumn::new(vec![0.3, -1.2, 2.0, 0.5, -0.1]);
        let fp = fourier_potential(&col);
        let parseval: f64 = fp.vhat.iter().map(|v| v.norm_sqr()).sum();
        let direct: f64 = col.values.iter().map(|v| v * v).sum::<f64>() / 5.0;
        assert!((parseval - direct).abs() < 1e-14);
        for k in 0..5i64 {
            assert!((fp.at(k).conj() - fp.at(-k)).norm() < 1e-14);
            assert!((fp.at(k) - fp.at(k + 5)).norm() < 1e-15);
        }
        assert!(cmax(&(&fp.matrix - fp.matrix.adjoint())) < 1e-15);
        // V̂ = f* V f
        let f = fourier_matrix(5);
        let v = DMatrix::from_diagonal(&DVector::from_vec(col.values.clone()));
        assert!(cmax(&(f.adjoint() * linalg::to_complex(&v) * &f - &fp.matrix)) < 1e-14);
    }

    #[test]
    fn fourier_second_moments() {
        let width = 5;
        let model = StripModel::new(width, 0.0, 1.0, DisorderLaw::Rademacher, 4).unwrap();
        let mut rng = random_stream(4, 0);
        let n = 100_000;
        let (mut sum_q_minus_q, mut sum_q_q) = (0.0, Complex64::new(0.0, 0.0));
        let mut sq = 0.0;
        for _ in 0..n {
            let fp = fourier_potential(&sample_column(&model, &mut rng));
            let x = (fp.at(1) * fp.at(-1)).re;
            sum_q_minus_q += x;
            sq += x * x;
            sum_q_q += fp.at(1) * fp.at(2);
        }
        let mean = sum_q_minus_q / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - 0.2).abs() < 4.0 * se, "{mean} ± {se}");
        assert!((sum_q_q / n as f64).norm() < 4.0 * 0.2 / (n as f64).sqrt() * 2.0);
    }

    #[test]
    fn zero_column_gives_zero_perturbation() {
        let nf = nf(5, 0.2);
        let p = build_p(&nf, &PotentialColumn::zeros(5));
        assert_eq!(linalg::max_abs(&p.p), 0.0);
    }

    #[test]
    fn perturbation_consistency_and_matrix_elements() {
        for &(width, energy) in &[(5usize, 0.2), (13, 0.95), (6, 3.1), (4, 0.3)] {
            let nf = nf(width, energy);
            let model = StripModel::new(width, energy, 0.3, DisorderLaw::Gaussian, 1).unwrap();
            let mut rng = random_stream(1, 0);
            for _ in 0..5 {
                let col = sample_column(&model, &mut rng);
                let pm = build_p(&nf, &col);
                let t = build_transfer(&model, &col);
                let one = DMatrix::<f64>::identity(2 * width, 2 * width);
                let lhs = &nf.m_inv * &t.entries * &nf.m_full;
                let rhs = &nf.r * (one - &pm.p * model.coupling);
                assert!(linalg::max_abs(&(lhs - rhs)) < 1e-10);
                assert!(pm.lie_algebra_residual() < 1e-12);
                assert!(pm.symmetry_residual() < 1e-12);
                let n = 2 * width;
                for a in 0..width {
                    for b in 0..n {
                        assert_eq!(pm.p[(a, b)], 0.0);
                        assert_eq!(pm.p[(b, a + width)], 0.0);
                    }
                }
                let fp = fourier_potential(&col);
                let wpw = nf.w.adjoint() * linalg::to_complex(&pm.p) * &nf.w;
                for l in 0..width {
                    for k in 0..width {
                        for (ti, tau) in [(0usize, 1i8), (width, -1)] {
                            for (si, sigma) in [(0usize, 1i8), (width, -1)] {
                                let want = matrix_element(&nf, &fp, l, k, tau, sigma);
                                assert!((wpw[(l + ti, k + si)] - want).norm() < 1e-10, "{width} {energy}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn moment_target_values() {
        let ch = channel_spectrum(7, 0.1).unwrap();
        let iii = moment_targets(&ch, MomentItem::Iii, 1, 2, 1, -1).unwrap();
        assert!(iii.re > 0.0 && iii.im == 0.0);
        let ii = moment_targets(&ch, MomentItem::Ii, 1, 2, 1, 1).unwrap();
        assert!((ii.re + iii.re).abs() < 1e-15);
        assert!(matches!(moment_targets(&ch, MomentItem::Ii, 2, 2, 1, 1), Err(Error::InvalidCase(_))));
        let one = channel_spectrum(1, 0.0).unwrap();
        let v = moment_targets(&one, MomentItem::V, 0, 0, 1, 1).unwrap();
        assert!((v.re - 0.5).abs() < 1e-15);
        let mixed = channel_spectrum(13, 0.95).unwrap();
        assert!(moment_targets(&mixed, MomentItem::Iv, 0, 4, 1, 1).is_err());
        let ii_h = moment_targets(&mixed, MomentItem::Ii, 0, 1, 1, 1).unwrap();
        // g_0 g_1 = -1 flips the sign
        assert!(ii_h.re > 0.0);
    }

    /// Lagrangian identity `(1 + σ_j σ_k) <v_j|Π|v_k> = δ_jk` for J-eigenvectors.
    #[test]
    fn lagrangian_projection_identity() {
        let width = 5;
        let mut rng = random_stream(8, 1);
        let nf = nf(width, -0.2);
        assert!(nf.channels.all_elliptic());
        for _ in 0..5 {
            let frame = crate::frames::random_frame(&mut rng, width, width).unwrap();
            let pi = linalg::to_complex(&(&frame.columns * frame.columns.transpose()));
            // canonical J-eigenvectors (e_l ∓ i e_{l+L})/√2 satisfy J v = ±i v
            let mut vs: Vec<(DVector<Complex64>, f64)> = Vec::new();
            for l in 0..width {
                for s in [1.0, -1.0] {
                    let mut v = DVector::zeros(2 * width);
                    v[l] = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
                    v[l + width] = Complex64::new(0.0, -s * std::f64::consts::FRAC_1_SQRT_2);
                    vs.push((v, s));
                }
            }
            for q in 0..width {
                vs.push((nf.w_column(q, 1), 1.0));
                vs.push((nf.w_column(q, -1), -1.0));
            }
            let j = linalg::to_complex(&linalg::symplectic_form(width));
            for (v, s) in &vs {
                assert!((&j * v - v * Complex64::new(0.0, *s)).camax() < 1e-12);
            }
            for (a, (va, sa)) in vs.iter().enumerate() {
                for (b, (vb, sb)) in vs.iter().enumerate() {
                    // identity applies within one orthonormal family
                    if (a < 2 * width) != (b < 2 * width) {
                        continue;
                    }
                    let x = linalg::inner(va, &(&pi * vb)) * (1.0 + sa * sb);
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((x - want).norm() < 1e-10);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn normal_form_holds_off_parabolic(width in 1usize..20, energy in -4.5f64..4.5) {
            let Ok(ch) = channel_spectrum(width, energy) else { return Ok(()) };
            // stay away from parabolic points where h blows up
            prop_assume!(ch.channels.iter().all(|c| (c.mu.abs() - 2.0).abs() > 1e-3));
            let nf = build_normal_form(&ch).unwrap();
            prop_assert!(nf.conjugation_residual() < 1e-8);
            prop_assert!(nf.m_symplectic_residual() < 1e-8);
            prop_assert!(linalg::identity_residual_c(&(nf.w.adjoint() * &nf.w)) < 1e-10);
        }

        #[test]
        fn parseval(values in proptest::collection::vec(-3.0f64..3.0, 1..24)) {
            let l = values.len() as f64;
            let direct: f64 = values.iter().map(|v| v * v).sum::<f64>() / l;
            let fp = fourier_potential(&PotentialColumn::new(values));
            let s: f64 = fp.vhat.iter().map(|v| v.norm_sqr()).sum();
            prop_assert!((s - direct).abs() < 1e-12 * (1.0 + direct));
        }
    }
}
