//! Dual certificates built from the squared Fejér kernel.
//!
//! The pair of polynomials
//!
//! ```text
//! P(τ) = Σ_k α1k K(τ-τ1k) + β1k K'(τ-τ1k) + Σ_k α2k K_g(τ-τ2k) + β2k K_g'(τ-τ2k)
//! Q(τ) = Σ_k α1k K_ḡ(τ-τ1k) + β1k K_ḡ'(τ-τ1k) + Σ_k α2k K(τ-τ2k) + β2k K'(τ-τ2k)
//! ```
//!
//! interpolates the amplitude signs with zero derivative on each support.
//! The coefficients solve a `2(K1+K2)` square system whose diagonal blocks
//! are deterministic and whose off-diagonal blocks are driven by the random
//! PSF ratio. Either channel may be empty, which reduces the construction to
//! the classical single-channel certificate.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dense::{self, CMat};
use crate::error::{DemixError, Result};
use crate::fejer::{derivative_factor, FejerKernel};
use crate::signal::{frequencies, wrap_distance, PsfRatio};
use crate::trig;

/// Upper bound on `‖I - W_i‖` for separated supports.
pub const BOUND_I_MINUS_W: f64 = 0.3623;
/// Upper bound on `‖W_i‖`.
pub const BOUND_W: f64 = 1.3623;
/// Upper bound on `‖W_i^{-1}‖`.
pub const BOUND_W_INV: f64 = 1.568;
/// Perturbation level below which the coefficient bounds of the
/// off-support analysis apply.
pub const DELTA_COEFFICIENTS: f64 = 0.25;
/// Upper end of the admissible range for `‖W_g‖` (keeps `‖I - W‖ < 1`).
pub const DELTA_INVERTIBLE: f64 = 0.6376;

const POWER_ITERS: usize = 200;
const POWER_TOL: f64 = 1e-10;

#[derive(Clone, Copy)]
enum Modulation {
    None,
    G,
    GBar,
}

/// The interpolation system `W [α1; cβ1; α2; cβ2] = [u1; 0; u2; 0]` with
/// `c = sqrt(|K''(0)|)`, and its solution once computed.
#[derive(Debug, Clone)]
pub struct CertificateSystem {
    kern: FejerKernel,
    psf: PsfRatio,
    taus1: Vec<f64>,
    taus2: Vec<f64>,
    w: CMat,
    coefficients: Option<Coefficients>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub alpha1: Vec<Complex64>,
    pub beta1: Vec<Complex64>,
    pub alpha2: Vec<Complex64>,
    pub beta2: Vec<Complex64>,
    pub signs1: Vec<Complex64>,
    pub signs2: Vec<Complex64>,
    pub condition: f64,
    pub relative_residual: f64,
}

/// Assembles `W` for the supports `taus1`, `taus2`.
pub fn build_system(kern: &FejerKernel, psf: &PsfRatio, taus1: &[f64], taus2: &[f64]) -> Result<CertificateSystem> {
    if psf.m() != kern.m() {
        return Err(DemixError::Shape(format!(
            "kernel built for M = {}, PSF ratio has M = {}",
            kern.m(),
            psf.m()
        )));
    }
    for &t in taus1.iter().chain(taus2) {
        if !(0.0..1.0).contains(&t) {
            return Err(DemixError::Domain(format!("location {t} outside [0, 1)")));
        }
    }
    let (k1, k2) = (taus1.len(), taus2.len());
    let size = 2 * (k1 + k2);
    let mut w = CMat::zeros(size, size);
    let mut sys = CertificateSystem {
        kern: kern.clone(),
        psf: psf.clone(),
        taus1: taus1.to_vec(),
        taus2: taus2.to_vec(),
        w: CMat::zeros(0, 0),
        coefficients: None,
    };
    sys.fill_block(&mut w, 0, 0, taus1, taus1, Modulation::None)?;
    sys.fill_block(&mut w, 0, 2 * k1, taus1, taus2, Modulation::G)?;
    sys.fill_block(&mut w, 2 * k1, 0, taus2, taus1, Modulation::GBar)?;
    sys.fill_block(&mut w, 2 * k1, 2 * k1, taus2, taus2, Modulation::None)?;
    sys.w = w;
    Ok(sys)
}

impl CertificateSystem {
    fn kernel(&self, modulation: Modulation, tau: f64, l: u32) -> Result<Complex64> {
        match modulation {
            Modulation::None => Ok(self.kern.eval(tau, l)),
            Modulation::G => self.kern.eval_modulated(&self.psf, false, tau, l),
            Modulation::GBar => self.kern.eval_modulated(&self.psf, true, tau, l),
        }
    }

    /// Writes `[[F, F'/c], [-F'/c, -F''/c²]]` at `(row, col)` with lags
    /// `rows[l] - cols[k]` evaluated directly (the kernels are 1-periodic).
    fn fill_block(&self, w: &mut CMat, row: usize, col: usize, rows: &[f64], cols: &[f64], modulation: Modulation) -> Result<()> {
        let c = self.kern.scale();
        let (kr, kc) = (rows.len(), cols.len());
        for (l, &ta) in rows.iter().enumerate() {
            for (k, &tb) in cols.iter().enumerate() {
                let lag = ta - tb;
                let f0 = self.kernel(modulation, lag, 0)?;
                let f1 = self.kernel(modulation, lag, 1)?;
                let f2 = self.kernel(modulation, lag, 2)?;
                w[(row + l, col + k)] = f0;
                w[(row + l, col + kc + k)] = f1 / c;
                w[(row + kr + l, col + k)] = -f1 / c;
                w[(row + kr + l, col + kc + k)] = -f2 / (c * c);
            }
        }
        Ok(())
    }

    pub fn kernel_ref(&self) -> &FejerKernel {
        &self.kern
    }

    pub fn psf(&self) -> &PsfRatio {
        &self.psf
    }

    pub fn taus1(&self) -> &[f64] {
        &self.taus1
    }

    pub fn taus2(&self) -> &[f64] {
        &self.taus2
    }

    pub fn matrix(&self) -> &CMat {
        &self.w
    }

    fn sub(&self, r0: usize, c0: usize, nr: usize, nc: usize) -> CMat {
        CMat::from_fn(nr, nc, |i, j| self.w[(r0 + i, c0 + j)])
    }

    pub fn w1(&self) -> CMat {
        let k = 2 * self.taus1.len();
        self.sub(0, 0, k, k)
    }

    pub fn w2(&self) -> CMat {
        let (a, b) = (2 * self.taus1.len(), 2 * self.taus2.len());
        self.sub(a, a, b, b)
    }

    pub fn wg(&self) -> CMat {
        let (a, b) = (2 * self.taus1.len(), 2 * self.taus2.len());
        self.sub(0, a, a, b)
    }

    pub fn wgbar(&self) -> CMat {
        let (a, b) = (2 * self.taus1.len(), 2 * self.taus2.len());
        self.sub(a, 0, b, a)
    }

    pub fn coefficients(&self) -> Option<&Coefficients> {
        self.coefficients.as_ref()
    }

    /// `P^(l)(τ)` evaluated through the kernel expansion rather than the
    /// coefficient vector `p`.
    pub fn p_from_kernels(&self, tau: f64, l: u32) -> Result<Complex64> {
        let co = self.require_solved()?;
        let mut acc = Complex64::new(0.0, 0.0);
        for (k, &t) in self.taus1.iter().enumerate() {
            acc += co.alpha1[k] * self.kern.eval(tau - t, l) + co.beta1[k] * self.kern.eval(tau - t, l + 1);
        }
        for (k, &t) in self.taus2.iter().enumerate() {
            acc += co.alpha2[k] * self.kernel(Modulation::G, tau - t, l)?
                + co.beta2[k] * self.kernel(Modulation::G, tau - t, l + 1)?;
        }
        Ok(acc)
    }

    /// `Q^(l)(τ)` through the kernel expansion.
    pub fn q_from_kernels(&self, tau: f64, l: u32) -> Result<Complex64> {
        let co = self.require_solved()?;
        let mut acc = Complex64::new(0.0, 0.0);
        for (k, &t) in self.taus1.iter().enumerate() {
            acc += co.alpha1[k] * self.kernel(Modulation::GBar, tau - t, l)?
                + co.beta1[k] * self.kernel(Modulation::GBar, tau - t, l + 1)?;
        }
        for (k, &t) in self.taus2.iter().enumerate() {
            acc += co.alpha2[k] * self.kern.eval(tau - t, l) + co.beta2[k] * self.kern.eval(tau - t, l + 1);
        }
        Ok(acc)
    }

    fn require_solved(&self) -> Result<&Coefficients> {
        self.coefficients
            .as_ref()
            .ok_or_else(|| DemixError::Parameter("certificate coefficients have not been solved".into()))
    }
}

fn check_signs(signs: &[Complex64], expected: usize, channel: u8) -> Result<()> {
    if signs.len() != expected {
        return Err(DemixError::Shape(format!(
            "channel {channel} has {expected} sources but {} signs",
            signs.len()
        )));
    }
    if let Some(s) = signs.iter().find(|s| (s.norm() - 1.0).abs() > 1e-9) {
        return Err(DemixError::Domain(format!(
            "channel {channel} sign {s} is not unit modulus"
        )));
    }
    Ok(())
}

/// Solves for `(α1, β1, α2, β2)` interpolating `signs1` on the channel-1
/// support and `signs2` on the channel-2 support.
pub fn solve_coefficients(mut sys: CertificateSystem, signs1: &[Complex64], signs2: &[Complex64]) -> Result<CertificateSystem> {
    let (k1, k2) = (sys.taus1.len(), sys.taus2.len());
    check_signs(signs1, k1, 1)?;
    check_signs(signs2, k2, 2)?;
    let zero = Complex64::new(0.0, 0.0);
    let mut rhs = Vec::with_capacity(2 * (k1 + k2));
    rhs.extend_from_slice(signs1);
    rhs.extend(std::iter::repeat(zero).take(k1));
    rhs.extend_from_slice(signs2);
    rhs.extend(std::iter::repeat(zero).take(k2));

    let Some(sol) = dense::solve_square(sys.w.as_ref(), &rhs)? else {
        let sv = dense::singular_values(sys.w.as_ref())?;
        let condition = match (sv.first(), sv.last()) {
            (Some(&a), Some(&b)) if b > 0.0 => a / b,
            _ => f64::INFINITY,
        };
        return Err(DemixError::Singular {
            condition,
            wg_norm: dense::spectral_norm(sys.wg().as_ref())?,
        });
    };
    let c = sys.kern.scale();
    let x = &sol.x;
    sys.coefficients = Some(Coefficients {
        alpha1: x[..k1].to_vec(),
        beta1: x[k1..2 * k1].iter().map(|z| z / c).collect(),
        alpha2: x[2 * k1..2 * k1 + k2].to_vec(),
        beta2: x[2 * k1 + k2..].iter().map(|z| z / c).collect(),
        signs1: signs1.to_vec(),
        signs2: signs2.to_vec(),
        condition: sol.condition,
        relative_residual: sol.relative_residual,
    });
    Ok(sys)
}

/// Coefficient vector `p` of a certificate together with the PSF ratio;
/// `P(τ) = Σ p_n exp(j2πnτ)`, `Q(τ) = Σ p_n ḡ_n exp(j2πnτ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPolynomial {
    pub p: Vec<Complex64>,
    pub psf: PsfRatio,
}

impl DualPolynomial {
    pub fn new(p: Vec<Complex64>, psf: PsfRatio) -> Result<Self> {
        if p.len() != psf.values().len() {
            return Err(DemixError::Shape(format!(
                "dual vector has {} entries, PSF ratio has {}",
                p.len(),
                psf.values().len()
            )));
        }
        Ok(Self { p, psf })
    }

    pub fn q_coefficients(&self) -> Vec<Complex64> {
        self.p.iter().zip(self.psf.values()).map(|(p, g)| p * g.conj()).collect()
    }

    pub fn eval_p(&self, tau: f64, l: u32) -> Complex64 {
        trig::eval_poly(&self.p, tau, l)
    }

    pub fn eval_q(&self, tau: f64, l: u32) -> Complex64 {
        trig::eval_poly(&self.q_coefficients(), tau, l)
    }
}

/// Collapses the kernel expansion into the coefficients `p_n`.
pub fn certificate_polynomials(sys: &CertificateSystem) -> Result<DualPolynomial> {
    let co = sys.require_solved()?;
    let m = sys.kern.m();
    let s = sys.kern.coefficients();
    let p = frequencies(m)
        .enumerate()
        .map(|(i, n)| {
            let d = derivative_factor(n, 1);
            let phase = |t: f64| Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * n as f64 * t);
            let first: Complex64 = sys
                .taus1
                .iter()
                .enumerate()
                .map(|(k, &t)| (co.alpha1[k] + co.beta1[k] * d) * phase(t))
                .sum();
            let second: Complex64 = sys
                .taus2
                .iter()
                .enumerate()
                .map(|(k, &t)| (co.alpha2[k] + co.beta2[k] * d) * phase(t))
                .sum();
            (first + sys.psf.values()[i] * second) * (s[i] / m as f64)
        })
        .collect();
    DualPolynomial::new(p, sys.psf.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub grid_size: usize,
    /// Required gap `1 - max|P|` away from the support.
    pub margin: f64,
    /// Points closer than this (wrap distance) to the support are excluded
    /// from the off-support maximum.
    pub exclusion_radius: f64,
    /// Also require `|P| <= 1 - margin (dM)^2` at distance `d` in
    /// `[0.1/M, 0.5/M]` from the support.
    pub quadratic_profile: bool,
    pub interpolation_tol: f64,
}

impl VerifyOptions {
    pub fn for_bandwidth(m: usize) -> Self {
        Self {
            grid_size: 64 * m,
            margin: 1e-3,
            exclusion_radius: 0.5 / m as f64,
            quadratic_profile: false,
            interpolation_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    #[serde(rename = "interp_err_P")]
    pub interp_err_p: f64,
    #[serde(rename = "interp_err_Q")]
    pub interp_err_q: f64,
    /// `max_k |P'(τ1k)| / sqrt(|K''(0)|)`, and the same for `Q` on channel 2.
    #[serde(rename = "deriv_err_P")]
    pub deriv_err_p: f64,
    #[serde(rename = "deriv_err_Q")]
    pub deriv_err_q: f64,
    #[serde(rename = "offgrid_max_P")]
    pub offgrid_max_p: f64,
    #[serde(rename = "offgrid_max_Q")]
    pub offgrid_max_q: f64,
    pub profile_ok: bool,
    pub valid: bool,
}

/// Checks the optimality conditions for a candidate dual vector on a grid.
pub fn verify_certificate(
    dual: &DualPolynomial,
    taus1: &[f64],
    taus2: &[f64],
    signs1: &[Complex64],
    signs2: &[Complex64],
    opts: &VerifyOptions,
) -> Result<CertificateReport> {
    let m = dual.psf.m();
    if opts.grid_size < 64 * m {
        return Err(DemixError::Parameter(format!(
            "verification grid of {} points is below 64·M = {}",
            opts.grid_size,
            64 * m
        )));
    }
    if signs1.len() != taus1.len() || signs2.len() != taus2.len() {
        return Err(DemixError::Shape("signs and supports differ in length".into()));
    }
    let deriv_scale = FejerKernel::new(m.max(2))?.scale();
    let q = dual.q_coefficients();

    let interp = |coeffs: &[Complex64], taus: &[f64], signs: &[Complex64]| -> (f64, f64) {
        taus.iter().zip(signs).fold((0.0f64, 0.0f64), |(e, d), (&t, s)| {
            (
                e.max((trig::eval_poly(coeffs, t, 0) - s).norm()),
                d.max(trig::eval_poly(coeffs, t, 1).norm() / deriv_scale),
            )
        })
    };
    let (interp_err_p, deriv_err_p) = interp(&dual.p, taus1, signs1);
    let (interp_err_q, deriv_err_q) = interp(&q, taus2, signs2);

    let mut profile_ok = true;
    let mut off_max = |coeffs: &[Complex64], taus: &[f64]| -> f64 {
        let mut best = 0.0f64;
        for tau in evaluation_points(taus, opts.grid_size) {
            let dist = taus.iter().map(|&t| wrap_distance(t, tau)).fold(f64::INFINITY, f64::min);
            let v = trig::eval_poly(coeffs, tau, 0).norm();
            if dist > opts.exclusion_radius {
                best = best.max(v);
            } else if opts.quadratic_profile {
                let mf = m as f64;
                if dist >= 0.1 / mf && v > 1.0 - opts.margin * (dist * mf).powi(2) {
                    profile_ok = false;
                }
            }
        }
        best
    };
    let offgrid_max_p = off_max(&dual.p, taus1);
    let offgrid_max_q = off_max(&q, taus2);

    let valid = interp_err_p <= opts.interpolation_tol
        && interp_err_q <= opts.interpolation_tol
        && offgrid_max_p <= 1.0 - opts.margin
        && offgrid_max_q <= 1.0 - opts.margin
        && profile_ok;
    Ok(CertificateReport {
        interp_err_p,
        interp_err_q,
        deriv_err_p,
        deriv_err_q,
        offgrid_max_p,
        offgrid_max_q,
        profile_ok,
        valid,
    })
}

/// Uniform grid plus the midpoints between circularly adjacent support points.
fn evaluation_points(taus: &[f64], grid_size: usize) -> Vec<f64> {
    let mut pts: Vec<f64> = (0..grid_size).map(|i| i as f64 / grid_size as f64).collect();
    let mut sorted = taus.to_vec();
    sorted.sort_by(f64::total_cmp);
    for (i, &a) in sorted.iter().enumerate() {
        let b = if i + 1 < sorted.len() { sorted[i + 1] } else { sorted[0] + 1.0 };
        if sorted.len() > 1 {
            pts.push(((a + b) / 2.0).rem_euclid(1.0));
        }
    }
    pts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub norm_i_minus_w1: f64,
    pub norm_i_minus_w2: f64,
    pub norm_w1: f64,
    pub norm_w2: f64,
    pub norm_w1_inv: f64,
    pub norm_w2_inv: f64,
    pub norm_wg: f64,
    pub norm_i_minus_w: f64,
    pub norm_w_inv: f64,
    pub i_minus_w_within_bound: bool,
    pub w_within_bound: bool,
    pub w_inv_within_bound: bool,
    /// `‖W_g‖ <= 0.25`.
    pub wg_within_delta: bool,
    /// `‖W_g‖ < 0.6376`.
    pub wg_in_invertible_range: bool,
    /// `M >= 4`.
    pub theory_regime: bool,
}

fn identity_minus(a: &CMat) -> CMat {
    CMat::from_fn(a.nrows(), a.ncols(), |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        Complex64::new(id, 0.0) - a[(i, j)]
    })
}

fn inverse_norm(a: &CMat) -> Result<f64> {
    if a.nrows() == 0 {
        return Ok(0.0);
    }
    let sv = dense::singular_values(a.as_ref())?;
    let smin = *sv.last().unwrap();
    Ok(if smin > 0.0 { 1.0 / smin } else { f64::INFINITY })
}

/// Operator norms of the blocks of `W` against the invertibility bounds.
pub fn invertibility_diagnostics(sys: &CertificateSystem) -> Result<DiagnosticsRecord> {
    let norm = |a: &CMat| dense::spectral_norm_power(a.as_ref(), POWER_ITERS, POWER_TOL);
    let (w1, w2, wg) = (sys.w1(), sys.w2(), sys.wg());
    let norm_i_minus_w1 = norm(&identity_minus(&w1));
    let norm_i_minus_w2 = norm(&identity_minus(&w2));
    let norm_w1 = norm(&w1);
    let norm_w2 = norm(&w2);
    let norm_w1_inv = inverse_norm(&w1)?;
    let norm_w2_inv = inverse_norm(&w2)?;
    let norm_wg = norm(&wg);
    let norm_i_minus_w = norm(&identity_minus(&sys.w));
    let norm_w_inv = inverse_norm(&sys.w)?;
    Ok(DiagnosticsRecord {
        norm_i_minus_w1,
        norm_i_minus_w2,
        norm_w1,
        norm_w2,
        norm_w1_inv,
        norm_w2_inv,
        norm_wg,
        norm_i_minus_w,
        norm_w_inv,
        i_minus_w_within_bound: norm_i_minus_w1 <= BOUND_I_MINUS_W && norm_i_minus_w2 <= BOUND_I_MINUS_W,
        w_within_bound: norm_w1 <= BOUND_W && norm_w2 <= BOUND_W,
        w_inv_within_bound: norm_w1_inv <= BOUND_W_INV && norm_w2_inv <= BOUND_W_INV,
        wg_within_delta: norm_wg <= DELTA_COEFFICIENTS,
        wg_in_invertible_range: norm_wg < DELTA_INVERTIBLE,
        theory_regime: sys.kern.in_theory_regime(),
    })
}

/// Builds, solves and collapses a certificate in one call.
pub fn construct_certificate(
    kern: &FejerKernel,
    psf: &PsfRatio,
    taus1: &[f64],
    signs1: &[Complex64],
    taus2: &[f64],
    signs2: &[Complex64],
) -> Result<(CertificateSystem, DualPolynomial)> {
    let sys = solve_coefficients(build_system(kern, psf, taus1, taus2)?, signs1, signs2)?;
    let dual = certificate_polynomials(&sys)?;
    Ok((sys, dual))
}
