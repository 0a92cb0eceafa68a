//! Convex demixing through its Toeplitz semidefinite characterization.
//!
//! The program
//!
//! ```text
//! min  ½ Σ_i (tr Toep(u_i) / (4M+1) + t_i)
//! s.t. Z_i = [[Toep(u_i), x_i], [x_i^*, t_i]] ⪰ 0,   i = 1, 2
//!      y = x_1 + g ⊙ x_2
//! ```
//!
//! is solved by ADMM on the splitting "structured variables" / "PSD cone
//! variables". The structured step is a weighted least-squares fit of
//! `(u_i, x_i, t_i)` to `Z_i - U_i` under the measurement constraint and has
//! a closed form; the cone step is an eigenvalue clip. The multiplier of the
//! measurement constraint is the dual vector `p`.

use faer::Mat;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dense::{self, CMat};
use crate::error::{DemixError, Result};
use crate::signal::{bandwidth_from_len, MixedMeasurement, PsfRatio};
use crate::trig;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Hermitian Toeplitz matrix with first column `u`.
pub fn toeplitz_from_generator(u: &[Complex64]) -> Result<CMat> {
    if u.is_empty() {
        return Err(DemixError::Shape("empty Toeplitz generator".into()));
    }
    if u[0].im.abs() > 1e-12 {
        return Err(DemixError::Domain(format!(
            "Toeplitz generator must have a real first entry, got imaginary part {:e}",
            u[0].im
        )));
    }
    let n = u.len();
    Ok(Mat::from_fn(n, n, |a, b| {
        if a > b {
            u[a - b]
        } else if a < b {
            u[b - a].conj()
        } else {
            Complex64::new(u[0].re, 0.0)
        }
    }))
}

/// Adjoint of [`toeplitz_from_generator`] under the real trace inner product
/// `<A, B> = Re tr(A^* B)` on matrices and `<u, w> = Re Σ conj(u_k) w_k` on
/// generators with real `u_0`: entry 0 is the diagonal sum, entry `k >= 1`
/// is twice the sum of the `k`-th subdiagonal of a Hermitian argument.
pub fn toeplitz_adjoint(h: &CMat) -> Vec<Complex64> {
    let n = h.nrows();
    let mut w = vec![ZERO; n];
    for a in 0..n {
        for b in 0..=a {
            let k = a - b;
            if k == 0 {
                w[0] += h[(a, a)];
            } else {
                // Σ_{a-b=k} H[a,b] + conj(H[b,a]) equals 2 Σ H[a,b] for Hermitian H
                w[k] += h[(a, b)] + h[(b, a)].conj();
            }
        }
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iters: usize,
    pub rho0: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    /// Iterations between residual-balancing checks.
    pub adapt_interval: usize,
    /// Over-relaxation factor in `(0, 2)`; 1 is plain ADMM.
    pub relaxation: f64,
    /// Relative duality-gap tolerance required on top of the residual tests.
    pub gap_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            eps_abs: 1e-7,
            eps_rel: 1e-7,
            max_iters: 50_000,
            rho0: 1.0,
            rho_min: 1e-3,
            rho_max: 1e3,
            adapt_interval: 25,
            relaxation: 1.0,
            gap_tol: 1e-6,
        }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(DemixError::Parameter("max_iters must be at least 1".into()));
        }
        if !(self.eps_abs >= 0.0 && self.eps_rel >= 0.0) {
            return Err(DemixError::Parameter("tolerances must be nonnegative".into()));
        }
        if !(self.rho_min > 0.0 && self.rho_min <= self.rho0 && self.rho0 <= self.rho_max) {
            return Err(DemixError::Parameter(format!(
                "penalty must satisfy 0 < rho_min <= rho0 <= rho_max, got {} / {} / {}",
                self.rho_min, self.rho0, self.rho_max
            )));
        }
        if !(self.relaxation > 0.0 && self.relaxation < 2.0) {
            return Err(DemixError::Parameter(format!(
                "relaxation {} outside (0, 2)",
                self.relaxation
            )));
        }
        if self.adapt_interval == 0 {
            return Err(DemixError::Parameter("adapt_interval must be positive".into()));
        }
        Ok(())
    }
}

/// `y = x1 + g ⊙ x2` with known `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemixProblem {
    pub m: usize,
    pub y: Vec<Complex64>,
    pub g: Vec<Complex64>,
}

impl DemixProblem {
    pub fn new(y: Vec<Complex64>, psf: &PsfRatio) -> Result<Self> {
        if y.len() != psf.values().len() {
            return Err(DemixError::Shape(format!(
                "measurement has {} entries, PSF ratio has {}",
                y.len(),
                psf.values().len()
            )));
        }
        if y.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(DemixError::Domain("measurement contains non-finite entries".into()));
        }
        Ok(Self {
            m: psf.m(),
            y,
            g: psf.values().to_vec(),
        })
    }

    pub fn from_measurement(meas: &MixedMeasurement) -> Result<Self> {
        Self::new(meas.y.clone(), &meas.psf)
    }

    fn len(&self) -> usize {
        self.y.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemixSolution {
    pub x1: Vec<Complex64>,
    pub x2: Vec<Complex64>,
    pub u1: Vec<Complex64>,
    pub u2: Vec<Complex64>,
    pub t1: f64,
    pub t2: f64,
    /// Dual vector; `P(τ) = Σ p_n exp(j2πnτ)`, `Q(τ) = Σ p_n ḡ_n exp(j2πnτ)`.
    pub p: Vec<Complex64>,
    /// `½ Σ_i (Re u_i0 + t_i)`, the sum of the two atomic norms at optimum.
    pub objective: f64,
    /// `Re <p, y>`.
    pub dual_objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub measurement_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// False when the iteration budget ran out; `p` is then only indicative.
    pub dual_reliable: bool,
    pub rho: f64,
}

impl DemixSolution {
    pub fn duality_gap(&self) -> f64 {
        self.objective - self.dual_objective
    }

    /// The PSD block `[[Toep(u_i), x_i], [x_i^*, t_i]]` for channel 1 or 2.
    pub fn block(&self, channel: u8) -> Result<CMat> {
        let (u, x, t) = match channel {
            1 => (&self.u1, &self.x1, self.t1),
            2 => (&self.u2, &self.x2, self.t2),
            _ => return Err(DemixError::Parameter(format!("no channel {channel}"))),
        };
        let mut out = Mat::zeros(u.len() + 1, u.len() + 1);
        lift(u, x, t, &mut out);
        Ok(out)
    }

    /// `Q` coefficients `ḡ ⊙ p`.
    pub fn q_coefficients(&self, g: &[Complex64]) -> Vec<Complex64> {
        self.p.iter().zip(g).map(|(p, g)| p * g.conj()).collect()
    }
}

/// Dual vector of a solve, or an error when the solve did not converge.
pub fn extract_dual(sol: &DemixSolution) -> Result<&[Complex64]> {
    if sol.dual_reliable {
        Ok(&sol.p)
    } else {
        Err(DemixError::Numerical(format!(
            "dual vector unreliable: solver stopped after {} iterations without converging",
            sol.iterations
        )))
    }
}

/// Grid sup of `|P|` and `|Q|` for a solution's dual vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualFeasibility {
    pub sup_p: f64,
    pub sup_q: f64,
}

pub fn dual_feasibility(sol: &DemixSolution, g: &[Complex64], grid_size: usize) -> Result<DualFeasibility> {
    Ok(DualFeasibility {
        sup_p: trig::dual_norm(&sol.p, grid_size)?,
        sup_q: trig::dual_norm(&sol.q_coefficients(g), grid_size)?,
    })
}

pub use crate::trig::dual_norm;

/// Structured iterate of one channel.
#[derive(Clone)]
struct Block {
    u: Vec<Complex64>,
    x: Vec<Complex64>,
    t: f64,
}

impl Block {
    fn zeros(n: usize) -> Self {
        Self {
            u: vec![ZERO; n],
            x: vec![ZERO; n],
            t: 0.0,
        }
    }
}

fn lift(u: &[Complex64], x: &[Complex64], t: f64, out: &mut CMat) {
    let n = u.len();
    for b in 0..n {
        for a in 0..n {
            out[(a, b)] = if a > b {
                u[a - b]
            } else if a < b {
                u[b - a].conj()
            } else {
                Complex64::new(u[0].re, 0.0)
            };
        }
    }
    for a in 0..n {
        out[(a, n)] = x[a];
        out[(n, a)] = x[a].conj();
    }
    out[(n, n)] = Complex64::new(t, 0.0);
}

/// Least-squares structured fit of a Hermitian matrix: diagonal averages of
/// the Toeplitz block, the averaged border column and the corner.
fn fit(v: &CMat, d: &mut [Complex64], vx: &mut [Complex64]) -> f64 {
    let n = d.len();
    d.fill(ZERO);
    for b in 0..n {
        for a in b..n {
            let k = a - b;
            d[k] += v[(a, b)] + v[(b, a)].conj();
        }
    }
    for (k, dk) in d.iter_mut().enumerate() {
        *dk /= 2.0 * (n - k) as f64;
    }
    for a in 0..n {
        vx[a] = (v[(a, n)] + v[(n, a)].conj()) * 0.5;
    }
    v[(n, n)].re
}

struct Scratch {
    d: Vec<Complex64>,
    vx: [Vec<Complex64>; 2],
}

/// Projection of a pair of Hermitian matrices onto the subspace
/// `{(lift(u1,x1,t1), lift(u2,x2,t2)) : x1 + g ⊙ x2 = 0}`; returns its
/// squared Frobenius norm.
fn projected_norm_sqr(h: [&CMat; 2], g: &[Complex64], scratch: &mut Scratch) -> f64 {
    let mut total = 0.0;
    let mut ts = [0.0; 2];
    for i in 0..2 {
        ts[i] = fit(h[i], &mut scratch.d, &mut scratch.vx[i]);
        scratch.d[0] = Complex64::new(scratch.d[0].re, 0.0);
        let n = scratch.d.len();
        let mut s = n as f64 * scratch.d[0].re.powi(2) + ts[i] * ts[i];
        for (k, dk) in scratch.d.iter().enumerate().skip(1) {
            s += 2.0 * (n - k) as f64 * dk.norm_sqr();
        }
        total += s;
    }
    for (n, gn) in g.iter().enumerate() {
        let (v1, v2) = (scratch.vx[0][n], scratch.vx[1][n]);
        let r = -(v1 + gn * v2) / (1.0 + gn.norm_sqr());
        let x1 = v1 + r;
        let x2 = v2 + gn.conj() * r;
        total += 2.0 * (x1.norm_sqr() + x2.norm_sqr());
    }
    total
}

fn frob_diff_sqr(a: &CMat, b: &CMat) -> f64 {
    (a - b).squared_norm_l2()
}

/// Solves the demixing program. Returns the last iterate with
/// `converged = false` when the iteration budget runs out.
pub fn solve_demix(prob: &DemixProblem, opts: &SolverOptions) -> Result<DemixSolution> {
    opts.validate()?;
    let len = prob.len();
    if bandwidth_from_len(len).is_none() || prob.g.len() != len {
        return Err(DemixError::Shape(format!(
            "measurement length {len} and PSF length {} must agree and equal 4M+1",
            prob.g.len()
        )));
    }
    if let Some(i) = prob.g.iter().position(|z| z.norm() == 0.0) {
        return Err(DemixError::Domain(format!("PSF ratio entry {i} is zero")));
    }

    // Work with y / σ so that a unit penalty is well matched to the data.
    let y_norm = prob.y.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if y_norm == 0.0 {
        return Ok(zero_solution(len));
    }
    let sigma = y_norm / (len as f64).sqrt();
    let y: Vec<Complex64> = prob.y.iter().map(|z| z / sigma).collect();
    let g = &prob.g;

    let n = len;
    let dim = n + 1;
    let mut z = [Mat::<Complex64>::zeros(dim, dim), Mat::zeros(dim, dim)];
    let mut dual = [Mat::<Complex64>::zeros(dim, dim), Mat::zeros(dim, dim)];
    let mut lifted = [Mat::<Complex64>::zeros(dim, dim), Mat::zeros(dim, dim)];
    let mut work = Mat::<Complex64>::zeros(dim, dim);
    let mut z_prev = [Mat::<Complex64>::zeros(dim, dim), Mat::zeros(dim, dim)];
    let mut blocks = [Block::zeros(n), Block::zeros(n)];
    let mut mu = vec![ZERO; n];
    let mut scratch = Scratch {
        d: vec![ZERO; n],
        vx: [vec![ZERO; n], vec![ZERO; n]],
    };

    let mut rho = opts.rho0;
    let alpha = opts.relaxation;
    let sqrt_dim = ((2 * dim * dim * 2) as f64).sqrt();

    let mut iterations = 0;
    let mut converged = false;
    let mut r_prim = f64::INFINITY;
    let mut r_dual = f64::INFINITY;

    while iterations < opts.max_iters {
        iterations += 1;

        // structured step
        let mut vts = [0.0; 2];
        for i in 0..2 {
            work.copy_from(&z[i]);
            work -= &dual[i];
            vts[i] = fit(&work, &mut scratch.d, &mut scratch.vx[i]);
            let b = &mut blocks[i];
            b.u.copy_from_slice(&scratch.d);
            b.u[0] = Complex64::new(scratch.d[0].re - 1.0 / (2.0 * rho * n as f64), 0.0);
            b.t = vts[i] - 1.0 / (2.0 * rho);
        }
        for k in 0..n {
            let (v1, v2) = (scratch.vx[0][k], scratch.vx[1][k]);
            let w = 1.0 + g[k].norm_sqr();
            let r = (y[k] - v1 - g[k] * v2) / w;
            blocks[0].x[k] = v1 + r;
            blocks[1].x[k] = v2 + g[k].conj() * r;
            mu[k] = r * (2.0 * rho);
        }

        // cone step
        for i in 0..2 {
            lift(&blocks[i].u, &blocks[i].x, blocks[i].t, &mut lifted[i]);
            std::mem::swap(&mut z_prev[i], &mut z[i]);
            // work = α Φ + (1-α) Z_prev
            work.copy_from(&lifted[i]);
            if alpha != 1.0 {
                work *= faer::Scale(Complex64::from(alpha));
                work += faer::Scale(Complex64::from(1.0 - alpha)) * &z_prev[i];
            }
            let relaxed = work.clone();
            work += &dual[i];
            dense::project_psd(work.as_ref(), &mut z[i])?;
            dual[i] += &relaxed;
            dual[i] -= &z[i];
        }

        // residuals
        let prim_sqr: f64 = (0..2).map(|i| frob_diff_sqr(&lifted[i], &z[i])).sum();
        r_prim = prim_sqr.sqrt();
        let dz = [&z[0] - &z_prev[0], &z[1] - &z_prev[1]];
        r_dual = rho * projected_norm_sqr([&dz[0], &dz[1]], g, &mut scratch).sqrt();
        if !r_prim.is_finite() || !r_dual.is_finite() {
            return Err(DemixError::Numerical(format!(
                "non-finite residual at iteration {iterations}"
            )));
        }
        let lifted_norm = (lifted[0].squared_norm_l2() + lifted[1].squared_norm_l2()).sqrt();
        let z_norm = (z[0].squared_norm_l2() + z[1].squared_norm_l2()).sqrt();
        let dual_norm = rho * (dual[0].squared_norm_l2() + dual[1].squared_norm_l2()).sqrt();
        let eps_prim = sqrt_dim * opts.eps_abs + opts.eps_rel * lifted_norm.max(z_norm);
        let eps_dual = sqrt_dim * opts.eps_abs + opts.eps_rel * dual_norm;

        if r_prim <= eps_prim && r_dual <= eps_dual {
            let objective = 0.5 * (blocks[0].u[0].re + blocks[0].t + blocks[1].u[0].re + blocks[1].t);
            let dual_obj: f64 = y.iter().zip(&mu).map(|(y, p)| (y.conj() * p).re).sum();
            if (objective - dual_obj).abs() <= opts.gap_tol * (1.0 + objective.abs()) {
                converged = true;
                break;
            }
        }

        if iterations % opts.adapt_interval == 0 {
            let p_rel = r_prim / lifted_norm.max(z_norm).max(1e-300);
            let d_rel = r_dual / dual_norm.max(1e-300);
            let factor = if p_rel > 10.0 * d_rel && rho < opts.rho_max {
                2.0
            } else if d_rel > 10.0 * p_rel && rho > opts.rho_min {
                0.5
            } else {
                1.0
            };
            if factor != 1.0 {
                let next = (rho * factor).clamp(opts.rho_min, opts.rho_max);
                let ratio = rho / next;
                for d in dual.iter_mut() {
                    *d *= faer::Scale(Complex64::from(ratio));
                }
                rho = next;
            }
        }
    }

    finish(prob, sigma, &y, blocks, mu, r_prim, r_dual, iterations, converged, rho)
}

fn zero_solution(n: usize) -> DemixSolution {
    DemixSolution {
        x1: vec![ZERO; n],
        x2: vec![ZERO; n],
        u1: vec![ZERO; n],
        u2: vec![ZERO; n],
        t1: 0.0,
        t2: 0.0,
        p: vec![ZERO; n],
        objective: 0.0,
        dual_objective: 0.0,
        primal_residual: 0.0,
        dual_residual: 0.0,
        measurement_residual: 0.0,
        iterations: 0,
        converged: true,
        dual_reliable: true,
        rho: 0.0,
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    prob: &DemixProblem,
    sigma: f64,
    y: &[Complex64],
    mut blocks: [Block; 2],
    mu: Vec<Complex64>,
    r_prim: f64,
    r_dual: f64,
    iterations: usize,
    converged: bool,
    rho: f64,
) -> Result<DemixSolution> {
    let n = y.len();
    // Restore exact positive semidefiniteness of the structured iterate by a
    // diagonal shift, which keeps the measurement constraint intact.
    let mut m = Mat::<Complex64>::zeros(n + 1, n + 1);
    for b in blocks.iter_mut() {
        lift(&b.u, &b.x, b.t, &mut m);
        let lam = dense::min_eigenvalue(m.as_ref())?;
        if lam < 0.0 {
            let shift = -lam * (1.0 + 1e-12) + f64::EPSILON * (1.0 + b.t.abs());
            b.u[0].re += shift;
            b.t += shift;
        }
    }
    let objective = 0.5 * (blocks[0].u[0].re + blocks[0].t + blocks[1].u[0].re + blocks[1].t);
    let dual_objective: f64 = y.iter().zip(&mu).map(|(y, p)| (y.conj() * p).re).sum();

    let scale = |v: &[Complex64]| -> Vec<Complex64> { v.iter().map(|z| z * sigma).collect() };
    let [b1, b2] = blocks;
    let x1 = scale(&b1.x);
    let x2 = scale(&b2.x);
    let measurement_residual = prob
        .y
        .iter()
        .zip(&x1)
        .zip(&x2)
        .zip(&prob.g)
        .map(|(((y, a), b), g)| (y - a - g * b).norm_sqr())
        .sum::<f64>()
        .sqrt();
    Ok(DemixSolution {
        x1,
        x2,
        u1: scale(&b1.u),
        u2: scale(&b2.u),
        t1: b1.t * sigma,
        t2: b2.t * sigma,
        p: mu,
        objective: objective * sigma,
        dual_objective: dual_objective * sigma,
        primal_residual: (r_prim * sigma).max(measurement_residual),
        dual_residual: r_dual * sigma,
        measurement_residual,
        iterations,
        converged,
        dual_reliable: converged,
        rho,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{atom, sample_psf_ratio};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn unit_generator_gives_identity() {
        let mut u = vec![ZERO; 5];
        u[0] = c(1.0, 0.0);
        let t = toeplitz_from_generator(&u).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                let e = if a == b { 1.0 } else { 0.0 };
                assert_eq!(t[(a, b)], c(e, 0.0));
            }
        }
    }

    #[test]
    fn non_real_first_entry_is_rejected() {
        assert!(matches!(
            toeplitz_from_generator(&[c(1.0, 0.1), c(0.0, 0.0)]),
            Err(DemixError::Domain(_))
        ));
    }

    #[test]
    fn atom_generator_is_rank_one_psd() {
        // Toep of the first half of an atom is the outer product v v^*.
        let m = 3;
        let a = atom(0.27, m).unwrap();
        let n = a.len();
        let u: Vec<_> = (0..n).map(|k| Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * k as f64 * 0.27)).collect();
        let t = toeplitz_from_generator(&u).unwrap();
        let ev = dense::hermitian_eigenvalues(t.as_ref()).unwrap();
        assert!(ev[0] >= -1e-10);
        assert!((ev[n - 1] - n as f64).abs() < 1e-10);
        assert!(ev[n - 2].abs() < 1e-10);
    }

    #[test]
    fn toeplitz_adjoint_consistency() {
        let n = 7;
        let u: Vec<_> = (0..n)
            .map(|k| if k == 0 { c(0.7, 0.0) } else { c((k as f64).sin(), (k as f64 * 1.3).cos()) })
            .collect();
        let raw = Mat::<Complex64>::from_fn(n, n, |a, b| c(((a * 7 + b) as f64).sin(), ((a + 3 * b) as f64).cos()));
        let h = &raw + raw.adjoint();
        let t = toeplitz_from_generator(&u).unwrap();
        let lhs: f64 = (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).map(|(a, b)| (t[(a, b)].conj() * h[(a, b)]).re).sum();
        let w = toeplitz_adjoint(&h);
        let rhs: f64 = u.iter().zip(&w).map(|(u, w)| (u.conj() * w).re).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn zero_measurement_gives_zero_solution() {
        let g = sample_psf_ratio(4, 1).unwrap();
        let prob = DemixProblem::new(vec![ZERO; 17], &g).unwrap();
        let sol = solve_demix(&prob, &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.objective, 0.0);
        assert!(sol.x1.iter().chain(&sol.x2).chain(&sol.p).all(|z| *z == ZERO));
        assert!(extract_dual(&sol).is_ok());
    }

    #[test]
    fn exhausted_budget_is_flagged() {
        let m = 4;
        let g = sample_psf_ratio(m, 2).unwrap();
        let prob = DemixProblem::new(atom(0.3, m).unwrap(), &g).unwrap();
        let opts = SolverOptions {
            max_iters: 3,
            ..SolverOptions::default()
        };
        let sol = solve_demix(&prob, &opts).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 3);
        assert!(extract_dual(&sol).is_err());
        // the returned iterate still satisfies the measurement equation
        assert!(sol.measurement_residual < 1e-12);
    }

    #[test]
    fn options_are_validated() {
        let g = sample_psf_ratio(2, 0).unwrap();
        let prob = DemixProblem::new(atom(0.1, 2).unwrap(), &g).unwrap();
        let bad = SolverOptions {
            max_iters: 0,
            ..SolverOptions::default()
        };
        assert!(matches!(solve_demix(&prob, &bad), Err(DemixError::Parameter(_))));
        assert!(DemixProblem::new(vec![ZERO; 5], &g).is_err());
    }
}
