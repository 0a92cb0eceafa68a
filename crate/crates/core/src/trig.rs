//! Trigonometric polynomials `P(τ) = Σ_{|n|≤2M} p_n exp(j2πnτ)` and peak search.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{DemixError, Result};
use crate::fejer::derivative_factor;
use crate::signal::bandwidth_from_len;

/// Evaluates `Σ p_n (j2πn)^l exp(j2πnτ)` for coefficients stored on
/// `n = -2M..=2M`.
pub fn eval_poly(coeffs: &[Complex64], tau: f64, l: u32) -> Complex64 {
    let half = (coeffs.len() / 2) as i64;
    let mut acc = Complex64::new(0.0, 0.0);
    for (i, p) in coeffs.iter().enumerate() {
        let n = i as i64 - half;
        let phase = Complex64::from_polar(1.0, 2.0 * PI * n as f64 * tau);
        if l == 0 {
            acc += p * phase;
        } else {
            acc += p * derivative_factor(n, l) * phase;
        }
    }
    acc
}

/// `|P(τ)|` on the uniform grid `τ_i = i / grid_size`, computed with a
/// phase recurrence per row.
pub fn modulus_on_grid(coeffs: &[Complex64], grid_size: usize) -> Vec<f64> {
    let half = (coeffs.len() / 2) as i64;
    (0..grid_size)
        .map(|i| {
            let tau = i as f64 / grid_size as f64;
            let step = Complex64::from_polar(1.0, 2.0 * PI * tau);
            let mut z = Complex64::from_polar(1.0, -2.0 * PI * half as f64 * tau);
            let mut acc = Complex64::new(0.0, 0.0);
            for (k, p) in coeffs.iter().enumerate() {
                // re-anchor periodically so the recurrence does not drift
                if k % 16 == 0 {
                    z = Complex64::from_polar(1.0, 2.0 * PI * (k as i64 - half) as f64 * tau);
                }
                acc += p * z;
                z *= step;
            }
            acc.norm()
        })
        .collect()
}

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Golden-section search for a maximum of `f` on `[a, b]`. Returns the
/// best abscissa and value seen.
pub fn golden_section_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> (f64, f64) {
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    if fc >= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Dual atomic norm `sup_τ |Σ p_n exp(j2πnτ)|`: grid maximum refined by
/// golden-section ascent around the three largest grid samples.
pub fn dual_norm(p: &[Complex64], grid_size: usize) -> Result<f64> {
    let m = bandwidth_from_len(p.len())
        .ok_or_else(|| DemixError::Shape(format!("coefficient length {} is not 4M+1", p.len())))?;
    if grid_size < 16 * m {
        return Err(DemixError::Parameter(format!(
            "grid of {grid_size} points is too coarse for M = {m} (need at least {})",
            16 * m
        )));
    }
    let grid = modulus_on_grid(p, grid_size);
    let mut order: Vec<usize> = (0..grid_size).collect();
    order.sort_by(|&i, &j| grid[j].total_cmp(&grid[i]));
    let h = 1.0 / grid_size as f64;
    let mut best = grid[order[0]];
    for &i in order.iter().take(3) {
        let center = i as f64 * h;
        let (_, v) = golden_section_max(|t| eval_poly(p, t, 0).norm(), center - h, center + h, 40);
        best = best.max(v);
    }
    Ok(best)
}
