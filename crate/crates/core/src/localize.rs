//! Source localization from the dual polynomials and amplitude read-out.
//!
//! Locations of channel 1 are the points where `|P(τ)|` reaches one, those
//! of channel 2 where `|Q(τ)| = |Σ p_n ḡ_n exp(j2πnτ)|` does. The number of
//! sources is whatever the peak search finds; no model order is supplied.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dense::{self, CMat};
use crate::error::{DemixError, Result};
use crate::signal::{atom_into, bandwidth_from_len, num_samples, wrap_distance, PointSourceModel};
use crate::trig::{eval_poly, golden_section_max, modulus_on_grid};

pub const DEFAULT_THRESHOLD: f64 = 1e-4;
/// Slack above one tolerated on detected peak values.
pub const DUAL_FEASIBILITY_SLACK: f64 = 1e-3;
const REFINE_ITERS: usize = 30;
const MERGE_RADIUS: f64 = 0.1;
/// Grid samples this far below the threshold are still refined; the peak
/// can sit between grid points.
const PRESCREEN: f64 = 0.02;
const RANK_RCOND: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub taus1: Vec<f64>,
    pub taus2: Vec<f64>,
    pub amps1: Vec<Complex64>,
    pub amps2: Vec<Complex64>,
    pub peak_values1: Vec<f64>,
    pub peak_values2: Vec<f64>,
    /// `‖y - reconstruction‖ / ‖y‖`.
    pub residual: f64,
    pub rank_deficient: bool,
}

/// Detected peaks of one polynomial, sorted by location.
#[derive(Debug, Clone, PartialEq)]
pub struct Peaks {
    pub taus: Vec<f64>,
    pub values: Vec<f64>,
}

fn peaks_of(coeffs: &[Complex64], m: usize, threshold: f64, grid_size: usize) -> Peaks {
    let grid = modulus_on_grid(coeffs, grid_size);
    let h = 1.0 / grid_size as f64;
    let mut found: Vec<(f64, f64)> = Vec::new();
    for i in 0..grid_size {
        let v = grid[i];
        let prev = grid[(i + grid_size - 1) % grid_size];
        let next = grid[(i + 1) % grid_size];
        // `>=` on one side only, so a flat pair yields a single candidate
        if v < 1.0 - threshold - PRESCREEN || v < prev || v <= next {
            continue;
        }
        let center = i as f64 * h;
        let (t, sq) = golden_section_max(|t| eval_poly(coeffs, t, 0).norm_sqr(), center - h, center + h, REFINE_ITERS);
        let value = sq.sqrt().max(v);
        let tau = if value > sq.sqrt() { center } else { t };
        if value >= 1.0 - threshold {
            found.push((tau.rem_euclid(1.0), value));
        }
    }
    merge(found, MERGE_RADIUS / m as f64)
}

/// Keeps the largest peak of every cluster of peaks closer than `radius`
/// (wrap distance), repeating until all survivors are `radius` apart.
fn merge(mut found: Vec<(f64, f64)>, radius: f64) -> Peaks {
    found.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.total_cmp(&b.0)));
    let mut kept: Vec<(f64, f64)> = Vec::new();
    for (t, v) in found {
        if kept.iter().all(|&(s, _)| wrap_distance(s, t) >= radius) {
            kept.push((t, v));
        }
    }
    kept.sort_by(|a, b| a.0.total_cmp(&b.0));
    Peaks {
        taus: kept.iter().map(|k| k.0).collect(),
        values: kept.iter().map(|k| k.1).collect(),
    }
}

fn check_locate_args(p: &[Complex64], g: &[Complex64], threshold: f64, grid_size: usize) -> Result<usize> {
    let m = bandwidth_from_len(p.len())
        .ok_or_else(|| DemixError::Shape(format!("dual vector length {} is not 4M+1", p.len())))?;
    if g.len() != p.len() {
        return Err(DemixError::Shape(format!(
            "PSF ratio has {} entries, dual vector {}",
            g.len(),
            p.len()
        )));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(DemixError::Parameter(format!("threshold {threshold} outside (0, 1)")));
    }
    if grid_size < 64 * m {
        return Err(DemixError::Parameter(format!(
            "peak-search grid of {grid_size} points is below 64·M = {}",
            64 * m
        )));
    }
    Ok(m)
}

/// Peaks of `|P|` and `|Q|` reaching `1 - threshold`.
pub fn locate_peaks(p: &[Complex64], g: &[Complex64], threshold: f64, grid_size: usize) -> Result<(Peaks, Peaks)> {
    let m = check_locate_args(p, g, threshold, grid_size)?;
    let q: Vec<Complex64> = p.iter().zip(g).map(|(p, g)| p * g.conj()).collect();
    Ok((peaks_of(p, m, threshold, grid_size), peaks_of(&q, m, threshold, grid_size)))
}

/// Locations of both channels, sorted.
pub fn locate(p: &[Complex64], g: &[Complex64], threshold: f64, grid_size: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (a, b) = locate_peaks(p, g, threshold, grid_size)?;
    Ok((a.taus, b.taus))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeEstimate {
    pub amps1: Vec<Complex64>,
    pub amps2: Vec<Complex64>,
    pub residual: f64,
    pub rank_deficient: bool,
}

/// Least-squares amplitudes for `y ≈ Σ a1k c(τ1k) + g ⊙ Σ a2k c(τ2k)`.
pub fn estimate_amplitudes(y: &[Complex64], g: &[Complex64], taus1: &[f64], taus2: &[f64]) -> Result<AmplitudeEstimate> {
    let m = bandwidth_from_len(y.len())
        .ok_or_else(|| DemixError::Shape(format!("measurement length {} is not 4M+1", y.len())))?;
    if g.len() != y.len() {
        return Err(DemixError::Shape("PSF ratio and measurement differ in length".into()));
    }
    let n = num_samples(m);
    let (k1, k2) = (taus1.len(), taus2.len());
    if k1 + k2 > n {
        return Err(DemixError::Parameter(format!(
            "{} detected sources exceed the {n} measurements",
            k1 + k2
        )));
    }
    let mut design = CMat::zeros(n, k1 + k2);
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for (k, &t) in taus1.iter().chain(taus2).enumerate() {
        atom_into(t, m, &mut col);
        for i in 0..n {
            design[(i, k)] = if k < k1 { col[i] } else { g[i] * col[i] };
        }
    }
    let (a, rank) = dense::lstsq_min_norm(design.as_ref(), y, RANK_RCOND)?;
    let mut resid = 0.0;
    let mut ynorm = 0.0;
    for i in 0..n {
        let fit: Complex64 = (0..k1 + k2).map(|k| design[(i, k)] * a[k]).sum();
        resid += (y[i] - fit).norm_sqr();
        ynorm += y[i].norm_sqr();
    }
    let residual = if ynorm > 0.0 { (resid / ynorm).sqrt() } else { resid.sqrt() };
    Ok(AmplitudeEstimate {
        amps1: a[..k1].to_vec(),
        amps2: a[k1..].to_vec(),
        residual,
        rank_deficient: rank < k1 + k2,
    })
}

/// Peak search followed by the amplitude fit.
pub fn localize(y: &[Complex64], g: &[Complex64], p: &[Complex64], threshold: f64, grid_size: usize) -> Result<LocalizationResult> {
    let (a, b) = locate_peaks(p, g, threshold, grid_size)?;
    let amps = estimate_amplitudes(y, g, &a.taus, &b.taus)?;
    Ok(LocalizationResult {
        taus1: a.taus,
        taus2: b.taus,
        amps1: amps.amps1,
        amps2: amps.amps2,
        peak_values1: a.values,
        peak_values2: b.values,
        residual: amps.residual,
        rank_deficient: amps.rank_deficient,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub detected: usize,
    pub truth: usize,
    pub matched: usize,
    pub missed: usize,
    pub spurious: usize,
    pub max_location_error: f64,
    /// `|â - a| / |a|` for each matched true source, in truth order
    /// (`None` for missed ones).
    pub amplitude_rel_errors: Vec<Option<f64>>,
    pub max_amplitude_rel_error: f64,
    /// `assignment[k]` is the index of the estimate matched to true source `k`.
    pub assignment: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub channel1: ChannelScore,
    pub channel2: ChannelScore,
}

impl ScoreRecord {
    /// Both channels found exactly their sources.
    pub fn exact_counts(&self) -> bool {
        [&self.channel1, &self.channel2]
            .iter()
            .all(|c| c.missed == 0 && c.spurious == 0)
    }
}

/// Greedy matching by increasing wrap distance; pairs further apart than
/// `tol` are never matched.
pub fn greedy_match(est: &[f64], truth: &[f64], tol: f64) -> Vec<Option<usize>> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (k, &t) in truth.iter().enumerate() {
        for (j, &e) in est.iter().enumerate() {
            let d = wrap_distance(t, e);
            if d <= tol {
                pairs.push((d, k, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut assignment = vec![None; truth.len()];
    let mut used = vec![false; est.len()];
    for (_, k, j) in pairs {
        if assignment[k].is_none() && !used[j] {
            assignment[k] = Some(j);
            used[j] = true;
        }
    }
    assignment
}

fn score_channel(taus: &[f64], amps: &[Complex64], truth: &PointSourceModel, tol: f64) -> ChannelScore {
    let ttaus = truth.taus();
    let tamps = truth.amps();
    let assignment = greedy_match(taus, &ttaus, tol);
    let matched = assignment.iter().flatten().count();
    let mut max_location_error = 0.0f64;
    let mut max_amplitude_rel_error = 0.0f64;
    let amplitude_rel_errors = assignment
        .iter()
        .enumerate()
        .map(|(k, a)| {
            a.map(|j| {
                max_location_error = max_location_error.max(wrap_distance(ttaus[k], taus[j]));
                let err = match amps.get(j) {
                    Some(est) => (est - tamps[k]).norm() / tamps[k].norm(),
                    None => f64::INFINITY,
                };
                max_amplitude_rel_error = max_amplitude_rel_error.max(err);
                err
            })
        })
        .collect();
    ChannelScore {
        detected: taus.len(),
        truth: ttaus.len(),
        matched,
        missed: ttaus.len() - matched,
        spurious: taus.len() - matched,
        max_location_error,
        amplitude_rel_errors,
        max_amplitude_rel_error,
        assignment,
    }
}

/// Scores a localization against the true models.
pub fn match_and_score(est: &LocalizationResult, truth1: &PointSourceModel, truth2: &PointSourceModel, tol: f64) -> ScoreRecord {
    ScoreRecord {
        channel1: score_channel(&est.taus1, &est.amps1, truth1, tol),
        channel2: score_channel(&est.taus2, &est.amps2, truth2, tol),
    }
}
