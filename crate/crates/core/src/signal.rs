//! Point-source channels, atoms and the mixed frequency-domain measurement.
//!
//! Every length-`4M+1` vector in this crate is stored in ascending frequency
//! order `n = -2M..=2M`; the storage offset of frequency `n` is `n + 2M`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DemixError, Result};

/// Number of frequency samples `4M+1` for bandwidth index `M`.
pub fn num_samples(m: usize) -> usize {
    4 * m + 1
}

/// Frequencies `-2M..=2M` in storage order.
pub fn frequencies(m: usize) -> impl Iterator<Item = i64> + Clone {
    let m = m as i64;
    -2 * m..=2 * m
}

/// Recovers `M` from a vector length, if the length has the form `4M+1`.
pub fn bandwidth_from_len(len: usize) -> Option<usize> {
    (len >= 5 && len % 4 == 1).then(|| (len - 1) / 4)
}

/// Wrap-around distance on the unit circle `[0, 1)`.
pub fn wrap_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).abs().rem_euclid(1.0);
    d.min(1.0 - d)
}

/// `a / |a|`, with the convention `sign(0) = 0`.
pub fn complex_sign(a: Complex64) -> Complex64 {
    let r = a.norm();
    if r == 0.0 {
        Complex64::new(0.0, 0.0)
    } else {
        a / r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub tau: f64,
    pub amp: Complex64,
}

impl Source {
    pub fn new(tau: f64, amp: Complex64) -> Self {
        Self { tau, amp }
    }
}

/// The sources of one channel: distinct locations in `[0, 1)` with complex
/// amplitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSourceModel {
    channel: u8,
    sources: Vec<Source>,
}

impl PointSourceModel {
    /// Validates locations and builds the model. An empty source list is
    /// accepted here; synthesis rejects it.
    pub fn new(channel: u8, sources: Vec<Source>) -> Result<Self> {
        if channel != 1 && channel != 2 {
            return Err(DemixError::Parameter(format!(
                "channel id must be 1 or 2, got {channel}"
            )));
        }
        for (k, s) in sources.iter().enumerate() {
            if !(0.0..1.0).contains(&s.tau) {
                return Err(DemixError::Domain(format!(
                    "source {k} location {} outside [0, 1)",
                    s.tau
                )));
            }
            if !s.amp.re.is_finite() || !s.amp.im.is_finite() {
                return Err(DemixError::Domain(format!(
                    "source {k} amplitude is not finite"
                )));
            }
        }
        for i in 0..sources.len() {
            for j in i + 1..sources.len() {
                if sources[i].tau == sources[j].tau {
                    return Err(DemixError::Domain(format!(
                        "sources {i} and {j} share location {}",
                        sources[i].tau
                    )));
                }
            }
        }
        Ok(Self { channel, sources })
    }

    pub fn channel(&self) -> u8 {
        self.channel
    }

    pub fn sources(&self) -> &[Source] {
        &self.sources
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn taus(&self) -> Vec<f64> {
        self.sources.iter().map(|s| s.tau).collect()
    }

    pub fn amps(&self) -> Vec<Complex64> {
        self.sources.iter().map(|s| s.amp).collect()
    }

    /// Complex signs `a_k / |a_k|` of the amplitudes.
    pub fn signs(&self) -> Vec<Complex64> {
        self.sources.iter().map(|s| complex_sign(s.amp)).collect()
    }

    /// Sum of amplitude moduli, the atomic norm of the synthesized signal
    /// when the atoms are well separated.
    pub fn l1_mass(&self) -> f64 {
        self.sources.iter().map(|s| s.amp.norm()).sum()
    }

    /// Copy with every location moved by `shift` modulo 1.
    pub fn shifted(&self, shift: f64) -> Self {
        let sources = self
            .sources
            .iter()
            .map(|s| Source::new((s.tau + shift).rem_euclid(1.0) % 1.0, s.amp))
            .collect();
        Self {
            channel: self.channel,
            sources,
        }
    }

    /// Copy with every amplitude multiplied by `factor`.
    pub fn scaled(&self, factor: Complex64) -> Self {
        let sources = self
            .sources
            .iter()
            .map(|s| Source::new(s.tau, s.amp * factor))
            .collect();
        Self {
            channel: self.channel,
            sources,
        }
    }
}

/// Ratio `g_n = g2_n / g1_n` of the two PSF spectra on `n = -2M..=2M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsfRatio {
    m: usize,
    g: Vec<Complex64>,
}

impl PsfRatio {
    pub fn new(g: Vec<Complex64>) -> Result<Self> {
        let m = bandwidth_from_len(g.len()).ok_or_else(|| {
            DemixError::Shape(format!(
                "PSF ratio length {} is not of the form 4M+1 with M >= 1",
                g.len()
            ))
        })?;
        if let Some(i) = g.iter().position(|z| z.norm() == 0.0 || !z.norm().is_finite()) {
            return Err(DemixError::Domain(format!(
                "PSF ratio entry {i} is zero or not finite"
            )));
        }
        Ok(Self { m, g })
    }

    /// All-ones ratio (identical PSFs in both channels).
    pub fn ones(m: usize) -> Self {
        Self {
            m,
            g: vec![Complex64::new(1.0, 0.0); num_samples(m)],
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[Complex64] {
        &self.g
    }

    /// Value at frequency `n`.
    pub fn at(&self, n: i64) -> Complex64 {
        self.g[(n + 2 * self.m as i64) as usize]
    }

    pub fn conj(&self) -> Self {
        Self {
            m: self.m,
            g: self.g.iter().map(|z| z.conj()).collect(),
        }
    }
}

/// Observed vector `y = x1 + g ⊙ x2` together with the PSF ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedMeasurement {
    pub m: usize,
    pub y: Vec<Complex64>,
    pub psf: PsfRatio,
}

/// Amplitude distribution for sampled sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmpLaw {
    /// Independent real and imaginary parts, each `N(0, 1/2)`.
    ComplexGaussian,
    /// Uniform phase, unit modulus.
    UnitCircle,
}

pub(crate) fn atom_into(tau: f64, m: usize, out: &mut Vec<Complex64>) {
    out.clear();
    out.extend(frequencies(m).map(|n| Complex64::from_polar(1.0, -2.0 * PI * n as f64 * tau)));
}

/// Atom `c(tau)` with entries `exp(-j 2π n tau)`, `n = -2M..=2M`.
pub fn atom(tau: f64, m: usize) -> Result<Vec<Complex64>> {
    if m == 0 {
        return Err(DemixError::Parameter("M must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&tau) {
        return Err(DemixError::Domain(format!("location {tau} outside [0, 1)")));
    }
    let mut out = Vec::with_capacity(num_samples(m));
    atom_into(tau, m, &mut out);
    Ok(out)
}

/// `Σ_k a_k c(tau_k)`.
pub fn synthesize_signal(model: &PointSourceModel, m: usize) -> Result<Vec<Complex64>> {
    if model.is_empty() {
        return Err(DemixError::Parameter(format!(
            "channel {} has no sources to synthesize",
            model.channel()
        )));
    }
    if m == 0 {
        return Err(DemixError::Parameter("M must be at least 1".into()));
    }
    let mut x = vec![Complex64::new(0.0, 0.0); num_samples(m)];
    let mut c = Vec::with_capacity(x.len());
    for s in model.sources() {
        atom_into(s.tau, m, &mut c);
        for (xi, ci) in x.iter_mut().zip(&c) {
            *xi += s.amp * ci;
        }
    }
    Ok(x)
}

/// Minimum pairwise wrap-around distance; 1.0 when fewer than two sources.
pub fn min_separation(model: &PointSourceModel) -> f64 {
    min_separation_of(&model.taus())
}

pub fn min_separation_of(taus: &[f64]) -> f64 {
    let mut best = 1.0_f64;
    for i in 0..taus.len() {
        for j in i + 1..taus.len() {
            best = best.min(wrap_distance(taus[i], taus[j]));
        }
    }
    best
}

const SAMPLING_BUDGET: usize = 100_000;
const PER_POINT_ATTEMPTS: usize = 1_000;

/// Draws `k` locations with pairwise wrap distance at least `delta_min`,
/// sorted ascending, and amplitudes from `amp_law`.
pub fn sample_sources(
    channel: u8,
    k: usize,
    delta_min: f64,
    amp_law: AmpLaw,
    seed: u64,
) -> Result<PointSourceModel> {
    if k == 0 {
        return Err(DemixError::Parameter("number of sources must be at least 1".into()));
    }
    if !(delta_min >= 0.0) {
        return Err(DemixError::Parameter(format!(
            "separation {delta_min} must be nonnegative"
        )));
    }
    if k > 1 && k as f64 * delta_min >= 1.0 {
        return Err(DemixError::Parameter(format!(
            "cannot place {k} sources with separation {delta_min} on the unit circle"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let taus = place_locations(&mut rng, k, delta_min)?;
    let sources = taus
        .into_iter()
        .map(|tau| Source::new(tau, draw_amplitude(&mut rng, amp_law)))
        .collect();
    PointSourceModel::new(channel, sources)
}

fn place_locations(rng: &mut ChaCha8Rng, k: usize, delta_min: f64) -> Result<Vec<f64>> {
    let mut spent = 0;
    'restart: loop {
        let mut taus: Vec<f64> = Vec::with_capacity(k);
        while taus.len() < k {
            let mut placed = false;
            for _ in 0..PER_POINT_ATTEMPTS {
                spent += 1;
                if spent > SAMPLING_BUDGET {
                    return Err(DemixError::Sampling(format!(
                        "no placement of {k} sources with separation {delta_min} within {SAMPLING_BUDGET} draws"
                    )));
                }
                let tau: f64 = rng.random();
                if taus.iter().all(|&t| wrap_distance(t, tau) >= delta_min && t != tau) {
                    taus.push(tau);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'restart;
            }
        }
        taus.sort_by(f64::total_cmp);
        return Ok(taus);
    }
}

fn draw_amplitude(rng: &mut ChaCha8Rng, law: AmpLaw) -> Complex64 {
    match law {
        AmpLaw::ComplexGaussian => {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
        }
        AmpLaw::UnitCircle => {
            let phi: f64 = rng.random();
            Complex64::from_polar(1.0, 2.0 * PI * phi)
        }
    }
}

/// Unit-modulus PSF ratio `g_n = exp(j 2π φ_n)` with `φ_n` i.i.d. uniform.
pub fn sample_psf_ratio(m: usize, seed: u64) -> Result<PsfRatio> {
    if m == 0 {
        return Err(DemixError::Parameter("M must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = (0..num_samples(m))
        .map(|_| {
            let phi: f64 = rng.random();
            Complex64::from_polar(1.0, 2.0 * PI * phi)
        })
        .collect();
    PsfRatio::new(g)
}

/// `y = x1 + g ⊙ x2`.
pub fn measure(x1: &[Complex64], x2: &[Complex64], psf: &PsfRatio) -> Result<MixedMeasurement> {
    let n = psf.values().len();
    if x1.len() != n || x2.len() != n {
        return Err(DemixError::Shape(format!(
            "x1 has {} entries, x2 has {}, PSF ratio has {n}",
            x1.len(),
            x2.len()
        )));
    }
    let y = x1
        .iter()
        .zip(x2)
        .zip(psf.values())
        .map(|((a, b), g)| a + g * b)
        .collect();
    Ok(MixedMeasurement {
        m: psf.m(),
        y,
        psf: psf.clone(),
    })
}

pub const DEFAULT_PSF_FLOOR: f64 = 1e-8;

/// Divides raw measurements and the channel-2 spectrum by the channel-1
/// spectrum, producing `y` and the ratio `g = g2 / g1`.
pub fn normalize_raw_channels(
    y_raw: &[Complex64],
    g1: &[Complex64],
    g2: &[Complex64],
    floor: f64,
) -> Result<(Vec<Complex64>, PsfRatio)> {
    if !(floor > 0.0) {
        return Err(DemixError::Parameter(format!("floor {floor} must be positive")));
    }
    if y_raw.len() != g1.len() || g1.len() != g2.len() {
        return Err(DemixError::Shape(format!(
            "raw lengths differ: y {}, g1 {}, g2 {}",
            y_raw.len(),
            g1.len(),
            g2.len()
        )));
    }
    if let Some((index, z)) = g1.iter().enumerate().find(|(_, z)| z.norm() < floor) {
        return Err(DemixError::IllConditionedPsf {
            index,
            modulus: z.norm(),
            floor,
        });
    }
    let y = y_raw.iter().zip(g1).map(|(y, a)| y / a).collect();
    let g = g2.iter().zip(g1).map(|(b, a)| b / a).collect();
    Ok((y, PsfRatio::new(g)?))
}
