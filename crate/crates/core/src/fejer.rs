//! Squared Fejér kernel and its PSF-modulated variants.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{DemixError, Result};
use crate::signal::{frequencies, PsfRatio};

/// `K(τ) = (1/M) Σ_{|n|≤2M} s_n exp(j2πnτ)` with precomputed `s_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FejerKernel {
    m: usize,
    s: Vec<f64>,
    kpp0: f64,
}

/// `(j 2π n)^l`.
pub(crate) fn derivative_factor(n: i64, l: u32) -> Complex64 {
    Complex64::new(0.0, 2.0 * PI * n as f64).powu(l)
}

impl FejerKernel {
    /// Builds the kernel for bandwidth index `M >= 2`.
    pub fn new(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(DemixError::Parameter(format!(
                "squared Fejér kernel needs M >= 2, got {m}"
            )));
        }
        let mf = m as f64;
        let mi = m as i64;
        let s = frequencies(m)
            .map(|n| {
                let lo = (n - mi).max(-mi);
                let hi = (n + mi).min(mi);
                (lo..=hi)
                    .map(|i| (1.0 - (i as f64 / mf).abs()) * (1.0 - ((n - i) as f64 / mf).abs()))
                    .sum::<f64>()
                    / mf
            })
            .collect();
        let kpp0 = -4.0 * PI * PI * (mf * mf - 1.0) / 3.0;
        Ok(Self { m, s, kpp0 })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Coefficients `s_n`, `n = -2M..=2M`.
    pub fn coefficients(&self) -> &[f64] {
        &self.s
    }

    /// Closed-form `K''(0) = -4π²(M²-1)/3`.
    pub fn kpp0(&self) -> f64 {
        self.kpp0
    }

    /// `sqrt(|K''(0)|)`, the derivative normalizer.
    pub fn scale(&self) -> f64 {
        self.kpp0.abs().sqrt()
    }

    /// Whether `M` satisfies the `M >= 4` assumption of the recovery guarantee.
    pub fn in_theory_regime(&self) -> bool {
        self.m >= 4
    }

    /// `K^(l)(τ)`.
    pub fn eval(&self, tau: f64, l: u32) -> Complex64 {
        self.eval_weighted(tau, l, |_| Complex64::new(1.0, 0.0))
    }

    /// `K_g^(l)(τ)` (or `K_ḡ^(l)(τ)` when `conjugate`).
    pub fn eval_modulated(
        &self,
        psf: &PsfRatio,
        conjugate: bool,
        tau: f64,
        l: u32,
    ) -> Result<Complex64> {
        if psf.m() != self.m {
            return Err(DemixError::Shape(format!(
                "kernel built for M = {}, PSF ratio has M = {}",
                self.m,
                psf.m()
            )));
        }
        let g = psf.values();
        let offset = 2 * self.m as i64;
        Ok(self.eval_weighted(tau, l, |n| {
            let h = g[(n + offset) as usize];
            if conjugate {
                h.conj()
            } else {
                h
            }
        }))
    }

    fn eval_weighted(&self, tau: f64, l: u32, weight: impl Fn(i64) -> Complex64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (n, &s) in frequencies(self.m).zip(&self.s) {
            let phase = Complex64::from_polar(1.0, 2.0 * PI * n as f64 * tau);
            acc += weight(n) * s * derivative_factor(n, l) * phase;
        }
        acc / self.m as f64
    }
}

/// Free-function form of [`FejerKernel::new`].
pub fn build_kernel(m: usize) -> Result<FejerKernel> {
    FejerKernel::new(m)
}

/// Outcome of one numerical identity check on a kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantCheck {
    pub name: String,
    /// Worst observed error (or the checked quantity for bounds).
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl InvariantCheck {
    fn new(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            tolerance,
            pass: value <= tolerance,
        }
    }
}

const FD_STEP: f64 = 1e-5;

/// Identity checks on `K`: values at the origin, the closed-form second
/// derivative, symmetry, decay away from the origin, the normalized
/// frequency bound, and central differences against the analytic
/// derivatives at `samples` random points drawn from `seed`.
pub fn invariant_suite(kern: &FejerKernel, samples: usize, seed: u64) -> Vec<InvariantCheck> {
    use rand::{Rng, SeedableRng};
    let m = kern.m;
    let mf = m as f64;
    let mut out = vec![
        InvariantCheck::new("K(0)=1", (kern.eval(0.0, 0) - 1.0).norm(), 1e-12),
        InvariantCheck::new("K'(0)=0", kern.eval(0.0, 1).norm(), 1e-12),
    ];
    let direct = kern.eval(0.0, 2).re;
    out.push(InvariantCheck::new(
        "K''(0) closed form",
        ((direct - kern.kpp0) / kern.kpp0).abs(),
        1e-10,
    ));

    let grid = 64 * m;
    let mut sym: f64 = 0.0;
    let mut max_val: f64 = 0.0;
    let mut far_max: f64 = 0.0;
    for i in 0..grid {
        let t = i as f64 / grid as f64;
        let v = kern.eval(t, 0);
        sym = sym.max((v - kern.eval(-t, 0)).norm());
        max_val = max_val.max(v.norm());
        if t.min(1.0 - t) >= 1.0 / mf {
            far_max = far_max.max(v.norm());
        }
    }
    out.push(InvariantCheck::new("K(t)=K(-t)", sym, 1e-12));
    out.push(InvariantCheck::new("K(0) is the grid maximum", max_val - 1.0, 1e-12));
    let mut decay = InvariantCheck::new("|K| < 1 beyond 1/M", far_max, 1.0);
    decay.pass = far_max < 1.0;
    out.push(decay);
    let bound = 2.0 * PI * 2.0 * mf / kern.scale();
    out.push(InvariantCheck::new("max |2πn|/sqrt|K''(0)| <= 4", bound, 4.0));

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let taus: Vec<f64> = (0..samples).map(|_| rng.random::<f64>()).collect();
    for l in 0..3u32 {
        let mut worst: f64 = 0.0;
        for &t in &taus {
            let fd = (kern.eval(t + FD_STEP, l) - kern.eval(t - FD_STEP, l)) / (2.0 * FD_STEP);
            let exact = kern.eval(t, l + 1);
            // relative to the derivative's scale so zero crossings do not blow up
            let scale = kern.eval(0.0, l + 1 + (l + 1) % 2).norm().max(exact.norm());
            worst = worst.max((fd - exact).norm() / scale);
        }
        out.push(InvariantCheck::new(&format!("finite difference l={l}"), worst, 1e-4));
    }
    out
}
