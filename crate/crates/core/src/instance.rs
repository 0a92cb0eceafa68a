//! JSON instance files.
//!
//! ```json
//! { "M": 8,
//!   "channel1": [{"tau": 0.25, "re": 1.0, "im": 0.0}],
//!   "channel2": [{"tau": 0.75, "re": 0.0, "im": -0.5}],
//!   "psf_seed": 3 }
//! ```
//!
//! The PSF ratio is given either by `psf_seed` or explicitly as `"g": [[re, im], ...]`.

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{DemixError, Result};
use crate::signal::{
    measure, sample_psf_ratio, sample_sources, synthesize_signal, AmpLaw, MixedMeasurement, PointSourceModel, PsfRatio,
    Source,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub tau: f64,
    pub re: f64,
    pub im: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    #[serde(rename = "M")]
    pub m: usize,
    pub channel1: Vec<SourceEntry>,
    pub channel2: Vec<SourceEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psf_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Vec<[f64; 2]>>,
}

fn entries(model: &PointSourceModel) -> Vec<SourceEntry> {
    model
        .sources()
        .iter()
        .map(|s| SourceEntry {
            tau: s.tau,
            re: s.amp.re,
            im: s.amp.im,
        })
        .collect()
}

impl Instance {
    pub fn from_models(m: usize, ch1: &PointSourceModel, ch2: &PointSourceModel, psf_seed: u64) -> Self {
        Self {
            m,
            channel1: entries(ch1),
            channel2: entries(ch2),
            psf_seed: Some(psf_seed),
            g: None,
        }
    }

    /// Draws a random instance with separation `delta_min` in each channel.
    pub fn generate(seed: u64, m: usize, k1: usize, k2: usize, delta_min: f64) -> Result<Self> {
        let s1 = sample_sources(1, k1, delta_min, AmpLaw::ComplexGaussian, seed.wrapping_mul(3).wrapping_add(1))?;
        let s2 = sample_sources(2, k2, delta_min, AmpLaw::ComplexGaussian, seed.wrapping_mul(3).wrapping_add(2))?;
        Ok(Self::from_models(m, &s1, &s2, seed.wrapping_mul(3).wrapping_add(3)))
    }

    pub fn model(&self, channel: u8) -> Result<PointSourceModel> {
        let list = match channel {
            1 => &self.channel1,
            2 => &self.channel2,
            _ => return Err(DemixError::Parameter(format!("no channel {channel}"))),
        };
        PointSourceModel::new(
            channel,
            list.iter().map(|e| Source::new(e.tau, Complex64::new(e.re, e.im))).collect(),
        )
    }

    pub fn psf(&self) -> Result<PsfRatio> {
        match (&self.psf_seed, &self.g) {
            (Some(seed), None) => sample_psf_ratio(self.m, *seed),
            (None, Some(g)) => {
                let psf = PsfRatio::new(g.iter().map(|&[re, im]| Complex64::new(re, im)).collect())?;
                if psf.m() != self.m {
                    return Err(DemixError::Shape(format!(
                        "g has {} entries, M = {} needs {}",
                        g.len(),
                        self.m,
                        4 * self.m + 1
                    )));
                }
                Ok(psf)
            }
            _ => Err(DemixError::Parameter("instance needs exactly one of psf_seed and g".into())),
        }
    }

    /// Synthesizes `y = x1 + g ⊙ x2`; also returns `x1`, `x2`.
    pub fn measurement(&self) -> Result<(MixedMeasurement, Vec<Complex64>, Vec<Complex64>)> {
        if self.m < 1 {
            return Err(DemixError::Parameter("M must be at least 1".into()));
        }
        let psf = self.psf()?;
        let synth = |model: PointSourceModel| -> Result<Vec<Complex64>> {
            if model.is_empty() {
                Ok(vec![Complex64::new(0.0, 0.0); 4 * self.m + 1])
            } else {
                synthesize_signal(&model, self.m)
            }
        };
        let x1 = synth(self.model(1)?)?;
        let x2 = synth(self.model(2)?)?;
        Ok((measure(&x1, &x2, &psf)?, x1, x2))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DemixError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| DemixError::io(path, e))
    }
}
