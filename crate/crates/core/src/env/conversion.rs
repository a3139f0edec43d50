use serde::{Deserialize, Serialize};

use super::EnvError;

/// Map from allocated energy units to transmittable data bits.
///
/// Every variant satisfies `g(0) = 0` and is non-decreasing and concave on
/// `[0, inf)` for positive parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConversionFunction {
    /// `½·log2(1 + β·x)`, the Gaussian-channel capacity with SNR `β·x`.
    LogHalfSnr { beta: f64 },
    /// `c·ln(1 + x)`.
    ScaledLog { scale: f64 },
    /// `sqrt(c·ln(1 + x))`.
    SqrtLog { scale: f64 },
    /// `c·x`. Concave in the weak sense.
    Linear { slope: f64 },
}

impl Default for ConversionFunction {
    fn default() -> Self {
        ConversionFunction::ScaledLog { scale: 1.0 }
    }
}

impl ConversionFunction {
    pub fn eval(&self, energy: f64) -> f64 {
        match *self {
            ConversionFunction::LogHalfSnr { beta } => 0.5 * (beta * energy).ln_1p() / std::f64::consts::LN_2,
            ConversionFunction::ScaledLog { scale } => scale * energy.ln_1p(),
            ConversionFunction::SqrtLog { scale } => (scale * energy.ln_1p()).sqrt(),
            ConversionFunction::Linear { slope } => slope * energy,
        }
    }

    /// Energy needed to transmit `bits` bits, when `g` is strictly increasing.
    pub fn inverse(&self, bits: f64) -> Option<f64> {
        if !self.parameter().is_finite() || self.parameter() <= 0.0 {
            return None;
        }
        let bits = bits.max(0.0);
        Some(match *self {
            ConversionFunction::LogHalfSnr { beta } => ((2.0 * bits * std::f64::consts::LN_2).exp() - 1.0) / beta,
            ConversionFunction::ScaledLog { scale } => (bits / scale).exp_m1(),
            ConversionFunction::SqrtLog { scale } => (bits * bits / scale).exp_m1(),
            ConversionFunction::Linear { slope } => bits / slope,
        })
    }

    fn parameter(&self) -> f64 {
        match *self {
            ConversionFunction::LogHalfSnr { beta } => beta,
            ConversionFunction::ScaledLog { scale } | ConversionFunction::SqrtLog { scale } => scale,
            ConversionFunction::Linear { slope } => slope,
        }
    }

    /// Checks positivity of the parameter, `g(0) = 0`, and monotonicity and
    /// concavity on the integer grid `0..=e_max`.
    pub fn validate(&self, e_max: u32) -> Result<(), EnvError> {
        let p = self.parameter();
        if !p.is_finite() || p <= 0.0 {
            return Err(EnvError::InvalidConfig(format!(
                "conversion function parameter must be positive, got {p}"
            )));
        }
        if self.eval(0.0) != 0.0 {
            return Err(EnvError::InvalidConfig("conversion function must satisfy g(0) = 0".into()));
        }
        let values: Vec<f64> = (0..=e_max.max(2)).map(|t| self.eval(t as f64)).collect();
        const SLACK: f64 = 1e-12;
        for w in values.windows(2) {
            if w[1] + SLACK < w[0] {
                return Err(EnvError::InvalidConfig("conversion function must be non-decreasing".into()));
            }
        }
        for w in values.windows(3) {
            if w[0] + w[2] > 2.0 * w[1] + SLACK {
                return Err(EnvError::InvalidConfig("conversion function must be concave".into()));
            }
        }
        Ok(())
    }
}

/// Real and integer bits transmitted with `energy` units.
///
/// The integer count rounds half up and drives the queue update; the real
/// value enters the stage cost.
pub fn transmit_bits(g: &ConversionFunction, energy: u32) -> (f64, u32) {
    let real = g.eval(energy as f64);
    (real, round_half_up(real))
}

pub(crate) fn round_half_up(x: f64) -> u32 {
    let r = (x + 0.5).floor();
    if r <= 0.0 {
        0
    } else if r >= u32::MAX as f64 {
        u32::MAX
    } else {
        r as u32
    }
}

/// `g` tabulated on `0..=e_max`.
#[derive(Clone, Debug)]
pub struct ConversionTable {
    real: Vec<f64>,
    bits: Vec<u32>,
}

impl ConversionTable {
    pub fn new(g: &ConversionFunction, e_max: u32) -> Self {
        let (real, bits) = (0..=e_max).map(|t| transmit_bits(g, t)).unzip();
        Self { real, bits }
    }

    #[inline]
    pub fn real(&self, energy: u32) -> f64 {
        self.real[energy as usize]
    }

    #[inline]
    pub fn bits(&self, energy: u32) -> u32 {
        self.bits[energy as usize]
    }
}
