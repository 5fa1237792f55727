//! Power-constrained complex AWGN channel.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Complex symbols stored as interleaved `(re, im)` pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SymbolVector {
    values: Vec<f64>,
}

impl SymbolVector {
    /// From interleaved real pairs; the length must be even.
    pub fn from_interleaved(values: Vec<f64>) -> Result<Self> {
        if !values.len().is_multiple_of(2) {
            return Err(Error::shape(format!(
                "{} reals cannot form complex pairs",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::DomainError("non-finite channel symbol".into()));
        }
        Ok(Self { values })
    }

    pub fn from_complex(symbols: &[num_complex::Complex64]) -> Self {
        Self {
            values: symbols.iter().flat_map(|c| [c.re, c.im]).collect(),
        }
    }

    /// Number of complex channel uses.
    pub fn len(&self) -> usize {
        self.values.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn interleaved(&self) -> &[f64] {
        &self.values
    }

    pub fn symbol(&self, i: usize) -> num_complex::Complex64 {
        num_complex::Complex64::new(self.values[2 * i], self.values[2 * i + 1])
    }

    /// Mean of `|s_i|^2` over complex symbols; zero for an empty vector.
    pub fn average_power(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.values.iter().map(|v| v * v).sum::<f64>() / self.len() as f64
    }

    /// Every component multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * k).collect(),
        }
    }
}

/// Signal-to-noise setting of the channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Snr {
    Noiseless,
    Db(f64),
}

impl Snr {
    /// Complex noise variance `10^(-snr/10)` relative to unit signal power.
    pub fn noise_variance(self) -> f64 {
        match self {
            Snr::Noiseless => 0.0,
            Snr::Db(db) => 10f64.powf(-db / 10.0),
        }
    }
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Snr::Noiseless => f.write_str("noiseless"),
            Snr::Db(db) => write!(f, "{db}"),
        }
    }
}

impl FromStr for Snr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("noiseless") || s.eq_ignore_ascii_case("inf") {
            return Ok(Snr::Noiseless);
        }
        match s.parse::<f64>() {
            Ok(db) if db.is_finite() => Ok(Snr::Db(db)),
            _ => Err(Error::BadConfig(format!(
                "SNR must be a finite dB value or 'noiseless', got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelConfig {
    pub snr: Snr,
    pub seed: u64,
}

/// Scales `s` to unit average power. Returns the normalized vector and the
/// factor the receiver multiplies by to undo it. All-zero and empty inputs
/// come back unchanged with scale 1.
pub fn power_normalize(s: &SymbolVector) -> (SymbolVector, f64) {
    let p = s.average_power();
    if p == 0.0 {
        return (s.clone(), 1.0);
    }
    let scale = p.sqrt();
    (s.scaled(1.0 / scale), scale)
}

/// `s + n` with `n ~ CN(0, sigma^2 I)`: each real component has variance `sigma^2 / 2`.
pub fn awgn<R: Rng + ?Sized>(s: &SymbolVector, snr: Snr, rng: &mut R) -> SymbolVector {
    let var = snr.noise_variance();
    if var == 0.0 {
        return s.clone();
    }
    let normal = Normal::new(0.0, (var / 2.0).sqrt()).expect("finite variance");
    SymbolVector {
        values: s.values.iter().map(|v| v + normal.sample(rng)).collect(),
    }
}

/// Normalize, transmit, and undo the normalization at the receiver.
/// A noiseless channel returns `s` exactly.
pub fn channel_roundtrip<R: Rng + ?Sized>(s: &SymbolVector, snr: Snr, rng: &mut R) -> SymbolVector {
    if snr == Snr::Noiseless {
        return s.clone();
    }
    let (normalized, scale) = power_normalize(s);
    awgn(&normalized, snr, rng).scaled(scale)
}

/// Per-real-component noise standard deviation for a frame of average
/// complex power `power`, used by the differentiable training channel.
pub fn component_noise_std(power: f64, snr: Snr) -> f64 {
    (power * snr.noise_variance() / 2.0).sqrt()
}
