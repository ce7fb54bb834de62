//! Uniform 8-bit quantisation with per-transmission range side information.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

pub const LEVELS: usize = 256;

/// Range of one quantised transmission, carried losslessly beside the bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub min: f64,
    pub max: f64,
}

impl QuantSpec {
    /// Distance between adjacent reconstruction levels; zero for a constant input.
    pub fn step(&self) -> f64 {
        (self.max - self.min) / (LEVELS - 1) as f64
    }

    fn level(&self, q: u8) -> f64 {
        self.min + (self.max - self.min) * q as f64 / (LEVELS - 1) as f64
    }
}

/// Maps each value to the nearest of 256 evenly spaced levels spanning
/// `[min, max]` of the input and emits 8 bits per value, MSB first.
pub fn quantize8(f: &[f64]) -> Result<(Vec<u8>, QuantSpec)> {
    if f.is_empty() {
        return Err(contract("quantize8 on an empty input"));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(contract("quantize8 on non-finite input"));
    }
    let min = f.iter().copied().fold(f64::INFINITY, f64::min);
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spec = QuantSpec { min, max };
    let mut bits = Vec::with_capacity(8 * f.len());
    for &v in f {
        let q = if max > min {
            ((v - min) / (max - min) * (LEVELS - 1) as f64)
                .round()
                .clamp(0.0, (LEVELS - 1) as f64) as u8
        } else {
            0
        };
        bits.extend((0..8).rev().map(|b| (q >> b) & 1));
    }
    Ok((bits, spec))
}

pub fn dequantize8(bits: &[u8], spec: &QuantSpec) -> Result<Vec<f64>> {
    if bits.len() % 8 != 0 {
        return Err(contract(format!("{} bits is not a whole number of bytes", bits.len())));
    }
    Ok(bits
        .chunks(8)
        .map(|byte| {
            let q = byte.iter().fold(0u8, |acc, &b| (acc << 1) | (b & 1));
            spec.level(q)
        })
        .collect())
}
