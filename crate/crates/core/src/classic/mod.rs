//! Separated source-channel baseline: 8-bit quantisation, block FEC and
//! Gray QAM, plus channel-use accounting for equal-budget comparisons.
//!
//! Block packing: quantised bits are concatenated token by token (8 bits per
//! value, MSB first), zero-padded to whole FEC blocks, coded, zero-padded to a
//! whole number of QAM symbols and sent in order. Both paddings travel as side
//! information with the quantiser range.

pub mod fec;
pub mod qam;
pub mod quant;

use num_rational::Ratio;
use semcom_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::channel::{transmit, ChannelConfig};
use crate::error::{contract, Error, Result};
pub use fec::{fec_decode, fec_encode, CodedBits, ConvolutionalCode, Fec, FecKind};
pub use qam::{bits_per_symbol, gray_qam_ber_approx, qam_demodulate, qam_modulate};
pub use quant::{dequantize8, quantize8, QuantSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassicConfig {
    pub modulation: u32,
    /// Nominal code rate used in the channel-use budget.
    pub code_rate: f64,
    pub fec: FecKind,
    /// Fraction of grid cells whose features are transmitted.
    pub cr: f64,
}

impl Default for ClassicConfig {
    fn default() -> Self {
        Self {
            modulation: 16,
            code_rate: 0.5,
            fec: FecKind::Convolutional,
            cr: 2.5e-3,
        }
    }
}

impl ClassicConfig {
    pub fn validate(&self) -> Result<()> {
        bits_per_symbol(self.modulation).map_err(|e| Error::Config(e.to_string()))?;
        if !(self.code_rate > 0.0 && self.code_rate <= 1.0) || !(0.0..=1.0).contains(&self.cr) {
            return Err(Error::Config(format!("invalid classic settings: {self:?}")));
        }
        Ok(())
    }
}

/// Channel uses of the classic scheme: `S_m * CR * 8 / (R_c * log2 M_c)`.
pub fn channel_uses(s_m: f64, cr: f64, r_c: f64, m_c: u32) -> f64 {
    s_m * cr * 8.0 / (r_c * (m_c as f64).log2())
}

pub type Exact = Ratio<i128>;

/// Exact decimal value of a float's shortest round-trip representation
/// (so `3.5e-4` becomes `7/20000`).
pub fn exact_decimal(x: f64) -> Option<Exact> {
    if !x.is_finite() {
        return None;
    }
    let s = format!("{}", x.abs());
    let (int, frac) = s.split_once('.').unwrap_or((&s, ""));
    let digits: i128 = format!("{int}{frac}").parse().ok()?;
    let den = 10i128.checked_pow(frac.len() as u32)?;
    let r = Exact::new(digits, den);
    Some(if x < 0.0 { -r } else { r })
}

/// Exact classic channel uses.
pub fn channel_uses_exact(s_m: u64, cr: Exact, r_c: Exact, m_c: u32) -> Result<Exact> {
    let k = bits_per_symbol(m_c)? as i128;
    Ok(Exact::from_integer(s_m as i128) * cr * 8 / (r_c * k))
}

/// Exact semantic channel uses: one complex symbol per selected feature element.
pub fn semantic_uses_exact(s_m: u64, cr: Exact) -> Exact {
    Exact::from_integer(s_m as i128) * cr
}

/// Bit-level outcome of one classic transmission.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClassicStats {
    pub info_bits: usize,
    pub bit_errors: usize,
    pub coded_bits: usize,
    pub symbols: usize,
}

/// Quantise, code, modulate, send, demodulate, decode and dequantise `f`.
pub fn transmit_classic(f: &Tensor, cfg: &ClassicConfig, ch: &ChannelConfig) -> Result<(Tensor, ClassicStats)> {
    if f.is_empty() {
        return Ok((f.clone(), ClassicStats::default()));
    }
    let fec = cfg.fec.build();
    let (bits, spec) = quantize8(f.data())?;
    let rx_bits = send_bits(&bits, fec.as_ref(), cfg.modulation, ch)?;
    let errors = bits.iter().zip(&rx_bits).filter(|(a, b)| a != b).count();
    let values = dequantize8(&rx_bits, &spec)?;
    let coded_bits = (bits.len() + fec.info_len() - 1) / fec.info_len() * fec.block_len();
    let k = bits_per_symbol(cfg.modulation)?;
    let stats = ClassicStats {
        info_bits: bits.len(),
        bit_errors: errors,
        coded_bits,
        symbols: coded_bits.div_ceil(k),
    };
    Ok((Tensor::new(f.shape(), values), stats))
}

/// FEC + QAM + channel for a raw bit stream; returns the decoded bits.
pub fn send_bits(bits: &[u8], fec: &dyn Fec, modulation: u32, ch: &ChannelConfig) -> Result<Vec<u8>> {
    let coded = fec_encode(bits, fec);
    let k = bits_per_symbol(modulation)?;
    let sym_pad = (k - coded.bits.len() % k) % k;
    let mut tx = coded.bits.clone();
    tx.resize(tx.len() + sym_pad, 0);
    let symbols = qam_modulate(&tx, modulation)?;
    let rx = transmit(&symbols, ch);
    let mut demod = qam_demodulate(&rx, modulation)?;
    demod.truncate(coded.bits.len());
    let out = fec_decode(
        &CodedBits {
            bits: demod,
            pad: coded.pad,
        },
        fec,
    )?;
    if out.len() != bits.len() {
        return Err(contract("decoded length differs from the transmitted length"));
    }
    Ok(out)
}

/// Bit error rate of one Monte-Carlo run over AWGN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerPoint {
    pub modulation: u32,
    pub coded: bool,
    pub snr_db: f64,
    pub bits: usize,
    pub errors: usize,
    pub ber: f64,
}

/// Sends `n_bits` uniform random bits over AWGN at `snr_db` (Es/N0), either
/// through the full FEC chain or as raw Gray QAM.
pub fn measure_ber(modulation: u32, coded: bool, snr_db: f64, n_bits: usize, seed: u64) -> Result<BerPoint> {
    use rand::{Rng, SeedableRng};
    let k = bits_per_symbol(modulation)?;
    let n = n_bits.div_ceil(k) * k;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let bits: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
    let ch = ChannelConfig {
        kind: crate::channel::ChannelKind::Awgn,
        snr_db,
        equalize: false,
        seed: rng.random(),
    };
    let rx = if coded {
        send_bits(&bits, FecKind::Convolutional.build().as_ref(), modulation, &ch)?
    } else {
        qam_demodulate(&transmit(&qam_modulate(&bits, modulation)?, &ch), modulation)?
    };
    let errors = bits.iter().zip(&rx).filter(|(a, b)| a != b).count();
    Ok(BerPoint {
        modulation,
        coded,
        snr_db,
        bits: n,
        errors,
        ber: errors as f64 / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelKind;

    #[test]
    fn channel_uses_example() {
        assert!((channel_uses(100.0, 0.01, 0.5, 16) - 4.0).abs() < 1e-12);
        let e = channel_uses_exact(100, exact_decimal(0.01).unwrap(), Exact::new(1, 2), 16).unwrap();
        assert_eq!(e, Exact::from_integer(4));
    }

    #[test]
    fn exact_decimal_parses_shortest_form() {
        assert_eq!(exact_decimal(3.5e-4), Some(Exact::new(7, 20_000)));
        assert_eq!(exact_decimal(2.0), Some(Exact::from_integer(2)));
        assert_eq!(exact_decimal(-0.25), Some(Exact::new(-1, 4)));
        assert_eq!(exact_decimal(f64::NAN), None);
    }

    #[test]
    fn noiseless_chain_is_within_quantisation_bound() {
        let f = Tensor::new(&[3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let ch = ChannelConfig {
            kind: ChannelKind::Awgn,
            snr_db: f64::INFINITY,
            equalize: true,
            seed: 0,
        };
        let (out, stats) = transmit_classic(&f, &ClassicConfig::default(), &ch).unwrap();
        let (min, max) = (f.data().iter().cloned().fold(f64::INFINITY, f64::min), f.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        let bound = (max - min) / 255.0 / 2.0 + 1e-12;
        for (a, b) in out.data().iter().zip(f.data()) {
            assert!((a - b).abs() <= bound);
        }
        assert_eq!(stats.bit_errors, 0);
        assert_eq!(stats.info_bits, 96);
    }

    #[test]
    fn ber_is_zero_without_noise() {
        let p = measure_ber(16, true, f64::INFINITY, 2000, 1).unwrap();
        assert_eq!((p.errors, p.bits), (0, 2000));
        let p = measure_ber(256, false, f64::INFINITY, 2001, 1).unwrap();
        assert_eq!((p.errors, p.bits), (0, 2008));
    }
}
