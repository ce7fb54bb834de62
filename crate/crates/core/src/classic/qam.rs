//! Gray-mapped square QAM with unit mean symbol energy.

use num_complex::Complex64;

use crate::error::{contract, Result};

/// Bits per symbol for a square constellation of order `m` (4, 16, 64, 256, ...).
pub fn bits_per_symbol(m: u32) -> Result<usize> {
    let k = m.trailing_zeros() as usize;
    if m < 4 || !m.is_power_of_two() || k % 2 != 0 {
        return Err(contract(format!("{m}-QAM is not a square power-of-two constellation")));
    }
    Ok(k)
}

fn scale(m: u32) -> f64 {
    (2.0 * (m as f64 - 1.0) / 3.0).sqrt()
}

fn gray_to_index(mut g: usize) -> usize {
    let mut b = g;
    while g > 0 {
        g >>= 1;
        b ^= g;
    }
    b
}

fn bits_value(bits: &[u8]) -> usize {
    bits.iter().fold(0, |acc, &b| (acc << 1) | (b as usize & 1))
}

pub fn qam_modulate(bits: &[u8], m: u32) -> Result<Vec<Complex64>> {
    let k = bits_per_symbol(m)?;
    if bits.len() % k != 0 {
        return Err(contract(format!("{} bits do not fill whole {m}-QAM symbols", bits.len())));
    }
    let half = k / 2;
    let l = 1usize << half;
    let norm = scale(m);
    let amp = |g: usize| (2.0 * gray_to_index(g) as f64 - (l as f64 - 1.0)) / norm;
    Ok(bits
        .chunks(k)
        .map(|s| Complex64::new(amp(bits_value(&s[..half])), amp(bits_value(&s[half..]))))
        .collect())
}

/// Hard-decision nearest-neighbour demodulation.
pub fn qam_demodulate(symbols: &[Complex64], m: u32) -> Result<Vec<u8>> {
    let k = bits_per_symbol(m)?;
    let half = k / 2;
    let l = 1usize << half;
    let norm = scale(m);
    let decide = |a: f64| {
        let idx = ((a * norm + (l as f64 - 1.0)) / 2.0).round();
        let idx = if idx.is_nan() { 0.0 } else { idx.clamp(0.0, (l - 1) as f64) } as usize;
        idx ^ (idx >> 1)
    };
    let mut out = Vec::with_capacity(symbols.len() * k);
    for s in symbols {
        for g in [decide(s.re), decide(s.im)] {
            out.extend((0..half).rev().map(|b| ((g >> b) & 1) as u8));
        }
    }
    Ok(out)
}

/// Nearest-neighbour Gray approximation of the uncoded bit error rate of
/// square `m`-QAM at the given symbol SNR (Es/N0, dB).
pub fn gray_qam_ber_approx(m: u32, es_n0_db: f64) -> Result<f64> {
    let k = bits_per_symbol(m)? as f64;
    let snr = 10f64.powf(es_n0_db / 10.0);
    let mf = m as f64;
    let x = (3.0 * snr / (mf - 1.0)).sqrt();
    let q = 0.5 * statrs::function::erf::erfc(x / std::f64::consts::SQRT_2);
    Ok(4.0 / k * (1.0 - 1.0 / mf.sqrt()) * q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_bits(k: usize) -> Vec<u8> {
        (0..1usize << k)
            .flat_map(|v| (0..k).rev().map(move |b| ((v >> b) & 1) as u8))
            .collect()
    }

    #[test]
    fn constellations_have_unit_energy() {
        for m in [4, 16, 64, 256] {
            let k = bits_per_symbol(m).unwrap();
            let s = qam_modulate(&all_bits(k), m).unwrap();
            let e = s.iter().map(|z| z.norm_sqr()).sum::<f64>() / s.len() as f64;
            assert!((e - 1.0).abs() < 1e-9, "{m}-QAM energy {e}");
        }
    }

    #[test]
    fn noiseless_round_trip() {
        for m in [16, 256] {
            let bits = all_bits(bits_per_symbol(m).unwrap());
            let s = qam_modulate(&bits, m).unwrap();
            assert_eq!(qam_demodulate(&s, m).unwrap(), bits);
        }
    }

    #[test]
    fn neighbours_differ_in_one_bit() {
        let bits = all_bits(4);
        let s = qam_modulate(&bits, 16).unwrap();
        let d = 2.0 / scale(16);
        for i in 0..16 {
            for j in 0..16 {
                if ((s[i] - s[j]).norm() - d).abs() < 1e-9 {
                    let diff = (0..4).filter(|&b| bits[4 * i + b] != bits[4 * j + b]).count();
                    assert_eq!(diff, 1);
                }
            }
        }
    }

    #[test]
    fn invalid_orders_and_lengths() {
        assert!(bits_per_symbol(8).is_err());
        assert!(bits_per_symbol(32).is_err());
        assert!(qam_modulate(&[1, 0, 1], 16).is_err());
    }
}
