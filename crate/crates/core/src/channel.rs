//! AWGN and i.i.d. per-symbol Rayleigh fading channels with SNR calibration.
//!
//! Every transmitter in this crate emits unit average power (the codec
//! normalises exactly, QAM constellations have unit mean energy), so SNRs are
//! defined against a signal power of 1.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

impl ChannelKind {
    pub fn name(self) -> &'static str {
        match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Rayleigh => "rayleigh",
        }
    }
}

impl std::str::FromStr for ChannelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "awgn" => Ok(ChannelKind::Awgn),
            "rayleigh" => Ok(ChannelKind::Rayleigh),
            other => Err(format!("unknown channel kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    pub snr_db: f64,
    /// Rayleigh only: undo the fading at the receiver with perfect CSI.
    pub equalize: bool,
    pub seed: u64,
}

/// Receiver-side compensation of a known fading coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Equalizer {
    /// `1 / h`, falling back to the MMSE weight when `|h| < 1e-6`.
    ZeroForcing,
    /// `conj(h) / (|h|^2 + sigma^2)`.
    Mmse,
}

pub const ZF_GUARD: f64 = 1e-6;

pub fn snr_to_sigma2(snr_db: f64, p_z: f64) -> f64 {
    p_z / 10f64.powf(snr_db / 10.0)
}

pub fn complex_normal(rng: &mut ChaCha8Rng, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// One draw of fading gains and noise for `n` symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub h: Vec<Complex64>,
    pub noise: Vec<Complex64>,
    pub sigma2: f64,
}

impl Realization {
    pub fn sample(kind: ChannelKind, n: usize, sigma2: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut h = Vec::with_capacity(n);
        let mut noise = Vec::with_capacity(n);
        for _ in 0..n {
            h.push(match kind {
                ChannelKind::Awgn => Complex64::new(1.0, 0.0),
                ChannelKind::Rayleigh => complex_normal(rng, 1.0),
            });
            noise.push(if sigma2 > 0.0 {
                complex_normal(rng, sigma2)
            } else {
                Complex64::new(0.0, 0.0)
            });
        }
        Self { h, noise, sigma2 }
    }

    fn weight(&self, h: Complex64, eq: Equalizer) -> Complex64 {
        let mmse = h.conj() / (h.norm_sqr() + self.sigma2);
        match eq {
            Equalizer::ZeroForcing if h.norm() >= ZF_GUARD => 1.0 / h,
            _ => mmse,
        }
    }

    /// Per-symbol `(coef, offset)` with `z_hat = coef * z + offset`.
    pub fn affine(&self, eq: Option<Equalizer>) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
        let mut coef = Vec::with_capacity(self.h.len());
        let mut off = Vec::with_capacity(self.h.len());
        for (&h, &n) in self.h.iter().zip(&self.noise) {
            let g = eq.map_or(Complex64::new(1.0, 0.0), |e| self.weight(h, e));
            let (c, o) = (g * h, g * n);
            coef.push([c.re, c.im]);
            off.push([o.re, o.im]);
        }
        (coef, off)
    }

    pub fn apply(&self, z: &[Complex64], eq: Option<Equalizer>) -> Vec<Complex64> {
        assert_eq!(z.len(), self.h.len(), "realization length mismatch");
        z.iter()
            .zip(self.h.iter().zip(&self.noise))
            .map(|(&s, (&h, &n))| {
                let y = h * s + n;
                match eq {
                    None => y,
                    Some(e) => self.weight(h, e) * y,
                }
            })
            .collect()
    }
}

pub fn awgn(z: &[Complex64], snr_db: f64, seed: u64) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Realization::sample(ChannelKind::Awgn, z.len(), snr_to_sigma2(snr_db, 1.0), &mut rng);
    r.apply(z, None)
}

/// Rayleigh fading; with `equalize` the receiver applies guarded zero-forcing.
pub fn rayleigh(z: &[Complex64], snr_db: f64, seed: u64, equalize: bool) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Realization::sample(ChannelKind::Rayleigh, z.len(), snr_to_sigma2(snr_db, 1.0), &mut rng);
    r.apply(z, equalize.then_some(Equalizer::ZeroForcing))
}

/// Dispatches on `cfg.kind` using zero-forcing when equalising.
pub fn transmit(z: &[Complex64], cfg: &ChannelConfig) -> Vec<Complex64> {
    match cfg.kind {
        ChannelKind::Awgn => awgn(z, cfg.snr_db, cfg.seed),
        ChannelKind::Rayleigh => rayleigh(z, cfg.snr_db, cfg.seed, cfg.equalize),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma2_examples() {
        assert!((snr_to_sigma2(10.0, 1.0) - 0.1).abs() < 1e-15);
        assert_eq!(snr_to_sigma2(0.0, 1.0), 1.0);
        assert!((snr_to_sigma2(20.0, 1.0) - 0.01).abs() < 1e-15);
        assert_eq!(snr_to_sigma2(f64::INFINITY, 1.0), 0.0);
    }

    #[test]
    fn infinite_snr_is_noiseless() {
        let z: Vec<Complex64> = (0..50).map(|i| Complex64::new(i as f64, -0.5)).collect();
        assert_eq!(awgn(&z, f64::INFINITY, 3), z);
        let r = rayleigh(&z, f64::INFINITY, 3, true);
        for (a, b) in r.iter().zip(&z) {
            assert!((a - b).norm() < 1e-9 * (1.0 + b.norm()));
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let z = vec![Complex64::new(1.0, 0.0); 100];
        assert_eq!(awgn(&z, 5.0, 9), awgn(&z, 5.0, 9));
        assert_eq!(rayleigh(&z, 5.0, 9, false), rayleigh(&z, 5.0, 9, false));
        assert_ne!(awgn(&z, 5.0, 9), awgn(&z, 5.0, 10));
    }

    #[test]
    fn affine_matches_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z: Vec<Complex64> = (0..20).map(|_| complex_normal(&mut rng, 1.0)).collect();
        let r = Realization::sample(ChannelKind::Rayleigh, 20, 0.3, &mut rng);
        for eq in [None, Some(Equalizer::Mmse), Some(Equalizer::ZeroForcing)] {
            let (c, o) = r.affine(eq);
            let y = r.apply(&z, eq);
            for i in 0..20 {
                let v = Complex64::new(c[i][0], c[i][1]) * z[i] + Complex64::new(o[i][0], o[i][1]);
                assert!((v - y[i]).norm() < 1e-12);
            }
        }
    }
}
