//! Block forward error correction. The default code is the constraint-length-7
//! convolutional code with generators 171/133 (octal), terminated per block and
//! decoded with a hard-decision Viterbi search.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// A block code operating on hard bits (`0`/`1` bytes).
pub trait Fec {
    /// Information bits per block.
    fn info_len(&self) -> usize;
    /// Coded bits per block.
    fn block_len(&self) -> usize;
    fn encode_block(&self, info: &[u8]) -> Vec<u8>;
    fn decode_block(&self, coded: &[u8]) -> Vec<u8>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FecKind {
    Convolutional,
}

impl FecKind {
    pub fn build(self) -> Box<dyn Fec + Send + Sync> {
        match self {
            FecKind::Convolutional => Box::new(ConvolutionalCode::default()),
        }
    }
}

const MEMORY: usize = 6;
const STATES: usize = 1 << MEMORY;

/// Rate-1/2 feed-forward convolutional code, zero-terminated so that each block
/// of `info_len` bits plus 6 tail bits maps to `2 * (info_len + 6)` coded bits.
#[derive(Debug, Clone)]
pub struct ConvolutionalCode {
    info_len: usize,
    /// Output pair for every 7-bit register value (newest input in bit 6).
    outputs: [[u8; 2]; 2 * STATES],
}

impl Default for ConvolutionalCode {
    /// 494 information bits per 1000-bit codeword.
    fn default() -> Self {
        Self::new(494, 0o171, 0o133)
    }
}

impl ConvolutionalCode {
    pub fn new(info_len: usize, g1: u32, g2: u32) -> Self {
        let mut outputs = [[0u8; 2]; 2 * STATES];
        for (r, o) in outputs.iter_mut().enumerate() {
            let r = r as u32;
            *o = [((r & g1).count_ones() & 1) as u8, ((r & g2).count_ones() & 1) as u8];
        }
        Self { info_len, outputs }
    }
}

impl Fec for ConvolutionalCode {
    fn info_len(&self) -> usize {
        self.info_len
    }

    fn block_len(&self) -> usize {
        2 * (self.info_len + MEMORY)
    }

    fn encode_block(&self, info: &[u8]) -> Vec<u8> {
        assert_eq!(info.len(), self.info_len);
        let mut state = 0usize;
        let mut out = Vec::with_capacity(self.block_len());
        for &b in info.iter().chain(std::iter::repeat_n(&0u8, MEMORY)) {
            let r = ((b as usize & 1) << MEMORY) | state;
            out.extend_from_slice(&self.outputs[r]);
            state = r >> 1;
        }
        out
    }

    fn decode_block(&self, coded: &[u8]) -> Vec<u8> {
        assert_eq!(coded.len(), self.block_len());
        let steps = coded.len() / 2;
        let inf = u32::MAX / 2;
        let mut metric = [inf; STATES];
        metric[0] = 0;
        let mut decisions = vec![[0u8; STATES]; steps];
        for (t, pair) in coded.chunks(2).enumerate() {
            let mut next = [inf; STATES];
            for ns in 0..STATES {
                let b = ns >> (MEMORY - 1);
                let mut best = (inf, 0u8);
                for x in 0..2 {
                    let s = ((ns & (STATES / 2 - 1)) << 1) | x;
                    let o = &self.outputs[(b << MEMORY) | s];
                    let bm = (o[0] != pair[0]) as u32 + (o[1] != pair[1]) as u32;
                    let m = metric[s].saturating_add(bm);
                    if m < best.0 {
                        best = (m, x as u8);
                    }
                }
                next[ns] = best.0;
                decisions[t][ns] = best.1;
            }
            metric = next;
        }
        // The tail drives the encoder back to state 0.
        let mut state = 0usize;
        let mut bits = vec![0u8; steps];
        for t in (0..steps).rev() {
            bits[t] = (state >> (MEMORY - 1)) as u8;
            state = ((state & (STATES / 2 - 1)) << 1) | decisions[t][state] as usize;
        }
        bits.truncate(self.info_len);
        bits
    }
}

/// Coded stream plus the number of zero bits appended to fill the last block.
#[derive(Debug, Clone, PartialEq)]
pub struct CodedBits {
    pub bits: Vec<u8>,
    pub pad: usize,
}

pub fn fec_encode(bits: &[u8], fec: &dyn Fec) -> CodedBits {
    let k = fec.info_len();
    let pad = (k - bits.len() % k) % k;
    let mut padded = bits.to_vec();
    padded.resize(bits.len() + pad, 0);
    let mut out = Vec::with_capacity(padded.len() / k * fec.block_len());
    for block in padded.chunks(k) {
        out.extend(fec.encode_block(block));
    }
    CodedBits { bits: out, pad }
}

pub fn fec_decode(coded: &CodedBits, fec: &dyn Fec) -> Result<Vec<u8>> {
    let n = fec.block_len();
    if coded.bits.len() % n != 0 {
        return Err(contract(format!(
            "{} coded bits is not a whole number of {n}-bit blocks",
            coded.bits.len()
        )));
    }
    let mut out = Vec::with_capacity(coded.bits.len() / n * fec.info_len());
    for block in coded.bits.chunks(n) {
        out.extend(fec.decode_block(block));
    }
    if coded.pad > out.len() {
        return Err(contract("padding longer than the decoded stream"));
    }
    out.truncate(out.len() - coded.pad);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bits(n: usize, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0..2u8)).collect()
    }

    #[test]
    fn default_block_is_a_1000_bit_codeword() {
        let c = ConvolutionalCode::default();
        assert_eq!(c.block_len(), 1000);
    }

    #[test]
    fn zero_input_zero_codeword() {
        let c = ConvolutionalCode::default();
        assert!(fec_encode(&vec![0; 2000], &c).bits.iter().all(|&b| b == 0));
    }

    #[test]
    fn noiseless_round_trip() {
        let c = ConvolutionalCode::default();
        let bits = random_bits(10_000, 1);
        let coded = fec_encode(&bits, &c);
        assert_eq!(fec_decode(&coded, &c).unwrap(), bits);
    }

    #[test]
    fn every_single_error_is_corrected() {
        let c = ConvolutionalCode::default();
        let bits = random_bits(494, 2);
        let coded = c.encode_block(&bits);
        for i in 0..coded.len() {
            let mut r = coded.clone();
            r[i] ^= 1;
            assert_eq!(c.decode_block(&r), bits, "flip at {i}");
        }
    }

    #[test]
    fn code_is_linear() {
        let c = ConvolutionalCode::default();
        let a = random_bits(494, 3);
        let b = random_bits(494, 4);
        let x: Vec<u8> = a.iter().zip(&b).map(|(p, q)| p ^ q).collect();
        let sum: Vec<u8> = c
            .encode_block(&a)
            .iter()
            .zip(c.encode_block(&b))
            .map(|(p, q)| p ^ q)
            .collect();
        assert_eq!(c.encode_block(&x), sum);
    }

    #[test]
    fn ragged_stream_is_rejected() {
        let c = ConvolutionalCode::default();
        let coded = CodedBits {
            bits: vec![0; 999],
            pad: 0,
        };
        assert!(fec_decode(&coded, &c).is_err());
    }
}
