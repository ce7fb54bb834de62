//! Semantic encoder/decoder: alternating transformer and channel-attention
//! blocks, interleaved complex packing and exact power normalisation.

use num_complex::Complex64;
use rand::Rng;
use semcom_autograd::{concat_cols, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::extractor::GridSpec;
use crate::nn::{normal, xavier, Bound, ParamSet};
use crate::selector::scatter_features;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub p_bound: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            blocks: 2,
            heads: 4,
            ff_mult: 4,
            p_bound: 1.0,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 || self.blocks == 0 || self.p_bound <= 0.0 {
            return Err(Error::Config(format!("invalid [codec] section: {self:?}")));
        }
        Ok(())
    }
}

/// K tokens of C complex symbols each, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSymbols {
    pub k: usize,
    pub c: usize,
    pub symbols: Vec<Complex64>,
}

impl ChannelSymbols {
    pub fn empty(c: usize) -> Self {
        Self {
            k: 0,
            c,
            symbols: Vec::new(),
        }
    }

    pub fn power(&self) -> f64 {
        mean_power(&self.symbols)
    }

    /// Interleaved real image, `[K, 2C]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.symbols.iter().flat_map(|z| [z.re, z.im]).collect();
        Tensor::new(&[self.k, 2 * self.c], data)
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (k, c2) = (t.rows(), t.cols());
        let symbols = t
            .data()
            .chunks(2)
            .map(|p| Complex64::new(p[0], p[1]))
            .collect();
        Self {
            k,
            c: c2 / 2,
            symbols,
        }
    }
}

pub fn mean_power(z: &[Complex64]) -> f64 {
    if z.is_empty() {
        return 0.0;
    }
    z.iter().map(|s| s.norm_sqr()).sum::<f64>() / z.len() as f64
}

/// Scales `z` so its mean power is exactly `p_bound`; zero input is returned unchanged.
pub fn normalize_power(z: &[Complex64], p_bound: f64) -> Vec<Complex64> {
    let energy: f64 = z.iter().map(|s| s.norm_sqr()).sum();
    if energy == 0.0 {
        return z.to_vec();
    }
    let s = (p_bound * z.len() as f64 / energy).sqrt();
    z.iter().map(|v| v * s).collect()
}

fn init_ca(p: &mut ParamSet, prefix: &str, d: usize, rng: &mut impl Rng) {
    for path in ["avg", "max"] {
        p.insert(format!("{prefix}.{path}.w"), xavier(rng, d, d));
        p.insert(format!("{prefix}.{path}.b"), Tensor::zeros(&[d]));
    }
    // Scale starts at 1 and offset at 0 so a fresh block is close to identity.
    p.insert(format!("{prefix}.scale.w"), normal(rng, &[2 * d, d], 0.01));
    p.insert(format!("{prefix}.scale.b"), Tensor::full(&[d], 1.0));
    p.insert(format!("{prefix}.offset.w"), normal(rng, &[2 * d, d], 0.01));
    p.insert(format!("{prefix}.offset.b"), Tensor::zeros(&[d]));
}

fn init_linear(p: &mut ParamSet, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    p.insert(format!("{prefix}.w"), xavier(rng, fan_in, fan_out));
    p.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

fn init_side(p: &mut ParamSet, side: &str, d_in: usize, d_out: usize, cfg: &CodecConfig, rng: &mut impl Rng) {
    let d = cfg.d_model;
    init_linear(p, &format!("{side}.embed"), d_in, d, rng);
    for i in 0..cfg.blocks {
        let t = format!("{side}.tf{i}");
        for m in ["wq", "wk", "wv", "wo"] {
            init_linear(p, &format!("{t}.{m}"), d, d, rng);
        }
        init_linear(p, &format!("{t}.ff1"), d, cfg.ff_mult * d, rng);
        init_linear(p, &format!("{t}.ff2"), cfg.ff_mult * d, d, rng);
        init_ca(p, &format!("{side}.ca{i}"), d, rng);
    }
    init_linear(p, &format!("{side}.out"), d, d_out, rng);
}

/// Encoder (`enc.*`) and decoder (`dec.*`) with mirrored shapes.
pub fn init_codec(p: &mut ParamSet, channels: usize, cfg: &CodecConfig, rng: &mut impl Rng) {
    init_side(p, "enc", channels, 2 * channels, cfg, rng);
    init_side(p, "dec", 2 * channels, channels, cfg, rng);
}

/// Channel attention over `[tokens, d]`: pooled descriptors drive a per-channel
/// scale and offset broadcast over tokens.
pub fn channel_attention_var<'t>(b: &Bound<'_, 't>, prefix: &str, f: Var<'t>) -> Var<'t> {
    let d = f.value().cols();
    let avg = b.linear(&format!("{prefix}.avg"), f.mean_cols().reshape(&[1, d]));
    let max = b.linear(&format!("{prefix}.max"), f.max_cols().reshape(&[1, d]));
    let w = concat_cols(&[avg, max]);
    let scale = b.linear(&format!("{prefix}.scale"), w).reshape(&[d]);
    let offset = b.linear(&format!("{prefix}.offset"), w).reshape(&[d]);
    f.mul_row(scale).add_row(offset)
}

fn attention_var<'t>(b: &Bound<'_, 't>, prefix: &str, x: Var<'t>, heads: usize) -> Var<'t> {
    let d = x.value().cols();
    let dh = d / heads;
    let q = b.linear(&format!("{prefix}.wq"), x);
    let k = b.linear(&format!("{prefix}.wk"), x);
    let v = b.linear(&format!("{prefix}.wv"), x);
    let outs: Vec<Var<'t>> = (0..heads)
        .map(|h| {
            let (qh, kh, vh) = (q.slice_cols(h * dh, dh), k.slice_cols(h * dh, dh), v.slice_cols(h * dh, dh));
            qh.matmul(kh.transpose())
                .scale(1.0 / (dh as f64).sqrt())
                .softmax_rows()
                .matmul(vh)
        })
        .collect();
    b.linear(&format!("{prefix}.wo"), concat_cols(&outs))
}

/// Pre-norm transformer block.
fn transformer_var<'t>(b: &Bound<'_, 't>, prefix: &str, x: Var<'t>, heads: usize) -> Var<'t> {
    let h = x.add(attention_var(b, prefix, x.layer_norm(1e-5), heads));
    let ff = b
        .linear(&format!("{prefix}.ff1"), h.layer_norm(1e-5))
        .silu();
    h.add(b.linear(&format!("{prefix}.ff2"), ff))
}

fn stack_var<'t>(b: &Bound<'_, 't>, side: &str, x: Var<'t>, cfg: &CodecConfig) -> Var<'t> {
    let mut h = b.linear(&format!("{side}.embed"), x);
    for i in 0..cfg.blocks {
        h = transformer_var(b, &format!("{side}.tf{i}"), h, cfg.heads);
        h = channel_attention_var(b, &format!("{side}.ca{i}"), h);
    }
    b.linear(&format!("{side}.out"), h)
}

/// `[K, C]` features to `[K, 2C]` interleaved symbols with mean power `p_bound`.
pub fn encode_var<'t>(b: &Bound<'_, 't>, f: Var<'t>, cfg: &CodecConfig) -> Var<'t> {
    stack_var(b, "enc", f, cfg).power_normalize(cfg.p_bound)
}

/// `[K, 2C]` received symbols to `[K, C]` features.
pub fn decode_var<'t>(b: &Bound<'_, 't>, z: Var<'t>, cfg: &CodecConfig) -> Var<'t> {
    stack_var(b, "dec", z, cfg)
}

pub fn encode(f: &Tensor, params: &ParamSet, cfg: &CodecConfig) -> ChannelSymbols {
    let c = f.cols();
    if f.is_empty() {
        return ChannelSymbols::empty(c);
    }
    let tape = Tape::new();
    let b = params.bind(&tape, |_| false);
    let z = encode_var(&b, tape.constant(f.clone()), cfg);
    ChannelSymbols::from_tensor(&z.value())
}

/// Decodes received symbols and zero-pads them back onto the grid.
/// Returns `(F_hat [K, C], padded map [H*W, C])`.
pub fn decode(
    z: &ChannelSymbols,
    positions: &[usize],
    grid: &GridSpec,
    params: &ParamSet,
    cfg: &CodecConfig,
) -> Result<(Tensor, Tensor)> {
    let c = grid.channels;
    if z.k != positions.len() || z.symbols.len() != positions.len() * c {
        return Err(contract(format!(
            "{} symbols do not match {} positions of {c} channels",
            z.symbols.len(),
            positions.len()
        )));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= grid.cells()) {
        return Err(contract(format!("position {p} outside the grid")));
    }
    if z.k == 0 {
        return Ok((Tensor::zeros(&[0, c]), Tensor::zeros(&[grid.cells(), c])));
    }
    let tape = Tape::new();
    let b = params.bind(&tape, |_| false);
    let f_hat = (*decode_var(&b, tape.constant(z.to_tensor()), cfg).value()).clone();
    let map = scatter_features(&f_hat, positions, grid.cells(), c)?;
    Ok((f_hat, map))
}
