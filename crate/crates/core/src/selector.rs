//! Importance-aware feature selection: importance map, cross-attention
//! enhancement, spatial attention, keep probabilities and thresholding.

use rand::seq::index::sample;
use rand::Rng;
use semcom_autograd::{concat_cols, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::extractor::{BevFeatureMap, GridSpec};
use crate::nn::{normal, xavier, Bound, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorConfig {
    /// Query/key width of the cross-attention.
    pub attn_dim: usize,
    /// Kernel of the spatial-attention conv.
    pub spatial_kernel: usize,
    /// Target mean number of selected cells per map; `gamma_thr` is calibrated to it.
    pub target_cr: f64,
    /// Initial threshold, replaced by calibration during training.
    pub gamma_thr: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            attn_dim: 8,
            spatial_kernel: 7,
            target_cr: 1e-2,
            gamma_thr: 0.0,
        }
    }
}

impl SelectorConfig {
    /// Mean cell budget implied by `target_cr` on `grid`, at least one cell.
    pub fn target_k(&self, grid: &GridSpec) -> f64 {
        (self.target_cr * grid.cells() as f64).max(1.0)
    }
}

pub fn init_selector(params: &mut ParamSet, grid: &GridSpec, anchors: usize, cfg: &SelectorConfig, rng: &mut impl Rng) {
    let c = grid.channels;
    let d = cfg.attn_dim;
    let k2 = cfg.spatial_kernel * cfg.spatial_kernel;
    params.insert("sel.gen.w", xavier(rng, c, anchors));
    params.insert("sel.gen.b", Tensor::zeros(&[anchors]));
    params.insert("sel.att.wq", normal(rng, &[1, d], 1.0));
    params.insert("sel.att.wk", xavier(rng, c, d));
    params.insert("sel.att.wv", xavier(rng, c, c));
    params.insert("sel.att.gamma", Tensor::zeros(&[1]));
    // Conv_dow starts near the constant 1 so the first selections follow the importance map.
    params.insert("sel.dow.w", normal(rng, &[c, 1], 0.01));
    params.insert("sel.dow.b", Tensor::full(&[1], 1.0));
    params.insert("sel.sa.w", normal(rng, &[2 * k2, 1], 0.01));
    params.insert("sel.sa.b", Tensor::zeros(&[1]));
}

/// Per-cell object confidence `[N, 1]`: the classification branch, max over anchors, sigmoid.
pub fn importance_var<'t>(b: &Bound<'_, 't>, m: Var<'t>) -> Var<'t> {
    let n = m.value().rows();
    b.linear("sel.gen", m).max_rows().sigmoid().reshape(&[n, 1])
}

/// Cross-attention with the importance map as query and the feature map as key
/// and value, residual-weighted by `gamma_res`, then reduced to one channel.
/// Returns `(M' [N, 1], attention [N, N])`.
pub fn cross_attend_var<'t>(b: &Bound<'_, 't>, imp: Var<'t>, m: Var<'t>) -> (Var<'t>, Var<'t>) {
    let wq = b.get("sel.att.wq");
    let d = wq.value().cols();
    let q = imp.matmul(wq);
    let k = m.matmul(b.get("sel.att.wk"));
    let v = m.matmul(b.get("sel.att.wv"));
    let attn = q
        .matmul(k.transpose())
        .scale(1.0 / (d as f64).sqrt())
        .softmax_rows();
    let enhanced = m.add(attn.matmul(v).scalar_mul(b.get("sel.att.gamma")));
    (b.linear("sel.dow", enhanced), attn)
}

/// Spatial attention over the single-channel importance map: channel-mean and
/// channel-max statistics, a conv, a sigmoid gate, applied multiplicatively.
pub fn spatial_attend_var<'t>(b: &Bound<'_, 't>, imp: Var<'t>, grid: &GridSpec, kernel: usize) -> Var<'t> {
    // With one channel, mean and max pooling over channels both equal the map.
    let stats = concat_cols(&[imp, imp]);
    let gate = stats
        .conv2d(b.get("sel.sa.w"), grid.h, grid.w, kernel)
        .add_row(b.get("sel.sa.b"))
        .sigmoid();
    imp.mul(gate)
}

/// Softmax over all cells of `M' * I'`; returns `[N, 1]`.
pub fn keep_probs_var<'t>(enhanced: Var<'t>, refined: Var<'t>) -> Var<'t> {
    let n = enhanced.value().rows();
    enhanced
        .mul(refined)
        .reshape(&[1, n])
        .softmax_rows()
        .reshape(&[n, 1])
}

/// Importance map and keep probabilities for one feature map.
pub fn selector_var<'t>(b: &Bound<'_, 't>, m: Var<'t>, grid: &GridSpec, cfg: &SelectorConfig) -> (Var<'t>, Var<'t>) {
    let imp = importance_var(b, m);
    let (enhanced, _) = cross_attend_var(b, imp, m);
    let refined = spatial_attend_var(b, imp, grid, cfg.spatial_kernel);
    (imp, keep_probs_var(enhanced, refined))
}

/// Strict threshold: a cell is kept when its probability exceeds `gamma_thr`.
pub fn threshold_mask(probs: &[f64], gamma_thr: f64) -> Vec<bool> {
    probs.iter().map(|&p| p > gamma_thr).collect()
}

pub fn mask_positions(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

pub fn compression_ratio(mask: &[bool]) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
}

/// Gathers the masked rows of `m` in row-major order.
pub fn select_features(m: &Tensor, mask: &[bool]) -> Result<(Tensor, Vec<usize>)> {
    if m.rows() != mask.len() {
        return Err(contract(format!(
            "mask has {} cells, map has {}",
            mask.len(),
            m.rows()
        )));
    }
    let pos = mask_positions(mask);
    let c = m.cols();
    let mut data = Vec::with_capacity(pos.len() * c);
    for &p in &pos {
        data.extend_from_slice(m.row(p));
    }
    Ok((Tensor::new(&[pos.len(), c], data), pos))
}

/// Places the rows of `features` at `positions` of an all-zero `[cells, C]` map.
pub fn scatter_features(features: &Tensor, positions: &[usize], cells: usize, channels: usize) -> Result<Tensor> {
    if features.len() != positions.len() * channels {
        return Err(contract(format!(
            "{} feature values for {} positions of {channels} channels",
            features.len(),
            positions.len()
        )));
    }
    let mut out = vec![0.0; cells * channels];
    for (i, &p) in positions.iter().enumerate() {
        if p >= cells {
            return Err(contract(format!("position {p} outside a {cells}-cell grid")));
        }
        out[p * channels..(p + 1) * channels]
            .copy_from_slice(&features.data()[i * channels..(i + 1) * channels]);
    }
    Ok(Tensor::new(&[cells, channels], out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub importance: Vec<f64>,
    pub probs: Vec<f64>,
    pub mask: Vec<bool>,
    pub features: Tensor,
    pub positions: Vec<usize>,
}

impl SelectionResult {
    pub fn k(&self) -> usize {
        self.positions.len()
    }

    pub fn cr(&self) -> f64 {
        compression_ratio(&self.mask)
    }
}

/// Keep probabilities for a feature map, computed without gradients.
pub fn keep_probabilities(m: &BevFeatureMap, params: &ParamSet, cfg: &SelectorConfig) -> (Vec<f64>, Vec<f64>) {
    let tape = Tape::new();
    let b = params.bind(&tape, |_| false);
    let mv = tape.constant(m.values.clone());
    let (imp, probs) = selector_var(&b, mv, &m.grid, cfg);
    let out = (imp.value().data().to_vec(), probs.value().data().to_vec());
    out
}

pub fn select(m: &BevFeatureMap, params: &ParamSet, cfg: &SelectorConfig, gamma_thr: f64) -> Result<SelectionResult> {
    let (importance, probs) = keep_probabilities(m, params, cfg);
    let mask = threshold_mask(&probs, gamma_thr);
    let (features, positions) = select_features(&m.values, &mask)?;
    Ok(SelectionResult {
        importance,
        probs,
        mask,
        features,
        positions,
    })
}

/// Threshold giving a mean of `target_k` kept cells over the given probability maps:
/// the midpoint between the `T`-th and `T+1`-th largest pooled probabilities with
/// `T = round(target_k * maps)`.
pub fn calibrate_threshold(maps: &[Vec<f64>], target_k: f64) -> f64 {
    let mut all: Vec<f64> = maps.iter().flatten().copied().collect();
    if all.is_empty() {
        return 0.0;
    }
    all.sort_by(|a, b| b.total_cmp(a));
    let t = ((target_k * maps.len() as f64).round() as usize).min(all.len());
    if t == 0 {
        return all[0];
    }
    if t == all.len() {
        return 0.0;
    }
    0.5 * (all[t - 1] + all[t])
}

/// Mask with exactly `k` uniformly chosen cells.
pub fn random_mask(cells: usize, k: usize, rng: &mut impl Rng) -> Vec<bool> {
    let mut m = vec![false; cells];
    for i in sample(rng, cells, k.min(cells)) {
        m[i] = true;
    }
    m
}

/// Mask keeping the `k` most probable cells (ties broken by lower index).
pub fn top_k_mask(probs: &[f64], k: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut m = vec![false; probs.len()];
    for &i in idx.iter().take(k) {
        m[i] = true;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_examples() {
        let p = vec![0.01; 100];
        assert_eq!(mask_positions(&threshold_mask(&p, 0.005)).len(), 100);
        assert_eq!(mask_positions(&threshold_mask(&p, 0.02)).len(), 0);
        // Equality is excluded.
        assert_eq!(mask_positions(&threshold_mask(&p, 0.01)).len(), 0);
        let q = [0.0, 0.3, 0.7];
        assert_eq!(threshold_mask(&q, 0.0), vec![false, true, true]);
    }

    #[test]
    fn compression_ratio_examples() {
        assert_eq!(compression_ratio(&[false; 10]), 0.0);
        assert_eq!(compression_ratio(&[true; 10]), 1.0);
        let mut m = vec![false; 10_000];
        for v in m.iter_mut().take(14) {
            *v = true;
        }
        assert!((compression_ratio(&m) - 1.4e-3).abs() < 1e-15);
    }

    #[test]
    fn select_all_and_none() {
        let m = Tensor::new(&[3, 2], vec![1., 2., 3., 4., 5., 6.]);
        let (f, p) = select_features(&m, &[true; 3]).unwrap();
        assert_eq!(f, m);
        assert_eq!(p, vec![0, 1, 2]);
        let (f, p) = select_features(&m, &[false; 3]).unwrap();
        assert!(f.is_empty() && p.is_empty());
        assert!(scatter_features(&f, &[5], 3, 2).is_err());
    }

    #[test]
    fn calibration_hits_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let maps: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..50).map(|_| rng.random::<f64>()).collect())
            .collect();
        let thr = calibrate_threshold(&maps, 4.0);
        let total: usize = maps.iter().map(|m| mask_positions(&threshold_mask(m, thr)).len()).sum();
        assert_eq!(total, 80);
    }

    #[test]
    fn residual_weight_zero_reduces_to_downsampling() {
        let grid = GridSpec::new([0.0, 4.0], [0.0, 2.0], 1.0, 3).unwrap();
        let mut p = ParamSet::new();
        init_selector(&mut p, &grid, 2, &SelectorConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = normal(&mut rng, &[8, 3], 1.0);
        let tape = Tape::new();
        let b = p.bind(&tape, |_| false);
        let mv = tape.constant(m.clone());
        let imp = importance_var(&b, mv);
        let (enh, attn) = cross_attend_var(&b, imp, mv);
        for r in 0..8 {
            assert!((attn.value().row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let dow = b.linear("sel.dow", mv);
        assert_eq!(enh.value().data(), dow.value().data());
    }

    #[test]
    fn saturated_gate_is_identity() {
        let grid = GridSpec::new([0.0, 4.0], [0.0, 2.0], 1.0, 3).unwrap();
        let mut p = ParamSet::new();
        init_selector(&mut p, &grid, 2, &SelectorConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        p.get_mut("sel.sa.w").data_mut().fill(0.0);
        p.get_mut("sel.sa.b").data_mut()[0] = 800.0;
        let tape = Tape::new();
        let b = p.bind(&tape, |_| false);
        let imp = tape.constant(Tensor::new(&[8, 1], vec![0.1, 0.9, 0.5, 0.0, 0.3, 0.2, 1.0, 0.4]));
        let out = spatial_attend_var(&b, imp, &grid, 7);
        assert_eq!(out.value().data(), imp.value().data());
    }
}
