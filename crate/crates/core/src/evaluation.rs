//! Average precision, channel-use parity, SNR sweeps, the lossless CR
//! ablation, and the results files.
//!
//! Results schema (one JSON object per line, and the same columns in CSV):
//! `scheme, channel, snr_db, cr, channel_uses, ap50, ap70, seed`.
//! `cr` and `channel_uses` are means over the test scenes; `channel_uses`
//! counts nominal complex symbols.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semcom_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelConfig, ChannelKind};
use crate::classic::channel_uses;
use crate::config::ExperimentConfig;
use crate::dataset::derive_seed;
use crate::error::{io_err, json_err, Error, Result};
use crate::extractor::BevFeatureMap;
use crate::geometry::{rotated_iou_unchecked, Box7};
use crate::perception::Detection;
use crate::pipeline::{classic_cells, perceive, received_map, selection, Model, SceneInputs, Scheme};
use crate::selector::{random_mask, top_k_mask};

/// All-point interpolated AP with score-descending greedy matching ranked
/// across all scenes. Each prediction takes the highest-IoU ground truth
/// still unmatched in its scene if that IoU reaches `iou_thr`.
pub fn average_precision(preds: &[Detection], gts: &[Vec<Box7>], iou_thr: f64) -> f64 {
    assert_eq!(preds.len(), gts.len(), "one prediction set per scene");
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let mut ranked: Vec<(f64, usize, usize)> = preds
        .iter()
        .enumerate()
        .flat_map(|(s, d)| d.scores.iter().enumerate().map(move |(i, &sc)| (sc, s, i)))
        .collect();
    if n_gt == 0 {
        return if ranked.is_empty() { 1.0 } else { 0.0 };
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(ranked.len());
    for &(_, s, i) in &ranked {
        let b = &preds[s].boxes[i];
        let best = gts[s]
            .iter()
            .enumerate()
            .filter(|(j, _)| !matched[s][*j])
            .map(|(j, g)| (j, rotated_iou_unchecked(b, g)))
            .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)));
        match best {
            Some((j, iou)) if iou >= iou_thr => {
                matched[s][j] = true;
                tp.push(true);
            }
            _ => tp.push(false),
        }
    }
    ap_from_hits(&tp, n_gt)
}

/// Area under the monotone precision envelope for a ranked TP/FP list.
pub fn ap_from_hits(tp: &[bool], n_gt: usize) -> f64 {
    let mut rec = vec![0.0];
    let mut prec = vec![0.0];
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        rec.push(hits as f64 / n_gt as f64);
        prec.push(hits as f64 / (k + 1) as f64);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (1..rec.len())
        .filter(|&i| rec[i] != rec[i - 1])
        .map(|i| (rec[i] - rec[i - 1]) * prec[i])
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scheme: Scheme,
    pub channel: ChannelKind,
    pub snr_db: f64,
    pub cr: f64,
    pub channel_uses: f64,
    pub ap50: f64,
    pub ap70: f64,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "scheme,channel,snr_db,cr,channel_uses,ap50,ap70,seed";

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.scheme.name(),
            self.channel.name(),
            self.snr_db,
            self.cr,
            self.channel_uses,
            self.ap50,
            self.ap70,
            self.seed
        )
    }
}

/// Nominal channel uses of each channel-using scheme at its configured CR.
pub fn nominal_uses(cfg: &ExperimentConfig) -> Result<BTreeMap<Scheme, f64>> {
    let g = cfg.grid.spec()?;
    let s_m = (g.cells() * g.channels) as f64;
    let mut out = BTreeMap::new();
    for &s in &cfg.eval.schemes {
        let uses = match s {
            Scheme::Scomcp => s_m * cfg.selector.target_cr,
            Scheme::Classic16 | Scheme::Classic256 => {
                let c = cfg.classic(s).expect("classic scheme");
                channel_uses(s_m, c.cr, c.code_rate, c.modulation)
            }
            Scheme::UpperBound | Scheme::EgoOnly => continue,
        };
        out.insert(s, uses);
    }
    Ok(out)
}

/// Refuses configurations whose compared schemes differ in nominal channel
/// uses by more than the configured relative tolerance.
pub fn check_parity(cfg: &ExperimentConfig) -> Result<BTreeMap<Scheme, f64>> {
    let uses = nominal_uses(cfg)?;
    let lo = uses.values().copied().fold(f64::INFINITY, f64::min);
    let hi = uses.values().copied().fold(0.0, f64::max);
    if !uses.is_empty() && (hi - lo) > cfg.eval.parity_tolerance * lo {
        let detail: Vec<String> = uses.iter().map(|(s, u)| format!("{} {u:.3}", s.name())).collect();
        return Err(Error::Config(format!(
            "channel uses differ by more than {:.2}% across schemes: {}",
            cfg.eval.parity_tolerance * 100.0,
            detail.join(", ")
        )));
    }
    Ok(uses)
}

/// Extracted maps and learned selection for one test scene; shared by every
/// scheme and channel setting.
pub struct SceneCache {
    pub m_e: BevFeatureMap,
    pub m_j: BevFeatureMap,
    pub mask: Vec<bool>,
    pub probs: Vec<f64>,
    pub gt: Vec<Box7>,
    pub id: usize,
}

pub fn cache_scenes(model: &Model, scenes: &[SceneInputs]) -> Result<Vec<SceneCache>> {
    scenes
        .iter()
        .map(|s| {
            let (m_e, m_j) = model.maps(s)?;
            let (mask, probs) = selection(model, &m_j);
            Ok(SceneCache {
                m_e,
                m_j,
                mask,
                probs,
                gt: s.gt.clone(),
                id: s.id,
            })
        })
        .collect()
}

/// Channel seed of one scene inside one evaluation cell.
fn scene_seed(seed: u64, scheme: Scheme, kind: ChannelKind, snr_db: f64, id: usize) -> u64 {
    let cell = derive_seed(seed, scheme as u64 * 16 + kind as u64);
    derive_seed(cell, (id as u64) << 20 ^ snr_db.to_bits().rotate_left(7))
}

struct CellResult {
    dets: Vec<Detection>,
    cr: f64,
    uses: f64,
}

fn run_cell(
    model: &Model,
    cfg: &ExperimentConfig,
    cache: &[SceneCache],
    scheme: Scheme,
    kind: ChannelKind,
    snr_db: f64,
    seed: u64,
) -> Result<CellResult> {
    let mut dets = Vec::with_capacity(cache.len());
    let (mut cr, mut uses) = (0.0, 0.0);
    let classic = cfg.classic(scheme).unwrap_or(&cfg.classic16);
    for c in cache {
        let ch = ChannelConfig {
            kind,
            snr_db,
            equalize: cfg.eval.equalize,
            seed: scene_seed(seed, scheme, kind, snr_db, c.id),
        };
        let mask = if scheme.modulation().is_some() {
            let k = c.mask.iter().filter(|&&m| m).count();
            top_k_mask(&c.probs, classic_cells(k, classic.cr, cfg.selector.target_cr))
        } else {
            c.mask.clone()
        };
        let (collab, stats) = received_map(model, scheme, &c.m_j, &mask, &ch, classic)?;
        dets.push(perceive(model, &c.m_e, &collab, 0.0)?);
        cr += stats.cr;
        uses += stats.channel_uses;
    }
    let n = cache.len().max(1) as f64;
    Ok(CellResult {
        dets,
        cr: cr / n,
        uses: uses / n,
    })
}

/// Every `(scheme, channel, snr, seed)` cell of the configured sweep.
/// Channel-independent schemes are computed once and repeated per cell.
pub fn evaluate(model: &Model, cfg: &ExperimentConfig, scenes: &[SceneInputs]) -> Result<Vec<MetricsRow>> {
    check_parity(cfg)?;
    let cache = cache_scenes(model, scenes)?;
    let gts: Vec<Vec<Box7>> = cache.iter().map(|c| c.gt.clone()).collect();
    let mut fixed: BTreeMap<Scheme, (f64, f64, f64, f64)> = BTreeMap::new();
    let mut rows = Vec::new();
    for &scheme in &cfg.eval.schemes {
        for &kind in &cfg.eval.channels {
            for &snr in &cfg.eval.snr_db {
                for &seed in &cfg.eval.seeds {
                    let (cr, uses, ap50, ap70) = match fixed.get(&scheme) {
                        Some(v) => *v,
                        None => {
                            let r = run_cell(model, cfg, &cache, scheme, kind, snr, seed)?;
                            let v = (
                                r.cr,
                                r.uses,
                                average_precision(&r.dets, &gts, 0.5),
                                average_precision(&r.dets, &gts, 0.7),
                            );
                            if !scheme.uses_channel() {
                                fixed.insert(scheme, v);
                            }
                            v
                        }
                    };
                    rows.push(MetricsRow {
                        scheme,
                        channel: kind,
                        snr_db: snr,
                        cr,
                        channel_uses: uses,
                        ap50,
                        ap70,
                        seed,
                    });
                }
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMethod {
    Selector,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: MaskMethod,
    pub cr: f64,
    pub cells: usize,
    pub ap50: f64,
    pub ap70: f64,
    pub seed: u64,
}

/// Lossless sharing of `round(cr * H * W)` cells chosen by keep probability
/// or uniformly at random.
pub fn ablation(model: &Model, cfg: &ExperimentConfig, scenes: &[SceneInputs]) -> Result<Vec<AblationRow>> {
    let cache = cache_scenes(model, scenes)?;
    let gts: Vec<Vec<Box7>> = cache.iter().map(|c| c.gt.clone()).collect();
    let n = model.grid.cells();
    let mut rows = Vec::new();
    for &cr in &cfg.eval.ablation_cr {
        let k = ((cr * n as f64).round() as usize).clamp(1, n);
        let mut methods = vec![(MaskMethod::Selector, 0u64)];
        methods.extend(cfg.eval.seeds.iter().map(|&s| (MaskMethod::Random, s)));
        for (method, seed) in methods {
            let mut dets = Vec::with_capacity(cache.len());
            for c in &cache {
                let mask = match method {
                    MaskMethod::Selector => top_k_mask(&c.probs, k),
                    MaskMethod::Random => {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 50_000 + c.id as u64));
                        random_mask(n, k, &mut rng)
                    }
                };
                dets.push(perceive(model, &c.m_e, &mask_rows(&c.m_j.values, &mask), 0.0)?);
            }
            rows.push(AblationRow {
                method,
                cr: k as f64 / n as f64,
                cells: k,
                ap50: average_precision(&dets, &gts, 0.5),
                ap70: average_precision(&dets, &gts, 0.7),
                seed,
            });
        }
    }
    Ok(rows)
}

fn mask_rows(m: &Tensor, mask: &[bool]) -> Tensor {
    let mut out = m.clone();
    let c = m.cols();
    for (i, &keep) in mask.iter().enumerate() {
        if !keep {
            out.data_mut()[i * c..(i + 1) * c].fill(0.0);
        }
    }
    out
}

/// Appends line-delimited records.
pub fn append_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(json_err(path))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(json_err(path)))
        .collect()
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Per-scene detections as line-delimited `{scene, boxes, scores}` records.
pub fn export_detections(path: &Path, ids: &[usize], dets: &[Detection]) -> Result<()> {
    #[derive(Serialize)]
    struct Record<'a> {
        scene: usize,
        #[serde(flatten)]
        det: &'a Detection,
    }
    let recs: Vec<Record> = ids.iter().zip(dets).map(|(&scene, det)| Record { scene, det }).collect();
    append_jsonl(path, &recs)
}

/// Mean of a metric over seeds for one `(scheme, channel, snr)` cell.
pub fn mean_over_seeds(rows: &[MetricsRow], scheme: Scheme, channel: ChannelKind, snr_db: f64, f: impl Fn(&MetricsRow) -> f64) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.scheme == scheme && r.channel == channel && r.snr_db == snr_db)
        .map(f)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
