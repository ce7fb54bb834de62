//! Per-cell attention fusion of ego and collaborator features, the 1x1
//! detection head, anchor box coding and rotated NMS.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use semcom_autograd::{concat_cols, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::extractor::{BevFeatureMap, GridSpec};
use crate::geometry::{rotated_iou_unchecked, wrap_angle, Box7};
use crate::nn::{normal, xavier, Bound, ParamSet};

/// Yaw of the two anchors placed at every cell.
pub const ANCHOR_YAWS: [f64; 2] = [0.0, FRAC_PI_2];
pub const ANCHORS_PER_CELL: usize = ANCHOR_YAWS.len();
pub const BOX_PARAMS: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionConfig {
    pub nms_iou: f64,
    /// Score cut for visualisation; AP is computed with no cut.
    pub score_thr: f64,
    pub pre_nms_top_k: usize,
    pub max_detections: usize,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            nms_iou: 0.15,
            score_thr: 0.3,
            pre_nms_top_k: 100,
            max_detections: 50,
            pos_iou: 0.6,
            neg_iou: 0.45,
        }
    }
}

/// Anchor boxes for every `(cell, yaw)`; anchor `j` belongs to cell `j / A`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub grid: GridSpec,
    pub boxes: Vec<Box7>,
}

impl AnchorSet {
    /// One size prior `(w, l, h)` resting on the ground, two yaws per cell.
    pub fn new(grid: &GridSpec, size: (f64, f64, f64)) -> Self {
        let (w, l, h) = size;
        let mut boxes = Vec::with_capacity(grid.cells() * ANCHORS_PER_CELL);
        for i in 0..grid.cells() {
            let [cx, cy] = grid.cell_center(i);
            for &yaw in &ANCHOR_YAWS {
                boxes.push(Box7 {
                    cx,
                    cy,
                    cz: h / 2.0,
                    w,
                    l,
                    h,
                    yaw,
                });
            }
        }
        Self { grid: *grid, boxes }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Wraps a yaw difference into `[-pi/2, pi/2)`; boxes are symmetric under a half turn.
pub fn wrap_half_turn(a: f64) -> f64 {
    let r = (a + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    if r >= FRAC_PI_2 {
        r - PI
    } else {
        r
    }
}

/// Residuals of `gt` relative to `anchor`: center offsets over the anchor
/// diagonal (height for z), log size ratios and a half-turn-wrapped yaw offset.
pub fn encode_box(anchor: &Box7, gt: &Box7) -> [f64; BOX_PARAMS] {
    let diag = anchor.w.hypot(anchor.l);
    [
        (gt.cx - anchor.cx) / diag,
        (gt.cy - anchor.cy) / diag,
        (gt.cz - anchor.cz) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.l / anchor.l).ln(),
        (gt.h / anchor.h).ln(),
        wrap_half_turn(gt.yaw - anchor.yaw),
    ]
}

pub fn decode_box(anchor: &Box7, r: &[f64]) -> Box7 {
    let diag = anchor.w.hypot(anchor.l);
    Box7 {
        cx: anchor.cx + r[0] * diag,
        cy: anchor.cy + r[1] * diag,
        cz: anchor.cz + r[2] * anchor.h,
        w: anchor.w * r[3].clamp(-5.0, 5.0).exp(),
        l: anchor.l * r[4].clamp(-5.0, 5.0).exp(),
        h: anchor.h * r[5].clamp(-5.0, 5.0).exp(),
        yaw: wrap_angle(anchor.yaw + r[6]),
    }
}

pub fn init_fusion(params: &mut ParamSet, channels: usize, rng: &mut impl Rng) {
    params.insert("fus.wq", xavier(rng, channels, channels));
    params.insert("fus.wk", xavier(rng, channels, channels));
}

pub fn init_detector(params: &mut ParamSet, channels: usize, rng: &mut impl Rng) {
    let a = ANCHORS_PER_CELL;
    params.insert("det.cls.w", normal(rng, &[channels, a], 0.01));
    // Prior of 1% positives, the usual focal-loss starting point.
    params.insert("det.cls.b", Tensor::full(&[a], -(99f64).ln()));
    params.insert("det.reg.w", normal(rng, &[channels, BOX_PARAMS * a], 0.01));
    params.insert("det.reg.b", Tensor::zeros(&[BOX_PARAMS * a]));
}

/// Attention over the two agents at every cell, queried by the ego feature.
/// Returns `(fused [N, C], weights [N, 2])` with column 0 the ego weight.
pub fn fuse_var<'t>(b: &Bound<'_, 't>, ego: Var<'t>, collab: Var<'t>) -> (Var<'t>, Var<'t>) {
    let (n, c) = (ego.value().rows(), ego.value().cols());
    let wk = b.get("fus.wk");
    let q = ego.matmul(b.get("fus.wq"));
    let s = 1.0 / (c as f64).sqrt();
    let le = q.mul(ego.matmul(wk)).sum_rows().reshape(&[n, 1]);
    let lc = q.mul(collab.matmul(wk)).sum_rows().reshape(&[n, 1]);
    let w = concat_cols(&[le, lc]).scale(s).softmax_rows();
    let we = w.slice_cols(0, 1).reshape(&[n]);
    let wc = w.slice_cols(1, 1).reshape(&[n]);
    (ego.mul_col(we).add(collab.mul_col(wc)), w)
}

/// Classification logits `[N, A]` and box residuals `[N, 7A]`.
pub fn detect_var<'t>(b: &Bound<'_, 't>, fused: Var<'t>) -> (Var<'t>, Var<'t>) {
    (b.linear("det.cls", fused), b.linear("det.reg", fused))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawDetection {
    pub cls: Tensor,
    pub reg: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub boxes: Vec<Box7>,
    pub scores: Vec<f64>,
}

pub fn fuse(ego: &BevFeatureMap, collab: &Tensor, params: &ParamSet) -> Result<(Tensor, Tensor)> {
    if collab.shape() != ego.values.shape() {
        return Err(contract(format!(
            "collaborator map {:?} does not match the ego grid {:?}",
            collab.shape(),
            ego.values.shape()
        )));
    }
    let tape = Tape::new();
    let b = params.bind(&tape, |_| false);
    let (f, w) = fuse_var(&b, tape.constant(ego.values.clone()), tape.constant(collab.clone()));
    let out = ((*f.value()).clone(), (*w.value()).clone());
    Ok(out)
}

pub fn detect(fused: &Tensor, params: &ParamSet) -> RawDetection {
    let tape = Tape::new();
    let b = params.bind(&tape, |_| false);
    let (cls, reg) = detect_var(&b, tape.constant(fused.clone()));
    RawDetection {
        cls: (*cls.value()).clone(),
        reg: (*reg.value()).clone(),
    }
}

/// Greedy rotated NMS over boxes sorted by descending score; returns kept indices.
pub fn nms_rotated(boxes: &[Box7], scores: &[f64], iou_thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep
            .iter()
            .all(|&k| rotated_iou_unchecked(&boxes[k], &boxes[i]) <= iou_thr)
        {
            keep.push(i);
        }
    }
    keep
}

/// Scores anchors, keeps those at or above `score_thr`, decodes the best
/// `pre_nms_top_k` and applies rotated NMS.
pub fn decode_boxes(raw: &RawDetection, anchors: &AnchorSet, score_thr: f64, cfg: &PerceptionConfig) -> Detection {
    let n = anchors.len();
    debug_assert_eq!(raw.cls.len(), n);
    let mut cand: Vec<(usize, f64)> = raw
        .cls
        .data()
        .iter()
        .enumerate()
        .map(|(j, &x)| (j, 1.0 / (1.0 + (-x).exp())))
        .filter(|&(_, s)| s >= score_thr)
        .collect();
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cand.truncate(cfg.pre_nms_top_k);
    let boxes: Vec<Box7> = cand
        .iter()
        .map(|&(j, _)| decode_box(&anchors.boxes[j], &raw.reg.data()[j * BOX_PARAMS..(j + 1) * BOX_PARAMS]))
        .collect();
    let scores: Vec<f64> = cand.iter().map(|c| c.1).collect();
    let mut det = Detection::default();
    for i in nms_rotated(&boxes, &scores, cfg.nms_iou)
        .into_iter()
        .take(cfg.max_detections)
    {
        det.boxes.push(boxes[i]);
        det.scores.push(scores[i]);
    }
    det
}

/// Per-anchor training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// 1 positive, 0 negative, -1 ignored.
    pub cls: Vec<i8>,
    /// Residuals, `7` per anchor (zero for non-positives).
    pub reg: Vec<f64>,
    /// 1 on every residual of a positive anchor.
    pub reg_weight: Vec<f64>,
    pub positives: usize,
}

/// IoU-based anchor labelling. Each ground truth additionally claims its best
/// still-unclaimed anchor as a positive.
pub fn assign_targets(anchors: &AnchorSet, gt: &[Box7], pos_iou: f64, neg_iou: f64) -> Result<Targets> {
    if pos_iou <= neg_iou {
        return Err(contract("assign_targets needs pos_iou > neg_iou"));
    }
    if let Some(b) = gt.iter().find(|b| !(b.w > 0.0 && b.l > 0.0 && b.h > 0.0)) {
        return Err(contract(format!("degenerate ground-truth box {b:?}")));
    }
    let n = anchors.len();
    let mut best = vec![(0.0f64, usize::MAX); n];
    let mut per_gt: Vec<Vec<(usize, f64)>> = vec![Vec::new(); gt.len()];
    let g = &anchors.grid;
    let ar = anchors.boxes.first().map_or(0.0, |a| a.circumradius());
    for (gi, b) in gt.iter().enumerate() {
        let reach = b.circumradius() + ar;
        let c0 = ((b.cx - reach - g.x_min) / g.cell).floor().max(0.0) as usize;
        let c1 = (((b.cx + reach - g.x_min) / g.cell).ceil().max(0.0) as usize).min(g.w);
        let r0 = ((b.cy - reach - g.y_min) / g.cell).floor().max(0.0) as usize;
        let r1 = (((b.cy + reach - g.y_min) / g.cell).ceil().max(0.0) as usize).min(g.h);
        for r in r0..r1 {
            for c in c0..c1 {
                for a in 0..ANCHORS_PER_CELL {
                    let j = (r * g.w + c) * ANCHORS_PER_CELL + a;
                    let iou = rotated_iou_unchecked(&anchors.boxes[j], b);
                    if iou > 0.0 {
                        per_gt[gi].push((j, iou));
                        if iou > best[j].0 {
                            best[j] = (iou, gi);
                        }
                    }
                }
            }
        }
    }
    let mut cls = vec![0i8; n];
    let mut owner = vec![usize::MAX; n];
    for j in 0..n {
        let (iou, gi) = best[j];
        if iou >= pos_iou {
            cls[j] = 1;
            owner[j] = gi;
        } else if iou > neg_iou {
            cls[j] = -1;
        }
    }
    let mut claimed = vec![false; n];
    for (gi, cands) in per_gt.iter().enumerate() {
        let pick = cands
            .iter()
            .filter(|(j, _)| !claimed[*j])
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some(&(j, _)) = pick {
            claimed[j] = true;
            cls[j] = 1;
            owner[j] = gi;
        }
    }
    let mut reg = vec![0.0; n * BOX_PARAMS];
    let mut reg_weight = vec![0.0; n * BOX_PARAMS];
    let mut positives = 0;
    for j in 0..n {
        if cls[j] == 1 {
            positives += 1;
            let e = encode_box(&anchors.boxes[j], &gt[owner[j]]);
            reg[j * BOX_PARAMS..(j + 1) * BOX_PARAMS].copy_from_slice(&e);
            reg_weight[j * BOX_PARAMS..(j + 1) * BOX_PARAMS].fill(1.0);
        }
    }
    Ok(Targets {
        cls,
        reg,
        reg_weight,
        positives,
    })
}
