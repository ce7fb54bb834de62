//! Detection and transmission losses, the staged training procedure, and
//! checkpoint persistence.
//!
//! Run directory layout:
//!
//! ```text
//! <run>/checkpoints/stage<N>/epoch<E>.json   one per finished epoch
//! <run>/checkpoints/stage<N>/final.json      written when the stage completes
//! <run>/train_log.jsonl                      one EpochLog record per epoch
//! ```
//!
//! Stage 0 trains extractor, fusion and detector with the collaborator's
//! lossless map (fully, not at all, or on random cells). Stage 1 trains the
//! selector with lossless transmission, stage 2 the codec through a fading
//! channel, and stage 3 everything together through the channel on the
//! detection loss alone.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semcom_autograd::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::codec::{decode_var, encode_var, CodecConfig};
use crate::config::{ExperimentConfig, LossWeights};
use crate::dataset::{derive_seed, load_split, Split};
use crate::error::{io_err, json_err, Error, Result};
use crate::extractor::{extract_var, BevFeatureMap, GridSpec};
use crate::nn::{accumulate, in_group, Adam, Bound, ParamSet, StoredTensor};
use crate::perception::{assign_targets, detect_var, fuse_var, Targets};
use crate::pipeline::{
    prepare, realize, sample_channel, selection, semantic_equalizer, semantic_link, Model, SceneInputs,
};
use crate::selector::{calibrate_threshold, keep_probabilities, random_mask, select_features, selector_var, threshold_mask};

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const GROUPS: [&str; 6] = ["ext", "sel", "enc", "dec", "fus", "det"];

/// `(total, classification, regression)` of the detection loss.
pub fn loss_per<'t>(cls: Var<'t>, reg: Var<'t>, t: &Targets, w: &LossWeights) -> (Var<'t>, Var<'t>, Var<'t>) {
    let l_cls = cls.focal_loss(&t.cls, w.alpha, w.gamma_f);
    let l_reg = reg.smooth_l1(&t.reg, &t.reg_weight, t.positives as f64);
    (l_cls.add(l_reg.scale(w.eta)), l_cls, l_reg)
}

/// Detection loss plus the weighted feature-reconstruction error; also returns the MSE.
pub fn loss_trans<'t>(
    cls: Var<'t>,
    reg: Var<'t>,
    t: &Targets,
    f_hat: Var<'t>,
    f: Var<'t>,
    w: &LossWeights,
) -> (Var<'t>, Var<'t>) {
    let (per, _, _) = loss_per(cls, reg, t, w);
    let mse = f_hat.mse(f);
    (per.add(mse.scale(w.gamma_mse)), mse)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Perception,
    Transmission,
}

/// Which parameter groups a stage updates.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub stage: u8,
    pub trainable: Vec<&'static str>,
    pub frozen: Vec<&'static str>,
    pub loss: LossKind,
    pub epochs: usize,
    pub lr: f64,
    pub decay: f64,
}

impl StagePlan {
    pub fn new(stage: u8, cfg: &ExperimentConfig) -> Result<Self> {
        let (trainable, loss): (Vec<&'static str>, _) = match stage {
            0 => (vec!["ext", "fus", "det"], LossKind::Perception),
            1 => (vec!["sel"], LossKind::Perception),
            2 => (vec!["enc", "dec"], LossKind::Transmission),
            3 => (GROUPS.to_vec(), LossKind::Perception),
            s => return Err(Error::Config(format!("no training stage {s}; stages are 0..=3"))),
        };
        let frozen = GROUPS.iter().copied().filter(|g| !trainable.contains(g)).collect();
        let i = stage as usize;
        Ok(Self {
            stage,
            trainable,
            frozen,
            loss,
            epochs: cfg.train.epochs[i],
            lr: cfg.train.lr[i],
            decay: cfg.train.decay[i],
        })
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.iter().any(|g| in_group(name, g))
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi(epoch as i32)
    }
}

/// Per-epoch record of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub samples: usize,
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub mse: Option<f64>,
    pub mean_k: Option<f64>,
    pub gamma_thr: f64,
    pub val_loss: f64,
    pub val_mse: Option<f64>,
    pub frozen_hashes: BTreeMap<String, String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub stage: u8,
    /// Last finished epoch; `None` for a stage with zero epochs.
    pub epoch: Option<usize>,
    pub finished: bool,
    pub grid: GridSpec,
    pub codec: CodecConfig,
    pub model: crate::pipeline::ModelConfig,
    pub anchor_size: (f64, f64, f64),
    pub gamma_thr: f64,
    /// Validation MSE of the codec before the stage's first update.
    pub initial_val_mse: Option<f64>,
    pub params: BTreeMap<String, StoredTensor>,
    pub adam: Adam,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string(self).map_err(json_err(path))?;
        fs::write(&tmp, text).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let ck: Self = serde_json::from_str(&text).map_err(json_err(path))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint {
                path: path.into(),
                reason: format!("format {} is not {CHECKPOINT_FORMAT}", ck.format),
            });
        }
        Ok(ck)
    }

    pub fn into_model(self, path: &Path) -> Result<Model> {
        let params = ParamSet::from_stored(self.params).ok_or_else(|| Error::Checkpoint {
            path: path.into(),
            reason: "tensor data does not match its shape".into(),
        })?;
        let model = Model::from_parts(self.model, self.anchor_size, params, self.gamma_thr)?;
        if model.grid != self.grid {
            return Err(Error::Checkpoint {
                path: path.into(),
                reason: "grid header disagrees with the model configuration".into(),
            });
        }
        Ok(model)
    }

    fn of(model: &Model, stage: u8, epoch: Option<usize>, finished: bool, adam: &Adam, init_mse: Option<f64>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT,
            stage,
            epoch,
            finished,
            grid: model.grid,
            codec: model.cfg.codec.clone(),
            model: model.cfg.clone(),
            anchor_size: anchor_size(model),
            gamma_thr: model.gamma_thr,
            initial_val_mse: init_mse,
            params: model.params.to_stored(),
            adam: adam.clone(),
        }
    }
}

fn anchor_size(model: &Model) -> (f64, f64, f64) {
    model
        .anchors
        .boxes
        .first()
        .map_or((0.0, 0.0, 0.0), |a| (a.w, a.l, a.h))
}

pub fn stage_dir(run_dir: &Path, stage: u8) -> PathBuf {
    run_dir.join("checkpoints").join(format!("stage{stage}"))
}

pub fn final_checkpoint(run_dir: &Path, stage: u8) -> PathBuf {
    stage_dir(run_dir, stage).join("final.json")
}

fn epoch_checkpoint(run_dir: &Path, stage: u8, epoch: usize) -> PathBuf {
    stage_dir(run_dir, stage).join(format!("epoch{epoch:03}.json"))
}

pub fn log_path(run_dir: &Path) -> PathBuf {
    run_dir.join("train_log.jsonl")
}

/// Most recent per-epoch checkpoint of `stage`, if any.
fn latest_epoch(run_dir: &Path, stage: u8) -> Option<(usize, PathBuf)> {
    let dir = stage_dir(run_dir, stage);
    fs::read_dir(&dir)
        .ok()?
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            let n: usize = name.strip_prefix("epoch")?.strip_suffix(".json")?.parse().ok()?;
            Some((n, dir.join(name)))
        })
        .max_by_key(|(n, _)| *n)
}

pub fn read_log(run_dir: &Path) -> Result<Vec<EpochLog>> {
    let path = log_path(run_dir);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(json_err(&path)))
        .collect()
}

/// A training scene with its cached anchor targets.
#[derive(Debug, Clone)]
pub struct Sample {
    pub inputs: SceneInputs,
    pub targets: Targets,
}

#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl TrainData {
    pub fn load(dataset: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let model_cfg = cfg.model();
        let grid = model_cfg.grid.spec()?;
        let anchors = crate::perception::AnchorSet::new(&grid, cfg.scene.mean_size());
        let load = |split| -> Result<Vec<Sample>> {
            load_split(dataset, split)?
                .iter()
                .map(|r| {
                    let inputs = prepare(r, &grid)?;
                    let targets = assign_targets(&anchors, &inputs.gt, cfg.perception.pos_iou, cfg.perception.neg_iou)?;
                    Ok(Sample { inputs, targets })
                })
                .collect()
        };
        Ok(Self {
            train: load(Split::Train)?,
            val: load(Split::Val)?,
        })
    }
}

/// Outcome of one `train_stage` call.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: u8,
    pub model: Model,
    pub logs: Vec<EpochLog>,
    pub initial_val_mse: Option<f64>,
    pub checkpoint: PathBuf,
}

/// Starting point of a stage: the previous stage's final model, or a fresh one for stage 0.
pub fn stage_start(run_dir: &Path, stage: u8, cfg: &ExperimentConfig) -> Result<Model> {
    if stage == 0 {
        return Model::init(&cfg.model(), cfg.scene.mean_size(), derive_seed(cfg.seed, 7));
    }
    let prev = final_checkpoint(run_dir, stage - 1);
    if !prev.exists() {
        return Err(Error::StageOrder {
            stage,
            required: stage - 1,
            path: prev,
        });
    }
    let model = Checkpoint::load(&prev)?.into_model(&prev)?;
    if model.cfg != cfg.model() {
        return Err(Error::Config(format!(
            "{} was trained with a different model configuration",
            prev.display()
        )));
    }
    Ok(model)
}

/// Frozen-group hashes, keyed by group name.
pub fn group_hashes(params: &ParamSet, groups: &[&str]) -> BTreeMap<String, String> {
    groups.iter().map(|g| (g.to_string(), params.group_hash(g))).collect()
}

struct Cached {
    m_e: BevFeatureMap,
    m_j: BevFeatureMap,
    /// Selection of a frozen selector.
    mask: Option<Vec<bool>>,
}

fn cache_maps(model: &Model, samples: &[Sample], with_mask: bool) -> Result<Vec<Cached>> {
    samples
        .iter()
        .map(|s| {
            let (m_e, m_j) = model.maps(&s.inputs)?;
            let mask = with_mask.then(|| selection(model, &m_j).0);
            Ok(Cached { m_e, m_j, mask })
        })
        .collect()
}

fn calibrate(model: &mut Model, maps: &[Cached]) {
    let probs: Vec<Vec<f64>> = maps
        .iter()
        .map(|c| keep_probabilities(&c.m_j, &model.params, &model.cfg.selector).1)
        .collect();
    model.gamma_thr = calibrate_threshold(&probs, model.cfg.selector.target_k(&model.grid));
}

#[derive(Default)]
struct Running {
    n: usize,
    loss: f64,
    cls: f64,
    reg: f64,
    mse: f64,
    mse_n: usize,
    k: f64,
}

/// Sample-level random choices made before the tape is built.
struct Draw {
    mix: usize,
    sparse_mask: Vec<bool>,
    channel: ChannelConfig,
}

fn draw(rng: &mut ChaCha8Rng, cfg: &ExperimentConfig, cells: usize) -> Draw {
    let u: f64 = rng.random::<f64>() * cfg.train.mix.iter().sum::<f64>();
    let mix = if u < cfg.train.mix[0] {
        0
    } else if u < cfg.train.mix[0] + cfg.train.mix[1] {
        1
    } else {
        2
    };
    let frac = rng.random_range(cfg.selector.target_cr.min(0.2)..=0.2);
    let k = ((frac * cells as f64).round() as usize).clamp(1, cells);
    let sparse_mask = random_mask(cells, k, rng);
    let channel = sample_channel(rng, cfg.train.channel, cfg.train.snr_db);
    Draw {
        mix,
        sparse_mask,
        channel,
    }
}

fn mask_tensor(mask: &[bool]) -> Tensor {
    Tensor::new(&[mask.len()], mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
}

/// Outputs of one forward pass on the tape.
struct Forward<'t> {
    loss: Var<'t>,
    cls: f64,
    reg: f64,
    mse: Option<f64>,
    k: Option<usize>,
    /// Keep probabilities of a trainable selector.
    probs: Option<Vec<f64>>,
}

/// Learned link on the tape: encode, channel, decode. Returns `F_hat`.
fn link_var<'t>(b: &Bound<'_, 't>, f: Var<'t>, codec: &CodecConfig, ch: &ChannelConfig) -> Var<'t> {
    let r = realize(ch, f.value().len());
    let (coef, off) = r.affine(semantic_equalizer(ch.equalize));
    decode_var(b, encode_var(b, f, codec).complex_affine(&coef, &off), codec)
}

fn forward<'t>(
    b: &Bound<'_, 't>,
    stage: u8,
    model: &Model,
    sample: &Sample,
    cached: Option<&Cached>,
    d: &Draw,
    w: &LossWeights,
) -> Forward<'t> {
    let tape = b.tape();
    let g = &model.grid;
    let n = g.cells();
    let ext = &model.cfg.extractor;
    let (m_e, m_j) = match cached {
        Some(c) => (tape.constant(c.m_e.values.clone()), tape.constant(c.m_j.values.clone())),
        None => (
            extract_var(b, tape.constant(sample.inputs.ego.features.clone()), g, ext),
            extract_var(b, tape.constant(sample.inputs.collab.features.clone()), g, ext),
        ),
    };
    let detect_loss = |collab: Var<'t>| {
        let (fused, _) = fuse_var(b, m_e, collab);
        let (cls, reg) = detect_var(b, fused);
        (cls, reg)
    };
    match stage {
        0 => {
            let collab = match d.mix {
                0 => m_j,
                1 => tape.constant(Tensor::zeros(&[n, g.channels])),
                _ => m_j.mul_col(tape.constant(mask_tensor(&d.sparse_mask))),
            };
            let (cls, reg) = detect_loss(collab);
            let (loss, c, r) = loss_per(cls, reg, &sample.targets, w);
            Forward {
                loss,
                cls: c.value().item(),
                reg: r.value().item(),
                mse: None,
                k: None,
                probs: None,
            }
        }
        1 => {
            let (_, probs) = selector_var(b, m_j, g, &model.cfg.selector);
            let mask = threshold_mask(probs.value().data(), model.gamma_thr);
            let k = mask.iter().filter(|&&m| m).count();
            let ste = probs.straight_through(mask_tensor(&mask).reshaped(&[n, 1])).reshape(&[n]);
            let (cls, reg) = detect_loss(m_j.mul_col(ste));
            let (loss, c, r) = loss_per(cls, reg, &sample.targets, w);
            Forward {
                loss,
                cls: c.value().item(),
                reg: r.value().item(),
                mse: None,
                k: Some(k),
                probs: Some(probs.value().data().to_vec()),
            }
        }
        _ => {
            // Stages 2 and 3 share the transmission path; stage 2 reuses the
            // cached selection of its frozen selector.
            let (mask, probs) = match cached.and_then(|c| c.mask.clone()) {
                Some(m) => (m, None),
                None => {
                    let (_, p) = selector_var(b, m_j, g, &model.cfg.selector);
                    (threshold_mask(p.value().data(), model.gamma_thr), Some(p))
                }
            };
            let pos: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
            let k = pos.len();
            if k == 0 {
                let (cls, reg) = detect_loss(tape.constant(Tensor::zeros(&[n, g.channels])));
                let (loss, c, r) = loss_per(cls, reg, &sample.targets, w);
                return Forward {
                    loss,
                    cls: c.value().item(),
                    reg: r.value().item(),
                    mse: None,
                    k: Some(0),
                    probs: probs.map(|p| p.value().data().to_vec()),
                };
            }
            let f = match probs {
                Some(p) => {
                    let ste = p.straight_through(mask_tensor(&mask).reshaped(&[n, 1])).reshape(&[n]);
                    m_j.mul_col(ste).gather_rows(&pos)
                }
                None => m_j.gather_rows(&pos),
            };
            let f_hat = link_var(b, f, &model.cfg.codec, &d.channel);
            let (cls, reg) = detect_loss(f_hat.scatter_rows(&pos, n));
            let (per, c, r) = loss_per(cls, reg, &sample.targets, w);
            // Stage 3 optimises detection only; the MSE is still reported.
            let mse = f_hat.mse(f);
            Forward {
                loss: if stage == 2 { per.add(mse.scale(w.gamma_mse)) } else { per },
                cls: c.value().item(),
                reg: r.value().item(),
                mse: Some(mse.value().item()),
                k: Some(k),
                probs: probs.map(|p| p.value().data().to_vec()),
            }
        }
    }
}

/// Codec reconstruction MSE on a fixed batch of validation maps at seeded channel draws.
fn val_mse(model: &Model, maps: &[Cached], cfg: &ExperimentConfig) -> Option<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 9_001));
    let (mut sum, mut count) = (0.0, 0usize);
    for c in maps {
        let ch = sample_channel(&mut rng, cfg.train.channel, cfg.train.snr_db);
        let (mask, _) = selection(model, &c.m_j);
        let (f, _) = select_features(&c.m_j.values, &mask).ok()?;
        if f.is_empty() {
            continue;
        }
        let f_hat = semantic_link(&f, &model.params, &model.cfg.codec, &ch);
        sum += f.data().iter().zip(f_hat.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        count += f.len();
    }
    (count > 0).then(|| sum / count as f64)
}

/// Mean detection loss over validation scenes with the stage's transmission path.
fn val_loss(model: &Model, stage: u8, samples: &[Sample], maps: &[Cached], cfg: &ExperimentConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 9_002));
    let mut total = 0.0;
    for (s, c) in samples.iter().zip(maps) {
        let mut d = draw(&mut rng, cfg, model.grid.cells());
        d.mix = 0;
        let tape = Tape::new();
        let b = model.params.bind(&tape, |_| false);
        let f = forward(&b, stage, model, s, Some(c), &d, &cfg.loss);
        let mse_term = if stage == 2 { f.mse.unwrap_or(0.0) * cfg.loss.gamma_mse } else { 0.0 };
        total += f.loss.value().item() - mse_term;
    }
    total / samples.len().max(1) as f64
}

/// Runs (or resumes) one training stage and writes its checkpoints and log records.
pub fn train_stage(run_dir: &Path, stage: u8, cfg: &ExperimentConfig, data: &TrainData, resume: bool) -> Result<StageReport> {
    cfg.validate()?;
    let plan = StagePlan::new(stage, cfg)?;
    let mut model = stage_start(run_dir, stage, cfg)?;
    let mut adam = Adam::default();
    let mut start = 0;
    let mut initial_val_mse = None;
    let mut fresh = true;
    if resume {
        if let Some((e, path)) = latest_epoch(run_dir, stage) {
            let ck = Checkpoint::load(&path)?;
            adam = ck.adam.clone();
            initial_val_mse = ck.initial_val_mse;
            model = ck.into_model(&path)?;
            start = e + 1;
            fresh = false;
        }
    } else if stage_dir(run_dir, stage).exists() {
        fs::remove_dir_all(stage_dir(run_dir, stage)).map_err(io_err(stage_dir(run_dir, stage)))?;
    }
    if stage == 1 && fresh {
        // The importance generator starts as a copy of the detector's classification branch.
        for s in ["w", "b"] {
            let t = model.params.get(&format!("det.cls.{s}")).clone();
            *model.params.get_mut(&format!("sel.gen.{s}")) = t;
        }
    }
    let frozen_before = group_hashes(&model.params, &plan.frozen);
    let val: Vec<Sample> = data.val.iter().take(cfg.train.val_batch).cloned().collect();
    let ext_frozen = !plan.is_trainable("ext.");
    let train_maps = if ext_frozen {
        Some(cache_maps(&model, &data.train, stage == 2)?)
    } else {
        None
    };
    let mut val_maps = cache_maps(&model, &val, false)?;
    let calib_maps = if stage == 1 || stage == 3 {
        cache_maps(&model, &data.val, false)?
    } else {
        Vec::new()
    };
    if stage >= 2 && fresh {
        initial_val_mse = val_mse(&model, &val_maps, cfg);
    }
    let mut logs = Vec::new();
    let mut last = None;
    for epoch in start..plan.epochs {
        let t0 = Instant::now();
        if stage == 1 {
            calibrate(&mut model, &calib_maps);
        }
        let lr = plan.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 100 * stage as u64 + epoch as u64));
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut run = Running::default();
        for batch in order.chunks(cfg.train.batch) {
            let mut acc = BTreeMap::new();
            let mut batch_probs = Vec::new();
            for &i in batch {
                let d = draw(&mut rng, cfg, model.grid.cells());
                let tape = Tape::new();
                let b = model.params.bind(&tape, |n| plan.is_trainable(n));
                let f = forward(&b, stage, &model, &data.train[i], train_maps.as_ref().map(|m| &m[i]), &d, &cfg.loss);
                run.n += 1;
                run.loss += f.loss.value().item();
                run.cls += f.cls;
                run.reg += f.reg;
                if let Some(m) = f.mse {
                    run.mse += m;
                    run.mse_n += 1;
                }
                run.k += f.k.unwrap_or(0) as f64;
                batch_probs.extend(f.probs);
                let grads = tape.backward(f.loss);
                accumulate(&mut acc, b.grads(&grads));
            }
            for g in acc.values_mut() {
                g.scale_assign(1.0 / batch.len() as f64);
            }
            adam.update(&mut model.params, &acc, lr);
            // A trainable selector drifts within an epoch; keep the threshold
            // on budget by re-fitting it to the batch just seen.
            if !batch_probs.is_empty() {
                model.gamma_thr = calibrate_threshold(&batch_probs, model.cfg.selector.target_k(&model.grid));
            }
        }
        if !ext_frozen {
            val_maps = cache_maps(&model, &val, false)?;
        }
        let n = run.n.max(1) as f64;
        let log = EpochLog {
            stage,
            epoch,
            lr,
            samples: run.n,
            loss: run.loss / n,
            cls: run.cls / n,
            reg: run.reg / n,
            mse: (run.mse_n > 0).then(|| run.mse / run.mse_n as f64),
            mean_k: (stage >= 1).then(|| run.k / n),
            gamma_thr: model.gamma_thr,
            val_loss: val_loss(&model, stage, &val, &val_maps, cfg),
            val_mse: if stage >= 2 { val_mse(&model, &val_maps, cfg) } else { None },
            frozen_hashes: group_hashes(&model.params, &plan.frozen),
            seconds: t0.elapsed().as_secs_f64(),
        };
        append_log(run_dir, &log)?;
        Checkpoint::of(&model, stage, Some(epoch), false, &adam, initial_val_mse)
            .save(&epoch_checkpoint(run_dir, stage, epoch))?;
        last = Some(epoch);
        logs.push(log);
    }
    if last.is_none() && start > 0 {
        last = Some(start - 1);
    }
    if stage == 1 || stage == 3 {
        let maps = if stage == 3 { cache_maps(&model, &data.val, false)? } else { calib_maps };
        calibrate(&mut model, &maps);
    }
    if group_hashes(&model.params, &plan.frozen) != frozen_before {
        return Err(Error::Checkpoint {
            path: stage_dir(run_dir, stage),
            reason: "a frozen parameter group changed during training".into(),
        });
    }
    let path = final_checkpoint(run_dir, stage);
    Checkpoint::of(&model, stage, last, true, &adam, initial_val_mse).save(&path)?;
    Ok(StageReport {
        stage,
        model,
        logs,
        initial_val_mse,
        checkpoint: path,
    })
}

fn append_log(run_dir: &Path, log: &EpochLog) -> Result<()> {
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let path = log_path(run_dir);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io_err(&path))?;
    let line = serde_json::to_string(log).map_err(json_err(&path))?;
    writeln!(f, "{line}").map_err(io_err(&path))
}

/// Loads the finished model of `stage`.
pub fn load_stage(run_dir: &Path, stage: u8) -> Result<Model> {
    let path = final_checkpoint(run_dir, stage);
    if !path.exists() {
        return Err(Error::StageOrder {
            stage: stage + 1,
            required: stage,
            path,
        });
    }
    Checkpoint::load(&path)?.into_model(&path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_targets() -> Targets {
        Targets {
            cls: vec![1],
            reg: vec![0.0; 7],
            reg_weight: vec![1.0; 7],
            positives: 1,
        }
    }

    #[test]
    fn focal_single_positive_at_half() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1], vec![0.0]));
        let l = x.focal_loss(&[1], 0.25, 2.0).value().item();
        assert!((l - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(x.focal_loss(&[-1], 0.25, 2.0).value().item(), 0.0);
    }

    #[test]
    fn smooth_l1_examples() {
        let tape = Tape::new();
        let mut r = vec![0.0; 7];
        r[2] = 0.5;
        let x = tape.constant(Tensor::new(&[7], r.clone()));
        let t = toy_targets();
        assert!((x.smooth_l1(&t.reg, &t.reg_weight, 1.0).value().item() - 0.125).abs() < 1e-15);
        r[2] = 2.0;
        let x = tape.constant(Tensor::new(&[7], r));
        assert!((x.smooth_l1(&t.reg, &t.reg_weight, 1.0).value().item() - 1.5).abs() < 1e-15);
        assert_eq!(x.smooth_l1(&t.reg, &t.reg_weight, 0.0).value().item(), 0.0);
    }

    #[test]
    fn eta_zero_gives_classification_only() {
        let tape = Tape::new();
        let cls = tape.constant(Tensor::new(&[1], vec![0.3]));
        let reg = tape.constant(Tensor::new(&[7], vec![1.5; 7]));
        let w = LossWeights {
            eta: 0.0,
            ..LossWeights::default()
        };
        let (total, c, _) = loss_per(cls, reg, &toy_targets(), &w);
        assert_eq!(total.value().item(), c.value().item());
    }

    #[test]
    fn transmission_loss_adds_weighted_mse() {
        let tape = Tape::new();
        let cls = tape.constant(Tensor::new(&[1], vec![0.3]));
        let reg = tape.constant(Tensor::new(&[7], vec![0.2; 7]));
        let f = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let w = LossWeights::default();
        let (per, _, _) = loss_per(cls, reg, &toy_targets(), &w);
        let (same, _) = loss_trans(cls, reg, &toy_targets(), f, f, &w);
        assert_eq!(same.value().item(), per.value().item());
        let g = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0 + 1.2f64.sqrt()]));
        let (t, mse) = loss_trans(cls, reg, &toy_targets(), g, f, &w);
        assert!((t.value().item() - per.value().item() - mse.value().item()).abs() < 1e-12);
        assert!((mse.value().item() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn stage_plans_partition_groups() {
        let cfg = ExperimentConfig::default();
        assert_eq!(StagePlan::new(1, &cfg).unwrap().trainable, vec!["sel"]);
        assert_eq!(StagePlan::new(2, &cfg).unwrap().trainable, vec!["enc", "dec"]);
        assert!(StagePlan::new(3, &cfg).unwrap().frozen.is_empty());
        assert!(StagePlan::new(4, &cfg).is_err());
        let p = StagePlan::new(0, &cfg).unwrap();
        assert!(p.is_trainable("ext.conv0.w") && !p.is_trainable("enc.embed.w"));
        assert!((StagePlan::new(1, &cfg).unwrap().lr_at(2) - 1e-3 * 0.36).abs() < 1e-15);
        assert_eq!(StagePlan::new(2, &cfg).unwrap().loss, LossKind::Transmission);
        assert_eq!(StagePlan::new(3, &cfg).unwrap().loss, LossKind::Perception);
    }

    #[test]
    fn missing_prerequisite_is_a_stage_order_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = stage_start(dir.path(), 2, &ExperimentConfig::default()).unwrap_err();
        assert!(matches!(err, Error::StageOrder { stage: 2, required: 1, .. }));
        assert!(err.to_string().contains("--stage 1"));
    }
}
