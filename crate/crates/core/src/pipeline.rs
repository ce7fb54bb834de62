//! The full two-agent model and the inference paths of every transmission scheme.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semcom_autograd::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::channel::{snr_to_sigma2, ChannelConfig, ChannelKind, Equalizer, Realization};
use crate::classic::{transmit_classic, ClassicConfig};
use crate::codec::{decode_var, encode_var, init_codec, CodecConfig};
use crate::dataset::SceneRecord;
use crate::error::Result;
use crate::extractor::{extract, init_extractor, rasterize, BevFeatureMap, ExtractorConfig, GridSpec, PillarGrid};
use crate::geometry::Box7;
use crate::nn::ParamSet;
use crate::perception::{
    decode_boxes, detect, fuse, init_detector, init_fusion, AnchorSet, Detection, PerceptionConfig,
    ANCHORS_PER_CELL,
};
use crate::scenes::{ground_truth_boxes, project_points, Frame};
use crate::selector::{
    init_selector, keep_probabilities, scatter_features, select_features, threshold_mask, top_k_mask,
    SelectorConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub cell: f64,
    pub channels: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            x: [-32.0, 32.0],
            y: [-16.0, 16.0],
            cell: 1.0,
            channels: 32,
        }
    }
}

impl GridConfig {
    pub fn spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.x, self.y, self.cell, self.channels)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub grid: GridConfig,
    pub extractor: ExtractorConfig,
    pub selector: SelectorConfig,
    pub codec: CodecConfig,
    pub perception: PerceptionConfig,
}

/// Parameters plus everything derived from the configuration.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub grid: GridSpec,
    pub anchors: AnchorSet,
    pub params: ParamSet,
    /// Calibrated selection threshold.
    pub gamma_thr: f64,
}

impl Model {
    /// Freshly initialised model; `anchor_size` is the `(w, l, h)` prior.
    pub fn init(cfg: &ModelConfig, anchor_size: (f64, f64, f64), seed: u64) -> Result<Self> {
        let grid = cfg.grid.spec()?;
        cfg.codec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_extractor(&mut params, &grid, &cfg.extractor, &mut rng);
        init_selector(&mut params, &grid, ANCHORS_PER_CELL, &cfg.selector, &mut rng);
        init_codec(&mut params, grid.channels, &cfg.codec, &mut rng);
        init_fusion(&mut params, grid.channels, &mut rng);
        init_detector(&mut params, grid.channels, &mut rng);
        Self::from_parts(cfg.clone(), anchor_size, params, cfg.selector.gamma_thr)
    }

    pub fn from_parts(cfg: ModelConfig, anchor_size: (f64, f64, f64), params: ParamSet, gamma_thr: f64) -> Result<Self> {
        let grid = cfg.grid.spec()?;
        Ok(Self {
            anchors: AnchorSet::new(&grid, anchor_size),
            grid,
            cfg,
            params,
            gamma_thr,
        })
    }

    pub fn maps(&self, inputs: &SceneInputs) -> Result<(BevFeatureMap, BevFeatureMap)> {
        Ok((
            extract(&inputs.ego, &self.params, &self.cfg.extractor)?,
            extract(&inputs.collab, &self.params, &self.cfg.extractor)?,
        ))
    }
}

/// Rasterised views of one scene plus its ground truth, all in the ego frame.
#[derive(Debug, Clone)]
pub struct SceneInputs {
    pub id: usize,
    pub ego: PillarGrid,
    pub collab: PillarGrid,
    pub gt: Vec<Box7>,
}

pub fn prepare(rec: &SceneRecord, grid: &GridSpec) -> Result<SceneInputs> {
    let scene = &rec.scene;
    let collab = project_points(&rec.collab_points, &scene.agent(Frame::Collaborator), &scene.agent(Frame::Ego))?;
    Ok(SceneInputs {
        id: rec.id,
        ego: rasterize(&rec.ego_points, grid)?,
        collab: rasterize(&collab, grid)?,
        gt: ground_truth_boxes(scene, &grid.eval_range()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Scomcp,
    Classic16,
    Classic256,
    UpperBound,
    EgoOnly,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Scomcp,
        Scheme::Classic16,
        Scheme::Classic256,
        Scheme::UpperBound,
        Scheme::EgoOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Scomcp => "scomcp",
            Scheme::Classic16 => "classic16",
            Scheme::Classic256 => "classic256",
            Scheme::UpperBound => "upper_bound",
            Scheme::EgoOnly => "ego_only",
        }
    }

    pub fn modulation(self) -> Option<u32> {
        match self {
            Scheme::Classic16 => Some(16),
            Scheme::Classic256 => Some(256),
            _ => None,
        }
    }

    /// Whether the outcome depends on the channel realisation.
    pub fn uses_channel(self) -> bool {
        !matches!(self, Scheme::UpperBound | Scheme::EgoOnly)
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown scheme {s:?}"))
    }
}

/// Receiver equaliser used on the learned path: MMSE on both channels, since
/// plain zero-forcing turns deep fades into unbounded feature errors. On AWGN
/// (`h = 1`) it is the Wiener shrink `1 / (1 + sigma^2)`, which keeps the
/// decoder input statistics the same as on the fading channel it was trained on.
pub fn semantic_equalizer(equalize: bool) -> Option<Equalizer> {
    equalize.then_some(Equalizer::Mmse)
}

/// Draws the channel for `n` complex symbols of unit mean power.
pub fn realize(ch: &ChannelConfig, n: usize) -> Realization {
    let mut rng = ChaCha8Rng::seed_from_u64(ch.seed);
    Realization::sample(ch.kind, n, snr_to_sigma2(ch.snr_db, 1.0), &mut rng)
}

/// Encode, transmit and decode selected features `f` (`[K, C]`).
pub fn semantic_link(f: &Tensor, params: &ParamSet, codec: &CodecConfig, ch: &ChannelConfig) -> Tensor {
    if f.is_empty() {
        return f.clone();
    }
    let tape = Tape::new();
    let b = params.bind(&tape, |_| false);
    let z = encode_var(&b, tape.constant(f.clone()), codec);
    let r = realize(ch, f.len());
    let (coef, off) = r.affine(semantic_equalizer(ch.equalize));
    let out = decode_var(&b, z.complex_affine(&coef, &off), codec);
    let v = (*out.value()).clone();
    v
}

/// What the collaborator sent for one scene.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkStats {
    pub cells: usize,
    pub cr: f64,
    /// Nominal complex channel uses.
    pub channel_uses: f64,
}

/// Collaborator features at the ego receiver (`[N, C]`, zero where nothing arrived).
pub fn received_map(
    model: &Model,
    scheme: Scheme,
    m_j: &BevFeatureMap,
    mask: &[bool],
    ch: &ChannelConfig,
    classic: &ClassicConfig,
) -> Result<(Tensor, LinkStats)> {
    let g = &model.grid;
    let (n, c) = (g.cells(), g.channels);
    match scheme {
        Scheme::EgoOnly => Ok((Tensor::zeros(&[n, c]), LinkStats::default())),
        Scheme::UpperBound => Ok((
            m_j.values.clone(),
            LinkStats {
                cells: n,
                cr: 1.0,
                channel_uses: 0.0,
            },
        )),
        Scheme::Scomcp => {
            let (f, pos) = select_features(&m_j.values, mask)?;
            let f_hat = semantic_link(&f, &model.params, &model.cfg.codec, ch);
            let stats = LinkStats {
                cells: pos.len(),
                cr: pos.len() as f64 / n as f64,
                channel_uses: f.len() as f64,
            };
            Ok((scatter_features(&f_hat, &pos, n, c)?, stats))
        }
        Scheme::Classic16 | Scheme::Classic256 => {
            let cfg = ClassicConfig {
                modulation: scheme.modulation().unwrap_or(classic.modulation),
                ..classic.clone()
            };
            let (f, pos) = select_features(&m_j.values, mask)?;
            let (f_hat, _) = transmit_classic(&f, &cfg, ch)?;
            let stats = LinkStats {
                cells: pos.len(),
                cr: pos.len() as f64 / n as f64,
                channel_uses: crate::classic::channel_uses(
                    (n * c) as f64,
                    pos.len() as f64 / n as f64,
                    cfg.code_rate,
                    cfg.modulation,
                ),
            };
            Ok((scatter_features(&f_hat, &pos, n, c)?, stats))
        }
    }
}

/// Cells a classic scheme sends when the learned scheme sent `k_semantic`:
/// the configured compression ratios scale the per-scene budget.
pub fn classic_cells(k_semantic: usize, classic_cr: f64, semantic_cr: f64) -> usize {
    (k_semantic as f64 * classic_cr / semantic_cr).round() as usize
}

/// Fuses, detects and decodes; `score_thr` 0 keeps the full ranked list.
pub fn perceive(model: &Model, m_e: &BevFeatureMap, collab: &Tensor, score_thr: f64) -> Result<Detection> {
    let (fused, _) = fuse(m_e, collab, &model.params)?;
    let raw = detect(&fused, &model.params);
    Ok(decode_boxes(&raw, &model.anchors, score_thr, &model.cfg.perception))
}

/// Learned selection mask with the calibrated threshold, plus keep probabilities.
pub fn selection(model: &Model, m_j: &BevFeatureMap) -> (Vec<bool>, Vec<f64>) {
    let (_, probs) = keep_probabilities(m_j, &model.params, &model.cfg.selector);
    (threshold_mask(&probs, model.gamma_thr), probs)
}

/// Whole pipeline for one scene under one scheme.
pub fn run_scene(
    model: &Model,
    inputs: &SceneInputs,
    scheme: Scheme,
    ch: &ChannelConfig,
    classic: &ClassicConfig,
) -> Result<(Detection, LinkStats)> {
    let (m_e, m_j) = model.maps(inputs)?;
    let (mask, probs) = selection(model, &m_j);
    let mask = if scheme.modulation().is_some() {
        let k = mask.iter().filter(|&&b| b).count();
        top_k_mask(&probs, classic_cells(k, classic.cr, model.cfg.selector.target_cr))
    } else {
        mask
    };
    let (collab, stats) = received_map(model, scheme, &m_j, &mask, ch, classic)?;
    Ok((perceive(model, &m_e, &collab, 0.0)?, stats))
}

/// One training-time channel: SNR uniform over `snr_range`, seed from `rng`.
pub fn sample_channel(rng: &mut impl Rng, kind: ChannelKind, snr_range: [f64; 2]) -> ChannelConfig {
    let snr_db = if snr_range[1] > snr_range[0] {
        rng.random_range(snr_range[0]..snr_range[1])
    } else {
        snr_range[0]
    };
    ChannelConfig {
        kind,
        snr_db,
        equalize: true,
        seed: rng.random(),
    }
}
