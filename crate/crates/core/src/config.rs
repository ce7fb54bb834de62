//! Experiment configuration: one TOML file with a flat section per module.
//!
//! ```toml
//! seed = 7
//! [data]      n_scenes, train_frac, val_frac
//! [scene]     world extent, object counts and sizes, occlusion and agent placement
//! [sensor]    max_range, angular_res_deg, noise_std, beam_heights
//! [grid]      x, y, cell, channels
//! [extractor] layers, kernel
//! [selector]  attn_dim, spatial_kernel, target_cr, gamma_thr
//! [codec]     d_model, blocks, heads, ff_mult, p_bound
//! [perception] nms_iou, score_thr, pre_nms_top_k, max_detections, pos_iou, neg_iou
//! [loss]      eta, gamma_mse, alpha, gamma_f
//! [train]     epochs, lr, decay (one entry per stage 0..3), batch, snr_db, channel, mix
//! [classic16] / [classic256]  modulation, code_rate, fec, cr
//! [eval]      schemes, channels, snr_db, seeds, equalize, parity_tolerance, ablation_cr
//! ```
//!
//! Every key is optional; missing keys take the documented defaults and
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::ChannelKind;
use crate::classic::ClassicConfig;
use crate::codec::CodecConfig;
use crate::dataset::DataConfig;
use crate::error::{io_err, Error, Result};
use crate::extractor::ExtractorConfig;
use crate::perception::PerceptionConfig;
use crate::pipeline::{GridConfig, ModelConfig, Scheme};
use crate::scenes::{SceneConfig, SensorConfig};
use crate::selector::SelectorConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Regression weight.
    pub eta: f64,
    /// Feature-reconstruction weight.
    pub gamma_mse: f64,
    /// Focal balance.
    pub alpha: f64,
    /// Focal exponent.
    pub gamma_f: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            eta: 2.0,
            gamma_mse: 1.0,
            alpha: 0.25,
            gamma_f: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.eta, self.gamma_mse, self.alpha, self.gamma_f]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite())
        {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be non-negative: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Epochs of stages 0, 1, 2, 3.
    pub epochs: [usize; 4],
    pub lr: [f64; 4],
    /// Per-epoch learning-rate factor.
    pub decay: [f64; 4],
    pub batch: usize,
    /// Per-sample training SNR is uniform over this interval.
    pub snr_db: [f64; 2],
    pub channel: ChannelKind,
    /// Stage-0 probabilities of sharing the full collaborator map, nothing,
    /// or a random sparse subset of cells.
    pub mix: [f64; 3],
    /// Fixed validation scenes used for per-epoch diagnostics.
    pub val_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            // Stage 2 only updates the codec on cached maps and is cheap, so it
            // gets many slowly decaying epochs. Stage 3 fine-tunes pretrained
            // networks and starts lower.
            epochs: [12, 2, 30, 2],
            lr: [1e-3, 1e-3, 1e-3, 1e-4],
            decay: [0.85, 0.6, 0.92, 0.6],
            batch: 4,
            snr_db: [0.0, 20.0],
            channel: ChannelKind::Rayleigh,
            mix: [0.4, 0.3, 0.3],
            val_batch: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch >= 1
            && self.lr.iter().all(|&v| v > 0.0)
            && self.decay.iter().all(|&v| v > 0.0 && v <= 1.0)
            && self.snr_db[0] <= self.snr_db[1]
            && self.mix.iter().all(|&p| p >= 0.0)
            && self.mix.iter().sum::<f64>() > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training settings: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub schemes: Vec<Scheme>,
    pub channels: Vec<ChannelKind>,
    pub snr_db: Vec<f64>,
    /// Evaluation seeds; each owns its channel draws.
    pub seeds: Vec<u64>,
    pub equalize: bool,
    /// Largest accepted relative gap in nominal channel uses across schemes.
    pub parity_tolerance: f64,
    /// Lossless ablation compression ratios.
    pub ablation_cr: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            schemes: Scheme::ALL.to_vec(),
            channels: vec![ChannelKind::Awgn, ChannelKind::Rayleigh],
            snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            seeds: (0..5).collect(),
            equalize: true,
            parity_tolerance: 5e-3,
            ablation_cr: vec![0.005, 0.01, 0.03, 0.1, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub scene: SceneConfig,
    pub sensor: SensorConfig,
    pub grid: GridConfig,
    pub extractor: ExtractorConfig,
    pub selector: SelectorConfig,
    pub codec: CodecConfig,
    pub perception: PerceptionConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub classic16: ClassicConfig,
    pub classic256: ClassicConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            scene: SceneConfig::default(),
            sensor: SensorConfig::default(),
            grid: GridConfig::default(),
            extractor: ExtractorConfig::default(),
            selector: SelectorConfig::default(),
            codec: CodecConfig::default(),
            perception: PerceptionConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            classic16: ClassicConfig::default(),
            classic256: ClassicConfig {
                modulation: 256,
                cr: 5e-3,
                ..ClassicConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.split_sizes()?;
        self.scene.validate()?;
        self.grid.spec()?;
        self.codec.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.classic16.validate()?;
        self.classic256.validate()?;
        if self.classic16.modulation != 16 || self.classic256.modulation != 256 {
            return Err(Error::Config(
                "classic16/classic256 sections must keep their modulation orders".into(),
            ));
        }
        if !(self.selector.target_cr > 0.0 && self.selector.target_cr <= 1.0) {
            return Err(Error::Config(format!("selector target_cr {} not in (0, 1]", self.selector.target_cr)));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            grid: self.grid.clone(),
            extractor: self.extractor.clone(),
            selector: self.selector.clone(),
            codec: self.codec.clone(),
            perception: self.perception.clone(),
        }
    }

    /// Classic settings of a classic scheme.
    pub fn classic(&self, scheme: Scheme) -> Option<&ClassicConfig> {
        match scheme {
            Scheme::Classic16 => Some(&self.classic16),
            Scheme::Classic256 => Some(&self.classic256),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = ExperimentConfig::default();
        c.seed = 11;
        c.grid.cell = 1.0;
        c.eval.schemes = vec![Scheme::Scomcp, Scheme::EgoOnly];
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn sections_are_flat_and_strict() {
        let c = ExperimentConfig::from_toml("seed = 3\n[grid]\ncell = 1.0\n[train]\nchannel = \"awgn\"\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.grid.cell, 1.0);
        assert_eq!(c.train.channel, ChannelKind::Awgn);
        assert!(ExperimentConfig::from_toml("[grid]\ncells = 1.0\n").is_err());
        assert!(ExperimentConfig::from_toml("[loss]\neta = -1.0\n").is_err());
        assert!(ExperimentConfig::from_toml("[classic16]\nmodulation = 256\n").is_err());
    }
}
