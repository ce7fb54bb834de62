//! Synthetic dataset generation and its on-disk form.
//!
//! A dataset directory holds `train.jsonl`, `val.jsonl` and `test.jsonl`, one
//! [`SceneRecord`] per line, plus `dataset.json` with the generating settings.
//! Record fields: `id`, `split`, `seed`, `scene` (`objects` as boxes with
//! `cx, cy, cz, w, l, h, yaw` in the world frame, `ego_pose`, `collab_pose`
//! as `x, y, yaw`, `extent_x`, `extent_y`, `seed`), `ego_points` and
//! `collab_points` (`frame` plus `points` as `[x, y, z]` in that agent's frame,
//! rounded to the millimetre).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, json_err, Error, Result};
use crate::scenes::{generate_scene, render_view, Frame, PointCloud, Scene, SceneConfig, SensorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_scenes: usize,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_scenes: 1000,
            train_frac: 0.7,
            val_frac: 0.1,
        }
    }
}

impl DataConfig {
    /// Split sizes: `floor(n * train_frac)`, `floor(n * val_frac)`, remainder to test.
    pub fn split_sizes(&self) -> Result<[usize; 3]> {
        let ok = (0.0..=1.0).contains(&self.train_frac)
            && (0.0..=1.0).contains(&self.val_frac)
            && self.train_frac + self.val_frac <= 1.0 + 1e-12;
        if !ok {
            return Err(Error::Config(format!(
                "split fractions {} + {} must lie in [0, 1]",
                self.train_frac, self.val_frac
            )));
        }
        let n = self.n_scenes;
        let tr = ((n as f64) * self.train_frac + 1e-9).floor() as usize;
        let va = (((n as f64) * self.val_frac + 1e-9).floor() as usize).min(n - tr);
        Ok([tr, va, n - tr - va])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: usize,
    pub split: Split,
    pub seed: u64,
    pub scene: Scene,
    pub ego_points: PointCloud,
    pub collab_points: PointCloud,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub n_scenes: usize,
    pub split_sizes: [usize; 3],
    pub scene: SceneConfig,
    pub sensor: SensorConfig,
}

/// Independent stream `stream` derived from `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r.next_u64()
}

fn round_mm(mut pc: PointCloud) -> PointCloud {
    for p in &mut pc.points {
        for v in p.iter_mut() {
            *v = (*v * 1000.0).round() / 1000.0;
        }
    }
    pc
}

pub fn make_record(id: usize, split: Split, seed: u64, scene_cfg: &SceneConfig, sensor: &SensorConfig) -> Result<SceneRecord> {
    let scene = generate_scene(scene_cfg, seed)?;
    let ego_points = round_mm(render_view(&scene, Frame::Ego, sensor, derive_seed(seed, 1)));
    let collab_points = round_mm(render_view(&scene, Frame::Collaborator, sensor, derive_seed(seed, 2)));
    Ok(SceneRecord {
        id,
        split,
        seed,
        scene,
        ego_points,
        collab_points,
    })
}

/// Generates every scene; records are ordered train, then val, then test.
pub fn generate_dataset(
    seed: u64,
    data: &DataConfig,
    scene_cfg: &SceneConfig,
    sensor: &SensorConfig,
) -> Result<Vec<SceneRecord>> {
    let sizes = data.split_sizes()?;
    let mut out = Vec::with_capacity(data.n_scenes);
    let mut id = 0;
    for (split, &n) in Split::ALL.iter().zip(&sizes) {
        for _ in 0..n {
            let s = derive_seed(seed, 1000 + id as u64);
            out.push(make_record(id, *split, s, scene_cfg, sensor)?);
            id += 1;
        }
    }
    Ok(out)
}

pub fn write_dataset(dir: &Path, meta: &DatasetMeta, records: &[SceneRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta_path = dir.join("dataset.json");
    let text = serde_json::to_string_pretty(meta).map_err(json_err(&meta_path))?;
    fs::write(&meta_path, text + "\n").map_err(io_err(&meta_path))?;
    for split in Split::ALL {
        let path = dir.join(format!("{}.jsonl", split.name()));
        let f = fs::File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(f);
        for r in records.iter().filter(|r| r.split == split) {
            serde_json::to_writer(&mut w, r).map_err(json_err(&path))?;
            w.write_all(b"\n").map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
    }
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("dataset.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(json_err(&path))
}

pub fn load_split(dir: &Path, split: Split) -> Result<Vec<SceneRecord>> {
    let path = dir.join(format!("{}.jsonl", split.name()));
    let f = fs::File::open(&path).map_err(io_err(&path))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(json_err(&path))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_follow_floor_rule() {
        let d = DataConfig {
            n_scenes: 10,
            train_frac: 0.75,
            val_frac: 0.15,
        };
        assert_eq!(d.split_sizes().unwrap(), [7, 1, 2]);
        let bad = DataConfig {
            train_frac: 0.8,
            val_frac: 0.5,
            ..d
        };
        assert!(bad.split_sizes().is_err());
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        assert_ne!(derive_seed(5, 1), derive_seed(5, 2));
        assert_eq!(derive_seed(5, 1), derive_seed(5, 1));
    }
}
