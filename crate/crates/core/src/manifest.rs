//! Per-command run manifests: what ran, with which configuration, and which
//! files it produced.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{io_err, json_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// Commit of the working tree, when run inside a git checkout.
    pub code_hash: Option<String>,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub artifacts: Vec<PathBuf>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn git_head() -> Option<String> {
    let out = Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

impl RunManifest {
    pub fn start(command: &str, cfg: &ExperimentConfig) -> Self {
        let started = now();
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(cfg.to_toml().as_bytes());
        h.update(started.to_le_bytes());
        let run_id = format!("{command}-{}", &hex::encode(h.finalize())[..12]);
        Self {
            run_id,
            command: command.to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
            code_hash: git_head(),
            started_unix: started,
            finished_unix: None,
            artifacts: Vec::new(),
        }
    }

    pub fn add(&mut self, path: impl Into<PathBuf>) {
        let p = path.into();
        if !self.artifacts.contains(&p) {
            self.artifacts.push(p);
        }
    }

    /// Stamps the finish time and writes `<dir>/<run_id>.json`.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_unix = Some(now());
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(format!("{}.json", self.run_id));
        let text = serde_json::to_string_pretty(&self).map_err(json_err(&path))?;
        std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::start("gen-data", &ExperimentConfig::default());
        m.add("a/b.jsonl");
        m.add("a/b.jsonl");
        let id = m.run_id.clone();
        let path = m.finish(dir.path()).unwrap();
        let back: RunManifest = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(back.run_id, id);
        assert_eq!(back.artifacts.len(), 1);
        assert!(back.finished_unix.unwrap() >= back.started_unix);
    }
}
