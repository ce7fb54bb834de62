use std::path::Path;
use std::process::{Command, Output};

fn semcom(out: &Path, config: Option<&Path>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_semcom"));
    cmd.arg("--out").arg(out);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.args(args).env_remove("SEMCOM_SEED").env_remove("SEMCOM_OUT");
    cmd.output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        "seed = 3\n[data]\nn_scenes = 8\ntrain_frac = 0.5\nval_frac = 0.25\n\
         [codec]\nd_model = 16\nblocks = 1\nheads = 2\nff_mult = 2\n\
         [train]\nepochs = [1, 1, 1, 1]\nval_batch = 2\n\
         [eval]\nseeds = [0, 1]\nsnr_db = [0.0, 20.0]\nablation_cr = [0.01, 1.0]\n",
    )
    .unwrap();
    path
}

#[test]
fn full_pipeline_writes_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    let c = Some(cfg.as_path());

    let o = semcom(&out, c, &["gen-data"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for s in 0..4 {
        let o = semcom(&out, c, &["train", "--stage", &s.to_string()]);
        assert!(o.status.success(), "stage {s}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = semcom(&out, c, &["eval", "--ablation", "--channel", "rayleigh", "--scheme", "scomcp,classic16,ego_only"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = semcom(&out, c, &["plot"]);
    assert!(o.status.success());
    let o = semcom(&out, c, &["baseline-ber", "--snr", "0,20", "--bits", "4000"]);
    assert!(o.status.success());

    for f in [
        "data/dataset.json",
        "data/train.jsonl",
        "run/train_log.jsonl",
        "run/checkpoints/stage3/final.json",
        "results/metrics.jsonl",
        "results/metrics.csv",
        "results/ablation.jsonl",
        "results/detections.jsonl",
        "results/ber.jsonl",
        "plots/ap50_vs_snr_rayleigh.svg",
        "plots/ablation_cr.svg",
        "plots/plot_data.csv",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let manifests = std::fs::read_dir(out.join("manifests")).unwrap().count();
    assert_eq!(manifests, 1 + 4 + 1 + 1 + 1);

    // 3 schemes x 1 channel x 2 SNRs x 2 seeds.
    let rows: Vec<serde_json::Value> = std::fs::read_to_string(out.join("results/metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r["channel"] == "rayleigh"));
    let csv = std::fs::read_to_string(out.join("results/metrics.csv")).unwrap();
    assert!(csv.starts_with("scheme,channel,snr_db,cr,channel_uses,ap50,ap70,seed\n"));
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[grid]\ncells = 2\n").unwrap();
    assert_eq!(semcom(&out, Some(&bad), &["gen-data"]).status.code(), Some(2));

    let cfg = tiny_config(dir.path());
    assert!(semcom(&out, Some(&cfg), &["gen-data"]).status.success());
    let o = semcom(&out, Some(&cfg), &["train", "--stage", "2"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage 1"));

    let missing = dir.path().join("nowhere");
    assert_eq!(semcom(&missing, Some(&cfg), &["train", "--stage", "0"]).status.code(), Some(3));
    assert_eq!(semcom(&out, Some(&dir.path().join("absent.toml")), &["plot"]).status.code(), Some(3));
}

#[test]
fn plot_without_results_warns_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let o = semcom(&dir.path().join("out"), None, &["plot"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    assert!(!dir.path().join("out/plots").exists());
}

#[test]
fn seed_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_semcom"))
        .args(["--config", cfg.to_str().unwrap(), "gen-data"])
        .env("SEMCOM_SEED", "77")
        .env("SEMCOM_OUT", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("data/dataset.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 77);
}
