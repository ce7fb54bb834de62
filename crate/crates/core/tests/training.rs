//! Training-loop contracts on a tiny dataset: resume, determinism, checkpoints.

mod common;

use common::{smoke_config, smoke_data};
use semcom_core::training::{final_checkpoint, load_stage, read_log, stage_dir, train_stage, Checkpoint};
use semcom_core::Error;

fn params_equal(a: &semcom_core::nn::ParamSet, b: &semcom_core::nn::ParamSet) -> bool {
    a.len() == b.len() && a.iter().all(|(n, t)| t.to_le_bytes() == b.get(n).to_le_bytes())
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(8, 2);
    let data = smoke_data(dir.path(), &cfg).unwrap();

    let full = dir.path().join("full");
    let a = train_stage(&full, 0, &cfg, &data, false).unwrap();

    // Same run stopped after one epoch, then resumed with the full schedule.
    let part = dir.path().join("part");
    let mut short = cfg.clone();
    short.train.epochs[0] = 1;
    train_stage(&part, 0, &short, &data, false).unwrap();
    let b = train_stage(&part, 0, &cfg, &data, true).unwrap();
    assert_eq!(b.logs.len(), 1, "resume must only run the missing epoch");

    assert!(params_equal(&a.model.params, &b.model.params));
    assert_eq!(a.logs[1].loss, b.logs[0].loss);
    assert_eq!(a.logs[1].val_loss, b.logs[0].val_loss);

    // A fresh identical run reproduces the losses.
    let again = dir.path().join("again");
    let c = train_stage(&again, 0, &cfg, &data, false).unwrap();
    for (x, y) in a.logs.iter().zip(&c.logs) {
        assert!((x.loss - y.loss).abs() < 1e-12);
    }
    let log = read_log(&full).unwrap();
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(|l| l.loss.is_finite() && l.samples == data.train.len()));
}

#[test]
fn stage_two_reduces_validation_mse_and_checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(8, 1);
    cfg.train.epochs[2] = 3;
    let data = smoke_data(dir.path(), &cfg).unwrap();
    let run = dir.path().join("run");
    for s in 0..2 {
        train_stage(&run, s, &cfg, &data, false).unwrap();
    }
    let r = train_stage(&run, 2, &cfg, &data, false).unwrap();
    let first = r.initial_val_mse.unwrap();
    let last = r.logs.last().unwrap().val_mse.unwrap();
    assert!(last < first, "val mse {first} -> {last}");

    let loaded = load_stage(&run, 2).unwrap();
    assert!(params_equal(&loaded.params, &r.model.params));
    assert_eq!(loaded.gamma_thr, r.model.gamma_thr);
    assert!(stage_dir(&run, 2).join("epoch002.json").exists());

    // A different model configuration cannot continue from these checkpoints.
    let mut other = cfg.clone();
    other.codec.d_model = 8;
    assert!(matches!(train_stage(&run, 3, &other, &data, false), Err(Error::Config(_))));

    // Truncated checkpoints are reported, not panicked on.
    let path = final_checkpoint(&run, 2);
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    assert!(Checkpoint::load(&path).is_err());
    assert!(load_stage(&run, 2).is_err());
}
