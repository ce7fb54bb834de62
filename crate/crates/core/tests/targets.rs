mod common;

use common::bx;
use semcom_core::config::ExperimentConfig;
use semcom_core::dataset::{derive_seed, generate_dataset, make_record, DataConfig, Split};
use semcom_core::geometry::rotated_iou;
use semcom_core::perception::{assign_targets, AnchorSet, ANCHORS_PER_CELL};
use semcom_core::pipeline::prepare;

#[test]
fn every_generated_object_gets_a_positive_anchor() {
    let cfg = ExperimentConfig::default();
    let grid = cfg.grid.spec().unwrap();
    let anchors = AnchorSet::new(&grid, cfg.scene.mean_size());
    let p = &cfg.perception;
    let mut objects = 0;
    for i in 0..150 {
        let rec = make_record(i, Split::Train, derive_seed(99, i as u64), &cfg.scene, &cfg.sensor).unwrap();
        let inputs = prepare(&rec, &grid).unwrap();
        let t = assign_targets(&anchors, &inputs.gt, p.pos_iou, p.neg_iou).unwrap();
        for g in &inputs.gt {
            let covered = t
                .cls
                .iter()
                .enumerate()
                .filter(|(_, &c)| c == 1)
                .any(|(j, _)| rotated_iou(&anchors.boxes[j], g).unwrap() > 0.0);
            assert!(covered, "scene {i}: object {g:?} has no positive anchor");
        }
        assert!(t.positives >= inputs.gt.len());
        objects += inputs.gt.len();
    }
    assert!(objects > 300, "only {objects} objects in range");
}

#[test]
fn assignment_edge_cases() {
    let grid = common::small_grid(2);
    let anchors = AnchorSet::new(&grid, (1.8, 4.5, 1.6));
    assert_eq!(anchors.len(), grid.cells() * ANCHORS_PER_CELL);

    let none = assign_targets(&anchors, &[], 0.6, 0.45).unwrap();
    assert!(none.cls.iter().all(|&c| c == 0));
    assert_eq!(none.positives, 0);

    let a = anchors.boxes[7];
    let t = assign_targets(&anchors, &[a], 0.6, 0.45).unwrap();
    assert_eq!(t.cls[7], 1);
    assert!(t.reg[7 * 7..8 * 7].iter().all(|&v| v.abs() < 1e-12));

    assert!(assign_targets(&anchors, &[a], 0.4, 0.45).is_err());
    assert!(assign_targets(&anchors, &[bx(0.0, 0.0, 0.0, 1.0, 0.0)], 0.6, 0.45).is_err());
}

#[test]
fn dataset_generation_is_deterministic() {
    let cfg = ExperimentConfig::default();
    let data = DataConfig {
        n_scenes: 6,
        ..DataConfig::default()
    };
    let a = generate_dataset(4, &data, &cfg.scene, &cfg.sensor).unwrap();
    let b = generate_dataset(4, &data, &cfg.scene, &cfg.sensor).unwrap();
    let c = generate_dataset(5, &data, &cfg.scene, &cfg.sensor).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let ids: Vec<usize> = a.iter().map(|r| r.id).collect();
    assert_eq!(ids, (0..6).collect::<Vec<_>>());
}
