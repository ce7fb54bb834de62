//! Finite-difference checks for the trainable modules outside the acceptance
//! gradient suite, and the loss compositions.

mod common;

use semcom_autograd::gradcheck;

use common::*;
use semcom_core::config::LossWeights;
use semcom_core::extractor::{extract_var, init_extractor, ExtractorConfig, RAW_FEATURES};
use semcom_core::nn::ParamSet;
use semcom_core::perception::{assign_targets, detect_var, init_detector, AnchorSet};
use semcom_core::selector::{init_selector, selector_var, SelectorConfig};
use semcom_core::training::{loss_per, loss_trans};

#[test]
fn extractor_gradients() {
    let grid = small_grid(4);
    let cfg = ExtractorConfig::default();
    let mut r = rng(11);
    let mut p = ParamSet::new();
    init_extractor(&mut p, &grid, &cfg, &mut r);
    // Counts are non-negative.
    let x = random_tensor(&mut r, &[grid.cells(), RAW_FEATURES], 1.0).map(f64::abs);
    let w = random_tensor(&mut r, &[grid.cells(), grid.channels], 1.0);
    let rep = param_gradcheck(&p, |n| n.starts_with("ext."), 40, |b| {
        extract_var(b, b.tape().constant(x.clone()), &grid, &cfg)
            .mul(b.tape().constant(w.clone()))
            .sum()
    });
    assert!(worst(&rep) < 1e-4, "{rep:?}");
}

#[test]
fn full_selector_gradients() {
    let grid = small_grid(3);
    let cfg = SelectorConfig {
        spatial_kernel: 3,
        ..SelectorConfig::default()
    };
    let mut r = rng(12);
    let mut p = ParamSet::new();
    init_selector(&mut p, &grid, 2, &cfg, &mut r);
    *p.get_mut("sel.att.gamma") = semcom_autograd::Tensor::full(&[1], 0.5);
    *p.get_mut("sel.sa.w") = random_tensor(&mut r, &[18, 1], 0.5);
    let m = random_tensor(&mut r, &[grid.cells(), 3], 1.0);
    let w = random_tensor(&mut r, &[grid.cells(), 1], 1.0);
    let rep = param_gradcheck(&p, |n| n.starts_with("sel."), usize::MAX, |b| {
        let (_, probs) = selector_var(b, b.tape().constant(m.clone()), &grid, &cfg);
        probs.mul(b.tape().constant(w.clone())).sum()
    });
    assert!(worst(&rep) < 1e-4, "{rep:?}");
    let inp = gradcheck::check(&[m.clone()], 1e-6, |t, v| {
        let b = p.bind(t, |_| false);
        let (_, probs) = selector_var(&b, v[0], &grid, &cfg);
        probs.mul(t.constant(w.clone())).sum()
    });
    assert!(gradcheck::max_rel_err(&inp) < 1e-4, "{inp:?}");
}

fn detection_fixture() -> (ParamSet, AnchorSet, semcom_core::perception::Targets, semcom_autograd::Tensor) {
    let grid = small_grid(4);
    let mut r = rng(13);
    let mut p = ParamSet::new();
    init_detector(&mut p, 4, &mut r);
    // Non-trivial weights so the focal terms are not all at the prior.
    *p.get_mut("det.cls.w") = random_tensor(&mut r, &[4, 2], 1.0);
    *p.get_mut("det.reg.w") = random_tensor(&mut r, &[4, 14], 0.5);
    let anchors = AnchorSet::new(&grid, (1.8, 4.5, 1.6));
    let gt = vec![bx(0.6, -0.4, 4.3, 1.9, 0.1), bx(-2.4, 1.0, 4.6, 1.7, 1.5)];
    let t = assign_targets(&anchors, &gt, 0.6, 0.45).unwrap();
    assert!(t.positives >= 2);
    let fused = random_tensor(&mut r, &[grid.cells(), 4], 1.0);
    (p, anchors, t, fused)
}

#[test]
fn detector_and_perception_loss_gradients() {
    let (p, _, t, fused) = detection_fixture();
    let w = LossWeights::default();
    let rep = param_gradcheck(&p, |n| n.starts_with("det."), usize::MAX, |b| {
        let (cls, reg) = detect_var(b, b.tape().constant(fused.clone()));
        loss_per(cls, reg, &t, &w).0
    });
    assert!(worst(&rep) < 1e-4, "{rep:?}");
    let inp = gradcheck::check(&[fused.clone()], 1e-6, |tp, v| {
        let b = p.bind(tp, |_| false);
        let (cls, reg) = detect_var(&b, v[0]);
        loss_per(cls, reg, &t, &w).0
    });
    assert!(gradcheck::max_rel_err(&inp) < 1e-4, "{inp:?}");
}

#[test]
fn loss_compositions() {
    let (p, _, t, fused) = detection_fixture();
    let tape = semcom_autograd::Tape::new();
    let b = p.bind(&tape, |_| false);
    let (cls, reg) = detect_var(&b, tape.constant(fused.clone()));
    let w = LossWeights::default();
    let (total, l_cls, l_reg) = loss_per(cls, reg, &t, &w);
    let (l_cls, l_reg) = (l_cls.value().item(), l_reg.value().item());
    assert!((total.value().item() - (l_cls + w.eta * l_reg)).abs() < 1e-15);
    let no_reg = LossWeights { eta: 0.0, ..w.clone() };
    assert_eq!(loss_per(cls, reg, &t, &no_reg).0.value().item(), l_cls);

    let mut r = rng(14);
    let f = tape.constant(random_tensor(&mut r, &[5, 4], 1.0));
    let f_hat = tape.constant(random_tensor(&mut r, &[5, 4], 1.0));
    let (trans, mse) = loss_trans(cls, reg, &t, f_hat, f, &w);
    let diff = trans.value().item() - total.value().item();
    assert!((diff - w.gamma_mse * mse.value().item()).abs() < 1e-15);
    let (same, zero) = loss_trans(cls, reg, &t, f, f, &w);
    assert_eq!(zero.value().item(), 0.0);
    assert_eq!(same.value().item(), total.value().item());
}
