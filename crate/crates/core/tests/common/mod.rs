//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semcom_autograd::{Tape, Tensor, Var};
use semcom_core::config::ExperimentConfig;
use semcom_core::extractor::{BevFeatureMap, GridSpec};
use semcom_core::geometry::Box7;
use semcom_core::nn::{Bound, ParamSet};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

pub fn random_map(rng: &mut impl Rng, grid: &GridSpec) -> BevFeatureMap {
    BevFeatureMap {
        values: random_tensor(rng, &[grid.cells(), grid.channels], 1.0),
        grid: grid.clone(),
    }
}

pub fn small_grid(channels: usize) -> GridSpec {
    GridSpec::new([-4.0, 4.0], [-2.0, 2.0], 1.0, channels).unwrap()
}

/// Worst relative error between tape gradients and central differences of the
/// scalar `f`, over the parameters accepted by `trainable`. At most
/// `per_tensor` evenly spaced entries of each tensor are probed. The error is
/// `|a - n| / (|a| + |n|)` in the 2-norm per tensor.
pub fn param_gradcheck<F>(params: &ParamSet, trainable: impl Fn(&str) -> bool + Copy, per_tensor: usize, f: F) -> Vec<(String, f64)>
where
    F: for<'p, 't> Fn(&Bound<'p, 't>) -> Var<'t>,
{
    let tape = Tape::new();
    let b = params.bind(&tape, trainable);
    let out = f(&b);
    let g = tape.backward(out);
    let analytic = b.grads(&g);
    assert!(!analytic.is_empty(), "no trainable parameter reached the output");
    let eval = |p: &ParamSet| {
        let tape = Tape::new();
        let b = p.bind(&tape, |_| false);
        f(&b).value().item()
    };
    let eps = 1e-6;
    let sums: Vec<(String, f64, f64, f64)> = analytic
        .iter()
        .map(|(name, grad)| {
            let n = grad.len();
            let step = (n / per_tensor.max(1)).max(1);
            let (mut diff, mut an, mut nu) = (0.0, 0.0, 0.0);
            for i in (0..n).step_by(step) {
                let mut p = params.clone();
                p.get_mut(name).data_mut()[i] += eps;
                let up = eval(&p);
                p.get_mut(name).data_mut()[i] -= 2.0 * eps;
                let down = eval(&p);
                let num = (up - down) / (2.0 * eps);
                let a = grad.data()[i];
                diff += (a - num).powi(2);
                an += a * a;
                nu += num * num;
            }
            (name.clone(), diff.sqrt(), an.sqrt(), nu.sqrt())
        })
        .collect();
    // Tensors whose gradient vanishes identically (key biases under softmax)
    // are measured against the largest gradient of the check instead.
    let scale = sums.iter().map(|s| s.2).fold(0.0, f64::max);
    sums.into_iter()
        .map(|(name, d, a, n)| (name, d / (a + n).max(1e-3 * scale).max(1e-300)))
        .collect()
}

pub fn worst(reports: &[(String, f64)]) -> f64 {
    reports.iter().map(|r| r.1).fold(0.0, f64::max)
}

pub fn bx(x: f64, y: f64, l: f64, w: f64, yaw: f64) -> Box7 {
    Box7 {
        cx: x,
        cy: y,
        cz: 0.75,
        w,
        l,
        h: 1.5,
        yaw,
    }
}

/// Small but complete configuration for training smoke runs.
pub fn smoke_config(n_scenes: usize, epochs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 5;
    cfg.data.n_scenes = n_scenes;
    cfg.data.train_frac = 0.6;
    cfg.data.val_frac = 0.2;
    cfg.train.epochs = [epochs; 4];
    cfg.train.val_batch = 2;
    cfg.codec.d_model = 16;
    cfg.codec.blocks = 1;
    cfg.codec.heads = 2;
    cfg.codec.ff_mult = 2;
    cfg
}

/// Generates and writes the dataset of `cfg` under `dir/data` and loads it for training.
pub fn smoke_data(dir: &std::path::Path, cfg: &ExperimentConfig) -> semcom_core::Result<semcom_core::training::TrainData> {
    use semcom_core::dataset::{generate_dataset, write_dataset, DatasetMeta};
    let records = generate_dataset(cfg.seed, &cfg.data, &cfg.scene, &cfg.sensor)?;
    let meta = DatasetMeta {
        seed: cfg.seed,
        n_scenes: records.len(),
        split_sizes: cfg.data.split_sizes()?,
        scene: cfg.scene.clone(),
        sensor: cfg.sensor.clone(),
    };
    let data_dir = dir.join("data");
    write_dataset(&data_dir, &meta, &records)?;
    semcom_core::training::TrainData::load(&data_dir, cfg)
}
