//! Pillar-style BEV feature extraction shared by both agents.

use rand::Rng;
use semcom_autograd::{concat_cols, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::nn::{kaiming, Bound, ParamSet};
use crate::scenes::{EvalRange, Frame, PointCloud};

/// Raw per-cell features: count, mean dx, mean dy, mean z, occupancy.
pub const RAW_FEATURES: usize = 5;

/// Regular BEV grid in the ego frame. Cells are half-open `[lo, lo + cell)`;
/// when an extent is not a multiple of the cell size the grid is rounded up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub y_min: f64,
    pub cell: f64,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
}

impl GridSpec {
    pub fn new(x: [f64; 2], y: [f64; 2], cell: f64, channels: usize) -> Result<Self> {
        if !(cell > 0.0 && x[1] > x[0] && y[1] > y[0] && channels >= 1) {
            return Err(Error::Config(format!(
                "invalid grid: x {x:?}, y {y:?}, cell {cell}, channels {channels}"
            )));
        }
        let w = ((x[1] - x[0]) / cell - 1e-9).ceil() as usize;
        let h = ((y[1] - y[0]) / cell - 1e-9).ceil() as usize;
        Ok(Self {
            x_min: x[0],
            y_min: y[0],
            cell,
            h,
            w,
            channels,
        })
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn x_max(&self) -> f64 {
        self.x_min + self.w as f64 * self.cell
    }

    pub fn y_max(&self) -> f64 {
        self.y_min + self.h as f64 * self.cell
    }

    /// Row-major cell index (`row` along y, `col` along x).
    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        let c = ((x - self.x_min) / self.cell).floor();
        let r = ((y - self.y_min) / self.cell).floor();
        if c < 0.0 || r < 0.0 || c >= self.w as f64 || r >= self.h as f64 {
            return None;
        }
        Some(r as usize * self.w + c as usize)
    }

    pub fn cell_center(&self, idx: usize) -> [f64; 2] {
        let (r, c) = (idx / self.w, idx % self.w);
        [
            self.x_min + (c as f64 + 0.5) * self.cell,
            self.y_min + (r as f64 + 0.5) * self.cell,
        ]
    }

    pub fn eval_range(&self) -> EvalRange {
        EvalRange {
            x: [self.x_min, self.x_max()],
            y: [self.y_min, self.y_max()],
        }
    }
}

/// Raw per-cell features, `[H*W, RAW_FEATURES]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarGrid {
    pub grid: GridSpec,
    pub features: Tensor,
}

/// Channel-last BEV feature map, `[H*W, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureMap {
    pub grid: GridSpec,
    pub values: Tensor,
}

pub fn rasterize(pc: &PointCloud, grid: &GridSpec) -> Result<PillarGrid> {
    if pc.frame != Frame::Ego {
        return Err(contract("rasterize expects a cloud in the ego frame"));
    }
    let n = grid.cells();
    let mut f = vec![0.0; n * RAW_FEATURES];
    for &[x, y, z] in &pc.points {
        let Some(i) = grid.cell_of(x, y) else { continue };
        let [cx, cy] = grid.cell_center(i);
        let row = &mut f[i * RAW_FEATURES..(i + 1) * RAW_FEATURES];
        row[0] += 1.0;
        row[1] += (x - cx) / grid.cell;
        row[2] += (y - cy) / grid.cell;
        row[3] += z;
    }
    for row in f.chunks_mut(RAW_FEATURES) {
        let n = row[0];
        if n > 0.0 {
            for v in &mut row[1..4] {
                *v /= n;
            }
            row[4] = 1.0;
        }
    }
    Ok(PillarGrid {
        grid: *grid,
        features: Tensor::new(&[n, RAW_FEATURES], f),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub layers: usize,
    pub kernel: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { layers: 3, kernel: 3 }
    }
}

/// Kaiming-normal weights, zero biases.
pub fn init_extractor(params: &mut ParamSet, grid: &GridSpec, cfg: &ExtractorConfig, rng: &mut impl Rng) {
    let k2 = cfg.kernel * cfg.kernel;
    let mut cin = RAW_FEATURES;
    for i in 0..cfg.layers {
        params.insert(format!("ext.conv{i}.w"), kaiming(rng, k2 * cin, grid.channels));
        params.insert(format!("ext.conv{i}.b"), Tensor::zeros(&[grid.channels]));
        cin = grid.channels;
    }
}

/// Differentiable extraction. The count channel enters as `ln(1 + count)`;
/// every block is a same-padded conv followed by SiLU.
pub fn extract_var<'t>(b: &Bound<'_, 't>, x: Var<'t>, grid: &GridSpec, cfg: &ExtractorConfig) -> Var<'t> {
    let count = x.slice_cols(0, 1).add_const(1.0).ln();
    let mut h = concat_cols(&[count, x.slice_cols(1, RAW_FEATURES - 1)]);
    for i in 0..cfg.layers {
        h = h
            .conv2d(b.get(&format!("ext.conv{i}.w")), grid.h, grid.w, cfg.kernel)
            .add_row(b.get(&format!("ext.conv{i}.b")))
            .silu();
    }
    h
}

pub fn extract(pillars: &PillarGrid, params: &ParamSet, cfg: &ExtractorConfig) -> Result<BevFeatureMap> {
    let g = pillars.grid;
    if pillars.features.shape() != [g.cells(), RAW_FEATURES] {
        return Err(contract(format!(
            "pillar features {:?} do not match a {}x{} grid",
            pillars.features.shape(),
            g.h,
            g.w
        )));
    }
    let w0 = params.get("ext.conv0.w");
    if w0.shape() != [cfg.kernel * cfg.kernel * RAW_FEATURES, g.channels] {
        return Err(contract("extractor parameters do not match the grid channels"));
    }
    let tape = Tape::new();
    let b = params.bind(&tape, |_| false);
    let x = tape.constant(pillars.features.clone());
    let out = extract_var(&b, x, &g, cfg);
    Ok(BevFeatureMap {
        grid: g,
        values: (*out.value()).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid() -> GridSpec {
        GridSpec::new([-4.0, 4.0], [-2.0, 2.0], 1.0, 4).unwrap()
    }

    #[test]
    fn grid_dimensions_and_rounding() {
        let g = grid();
        assert_eq!((g.h, g.w), (4, 8));
        let r = GridSpec::new([0.0, 2.5], [0.0, 1.0], 1.0, 1).unwrap();
        assert_eq!(r.w, 3);
        assert_eq!(g.cell_of(4.0, 0.0), None);
        assert_eq!(g.cell_of(-4.0, -2.0), Some(0));
    }

    #[test]
    fn empty_cloud_rasterizes_to_zero() {
        let p = rasterize(&PointCloud::empty(Frame::Ego), &grid()).unwrap();
        assert!(p.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn point_at_cell_center() {
        let g = grid();
        let c = g.cell_center(9);
        let pc = PointCloud {
            frame: Frame::Ego,
            points: vec![[c[0], c[1], 0.7]],
        };
        let p = rasterize(&pc, &g).unwrap();
        assert_eq!(p.features.row(9), &[1.0, 0.0, 0.0, 0.7, 1.0]);
    }

    #[test]
    fn rasterize_rejects_collaborator_frame() {
        assert!(rasterize(&PointCloud::empty(Frame::Collaborator), &grid()).is_err());
    }

    #[test]
    fn zero_input_zero_output_and_determinism() {
        let g = grid();
        let mut p = ParamSet::new();
        init_extractor(&mut p, &g, &ExtractorConfig::default(), &mut ChaCha8Rng::seed_from_u64(1));
        let z = rasterize(&PointCloud::empty(Frame::Ego), &g).unwrap();
        let m = extract(&z, &p, &ExtractorConfig::default()).unwrap();
        assert!(m.values.data().iter().all(|&v| v == 0.0));
        let pc = PointCloud {
            frame: Frame::Ego,
            points: vec![[0.3, 0.2, 1.0], [1.5, -1.2, 0.3]],
        };
        let r = rasterize(&pc, &g).unwrap();
        let a = extract(&r, &p, &ExtractorConfig::default()).unwrap();
        let b = extract(&r, &p, &ExtractorConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
