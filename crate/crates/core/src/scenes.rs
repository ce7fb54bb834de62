//! Synthetic two-agent driving scenes, a BEV ray-casting LiDAR and frame projection.
//!
//! The world frame has the road running along +x. The ego agent sits near the
//! origin and the collaborator 20-30 m ahead of or behind it, so objects beyond
//! the ego sensor range or hidden behind a nearer vehicle are often visible to
//! the collaborator only.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::geometry::{Box7, Pose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// World extent in which object centers are placed (meters).
    pub extent_x: [f64; 2],
    pub extent_y: [f64; 2],
    pub min_objects: usize,
    pub max_objects: usize,
    /// Minimum BEV clearance between any two boxes (meters).
    pub min_gap: f64,
    pub length: [f64; 2],
    pub width: [f64; 2],
    pub height: f64,
    /// Fraction of objects whose heading follows the road (0 or pi, with jitter).
    pub aligned_fraction: f64,
    /// Probability of planting an occluder in front of a target as seen from the ego.
    pub occlusion_prob: f64,
    /// Longitudinal ego-to-collaborator distance range (meters).
    pub collab_distance: [f64; 2],
    pub collab_lateral: f64,
    pub max_collab_distance: f64,
    /// Half-width of the uniform jitter applied to the ego position (meters).
    pub ego_jitter: f64,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            extent_x: [-34.0, 34.0],
            extent_y: [-17.0, 17.0],
            min_objects: 4,
            max_objects: 10,
            min_gap: 1.0,
            length: [4.0, 5.0],
            width: [1.8, 2.2],
            height: 1.6,
            aligned_fraction: 0.8,
            occlusion_prob: 0.5,
            collab_distance: [20.0, 30.0],
            collab_lateral: 5.0,
            max_collab_distance: 70.0,
            ego_jitter: 2.0,
            max_retries: 1000,
        }
    }
}

impl SceneConfig {
    pub fn mean_size(&self) -> (f64, f64, f64) {
        (
            0.5 * (self.width[0] + self.width[1]),
            0.5 * (self.length[0] + self.length[1]),
            self.height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.extent_x[0] < self.extent_x[1]
            && self.extent_y[0] < self.extent_y[1]
            && self.min_objects <= self.max_objects
            && self.length[0] > 0.0
            && self.length[0] <= self.length[1]
            && self.width[0] > 0.0
            && self.width[0] <= self.width[1]
            && self.height > 0.0
            && (0.0..=1.0).contains(&self.aligned_fraction)
            && (0.0..=1.0).contains(&self.occlusion_prob)
            && self.collab_distance[0] <= self.collab_distance[1]
            && self.max_retries > 0;
        if !ok {
            return Err(Error::Config(format!("invalid [scene] section: {self:?}")));
        }
        if self.collab_distance[1].hypot(self.collab_lateral) + 2.0 * self.ego_jitter
            > self.max_collab_distance
        {
            return Err(Error::Config(
                "collaborator placement can exceed max_collab_distance".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub max_range: f64,
    pub angular_res_deg: f64,
    pub noise_std: f64,
    /// Heights of the horizontal beams; a hit yields one point per beam below the box top.
    pub beam_heights: Vec<f64>,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            max_range: 24.0,
            angular_res_deg: 0.5,
            noise_std: 0.02,
            beam_heights: vec![0.3, 0.8, 1.3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Ego,
    Collaborator,
}

/// A pose tagged with the agent frame it defines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentPose {
    pub frame: Frame,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<Box7>,
    pub ego_pose: Pose,
    pub collab_pose: Pose,
    pub extent_x: [f64; 2],
    pub extent_y: [f64; 2],
    pub seed: u64,
}

impl Scene {
    pub fn agent(&self, frame: Frame) -> AgentPose {
        let pose = match frame {
            Frame::Ego => self.ego_pose,
            Frame::Collaborator => self.collab_pose,
        };
        AgentPose { frame, pose }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub frame: Frame,
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn empty(frame: Frame) -> Self {
        Self {
            frame,
            points: Vec::new(),
        }
    }
}

pub type BoxSet = Vec<Box7>;

/// Axis-aligned evaluation window in the ego frame; bounds are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRange {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl EvalRange {
    /// The range used for the OPV2V benchmark.
    pub const OPV2V: EvalRange = EvalRange {
        x: [-140.0, 140.0],
        y: [-40.0, 40.0],
    };

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x[0] && x <= self.x[1] && y >= self.y[0] && y <= self.y[1]
    }
}

fn agent_footprint(pose: &Pose) -> Box7 {
    Box7 {
        cx: pose.x,
        cy: pose.y,
        cz: 0.8,
        w: 2.0,
        l: 4.5,
        h: 1.6,
        yaw: pose.yaw,
    }
}

fn road_yaw(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> f64 {
    if rng.random::<f64>() < cfg.aligned_fraction {
        let base = if rng.random::<bool>() { 0.0 } else { PI };
        base + rng.random_range(-0.08..=0.08)
    } else {
        rng.random_range(-PI..PI)
    }
}

fn random_box(rng: &mut ChaCha8Rng, cfg: &SceneConfig, cx: f64, cy: f64) -> Box7 {
    let l = rng.random_range(cfg.length[0]..=cfg.length[1]);
    let w = rng.random_range(cfg.width[0]..=cfg.width[1]);
    let yaw = crate::geometry::wrap_angle(road_yaw(rng, cfg));
    Box7 {
        cx,
        cy,
        cz: cfg.height / 2.0,
        w,
        l,
        h: cfg.height,
        yaw,
    }
}

fn inside(cfg: &SceneConfig, x: f64, y: f64) -> bool {
    x >= cfg.extent_x[0] && x <= cfg.extent_x[1] && y >= cfg.extent_y[0] && y <= cfg.extent_y[1]
}

fn fits(candidate: &Box7, placed: &[Box7], blockers: &[Box7], gap: f64) -> bool {
    placed
        .iter()
        .chain(blockers)
        .all(|b| !candidate.overlaps_bev(b, gap))
}

/// Samples a scene. Deterministic in `(cfg, seed)`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = cfg.ego_jitter;
    let ego = Pose::new(
        rng.random_range(-j..=j),
        rng.random_range(-j..=j),
        rng.random_range(-0.1..=0.1),
    );
    let ahead = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let d = rng.random_range(cfg.collab_distance[0]..=cfg.collab_distance[1]);
    let lat = rng.random_range(-cfg.collab_lateral..=cfg.collab_lateral);
    let oncoming = if rng.random::<bool>() { PI } else { 0.0 };
    let collab = Pose::new(
        ego.x + ahead * d,
        ego.y + lat,
        oncoming + rng.random_range(-0.1..=0.1),
    );
    let blockers = [agent_footprint(&ego), agent_footprint(&collab)];
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<Box7> = Vec::with_capacity(n);

    // Occluder/target pair on a ray from the ego towards the collaborator side.
    if n >= 2 && rng.random::<f64>() < cfg.occlusion_prob {
        let mut placed = false;
        for _ in 0..cfg.max_retries {
            let base = if ahead > 0.0 { 0.0 } else { PI };
            let bearing = ego.yaw + base + rng.random_range(-1.0..=1.0);
            let r = rng.random_range(12.0..=22.0);
            let f = rng.random_range(0.4..=0.6);
            let (s, c) = bearing.sin_cos();
            let (tx, ty) = (ego.x + r * c, ego.y + r * s);
            let (ox, oy) = (ego.x + f * r * c, ego.y + f * r * s);
            if !inside(cfg, tx, ty) || !inside(cfg, ox, oy) {
                continue;
            }
            let target = random_box(&mut rng, cfg, tx, ty);
            let occluder = random_box(&mut rng, cfg, ox, oy);
            if fits(&target, &[], &blockers, cfg.min_gap)
                && fits(&occluder, &[target], &blockers, cfg.min_gap)
            {
                objects.push(target);
                objects.push(occluder);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement {
                what: "occluder/target pair",
                retries: cfg.max_retries,
            });
        }
    }

    while objects.len() < n {
        let mut placed = false;
        for _ in 0..cfg.max_retries {
            let cx = rng.random_range(cfg.extent_x[0]..=cfg.extent_x[1]);
            let cy = rng.random_range(cfg.extent_y[0]..=cfg.extent_y[1]);
            let b = random_box(&mut rng, cfg, cx, cy);
            if fits(&b, &objects, &blockers, cfg.min_gap) {
                objects.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement {
                what: "object",
                retries: cfg.max_retries,
            });
        }
    }

    Ok(Scene {
        objects,
        ego_pose: ego,
        collab_pose: collab,
        extent_x: cfg.extent_x,
        extent_y: cfg.extent_y,
        seed,
    })
}

/// Casts horizontal rays from `agent` and returns points from the nearest box on each ray,
/// expressed in the agent frame.
pub fn render_view(scene: &Scene, agent: Frame, sensor: &SensorConfig, noise_seed: u64) -> PointCloud {
    let pose = scene.agent(agent).pose;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0, sensor.noise_std.max(0.0)).expect("finite noise std");
    let n_rays = (360.0 / sensor.angular_res_deg).round().max(1.0) as usize;
    let origin = [pose.x, pose.y];
    let mut points = Vec::new();
    for i in 0..n_rays {
        let theta = -PI + (i as f64) * 2.0 * PI / n_rays as f64;
        let (s, c) = (theta + pose.yaw).sin_cos();
        let dir = [c, s];
        let hit = scene
            .objects
            .iter()
            .filter_map(|b| b.ray_hit(origin, dir).map(|t| (t, b.h)))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        let Some((t, top)) = hit else { continue };
        if t > sensor.max_range {
            continue;
        }
        for &z in &sensor.beam_heights {
            if z > top {
                continue;
            }
            let r = if sensor.noise_std > 0.0 {
                t + noise.sample(&mut rng)
            } else {
                t
            };
            points.push([r * theta.cos(), r * theta.sin(), z]);
        }
    }
    PointCloud {
        frame: agent,
        points,
    }
}

/// Rigidly re-expresses a cloud from the `from` agent frame in the `to` agent frame.
pub fn project_points(pc: &PointCloud, from: &AgentPose, to: &AgentPose) -> Result<PointCloud> {
    if pc.frame != from.frame {
        return Err(contract(format!(
            "point cloud is in the {:?} frame but projection starts from {:?}",
            pc.frame, from.frame
        )));
    }
    let points = pc
        .points
        .iter()
        .map(|&[x, y, z]| {
            let [u, v] = to.pose.to_local(from.pose.to_world([x, y]));
            [u, v, z]
        })
        .collect();
    Ok(PointCloud {
        frame: to.frame,
        points,
    })
}

/// Objects whose centers fall inside `range` (closed bounds), in the ego frame.
pub fn ground_truth_boxes(scene: &Scene, range: &EvalRange) -> BoxSet {
    let world = Pose::new(0.0, 0.0, 0.0);
    scene
        .objects
        .iter()
        .map(|b| b.transformed(&world, &scene.ego_pose))
        .filter(|b| range.contains(b.cx, b.cy))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotated_iou, segment_crosses_box};

    fn single(objects: Vec<Box7>) -> Scene {
        Scene {
            objects,
            ego_pose: Pose::new(0.0, 0.0, 0.0),
            collab_pose: Pose::new(25.0, 0.0, PI),
            extent_x: [-34.0, 34.0],
            extent_y: [-17.0, 17.0],
            seed: 0,
        }
    }

    fn car(cx: f64, cy: f64) -> Box7 {
        Box7 {
            cx,
            cy,
            cz: 0.8,
            w: 2.0,
            l: 4.5,
            h: 1.6,
            yaw: 0.0,
        }
    }

    #[test]
    fn zero_objects_gives_empty_scene() {
        let cfg = SceneConfig {
            min_objects: 0,
            max_objects: 0,
            ..Default::default()
        };
        assert!(generate_scene(&cfg, 1).unwrap().objects.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(&cfg, 42).unwrap(), generate_scene(&cfg, 42).unwrap());
    }

    #[test]
    fn eight_objects_do_not_overlap() {
        let cfg = SceneConfig {
            min_objects: 8,
            max_objects: 8,
            ..Default::default()
        };
        let s = generate_scene(&cfg, 7).unwrap();
        assert_eq!(s.objects.len(), 8);
        for i in 0..8 {
            for j in i + 1..8 {
                assert_eq!(rotated_iou(&s.objects[i], &s.objects[j]).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn crowded_world_reports_placement_error() {
        let cfg = SceneConfig {
            extent_x: [-5.0, 5.0],
            extent_y: [-3.0, 3.0],
            min_objects: 30,
            max_objects: 30,
            collab_distance: [0.0, 0.0],
            collab_lateral: 0.0,
            max_retries: 50,
            ..Default::default()
        };
        assert!(matches!(generate_scene(&cfg, 3), Err(Error::Placement { .. })));
    }

    #[test]
    fn occluded_box_gets_no_points() {
        let scene = single(vec![car(10.0, 0.0), car(18.0, 0.0)]);
        let sensor = SensorConfig {
            noise_std: 0.0,
            ..Default::default()
        };
        let pc = render_view(&scene, Frame::Ego, &sensor, 0);
        assert!(!pc.points.is_empty());
        // The far box sits entirely in the near box's shadow.
        assert!(pc.points.iter().all(|p| p[0] < 15.0));
    }

    #[test]
    fn range_limit_drops_far_boxes() {
        let scene = single(vec![car(30.0, 0.0)]);
        let pc = render_view(&scene, Frame::Ego, &SensorConfig::default(), 0);
        assert!(pc.points.is_empty());
    }

    #[test]
    fn rendering_is_deterministic_and_occlusion_sound() {
        let cfg = SceneConfig::default();
        let sensor = SensorConfig {
            noise_std: 0.0,
            ..Default::default()
        };
        for seed in 0..10 {
            let scene = generate_scene(&cfg, seed).unwrap();
            for frame in [Frame::Ego, Frame::Collaborator] {
                let a = render_view(&scene, frame, &sensor, 9);
                assert_eq!(a, render_view(&scene, frame, &sensor, 9));
                let pose = scene.agent(frame).pose;
                for p in &a.points {
                    let w = pose.to_world([p[0], p[1]]);
                    // Move the end point slightly back towards the sensor so it is
                    // off the hit surface.
                    let d = ((w[0] - pose.x).powi(2) + (w[1] - pose.y).powi(2)).sqrt();
                    let k = (d - 1e-6) / d;
                    let end = [pose.x + k * (w[0] - pose.x), pose.y + k * (w[1] - pose.y)];
                    for b in &scene.objects {
                        assert!(!segment_crosses_box([pose.x, pose.y], end, b));
                    }
                }
            }
        }
    }

    #[test]
    fn projection_rejects_wrong_frame() {
        let scene = single(vec![]);
        let pc = PointCloud::empty(Frame::Collaborator);
        let e = scene.agent(Frame::Ego);
        assert!(project_points(&pc, &e, &e).is_err());
    }

    #[test]
    fn projection_identity_and_translation() {
        let a = AgentPose {
            frame: Frame::Collaborator,
            pose: Pose::new(5.0, 0.0, 0.0),
        };
        let b = AgentPose {
            frame: Frame::Ego,
            pose: Pose::new(0.0, 0.0, 0.0),
        };
        let pc = PointCloud {
            frame: Frame::Collaborator,
            points: vec![[0.0, 0.0, 1.0]],
        };
        let same = project_points(&pc, &a, &a).unwrap();
        assert_eq!(same.points, pc.points);
        let moved = project_points(&pc, &a, &b).unwrap();
        assert_eq!(moved.points, vec![[5.0, 0.0, 1.0]]);
        assert_eq!(moved.frame, Frame::Ego);
    }

    #[test]
    fn ground_truth_range_is_closed() {
        let scene = single(vec![car(32.0, 0.0), car(32.5, 10.0), car(0.0, 16.0)]);
        let r = EvalRange {
            x: [-32.0, 32.0],
            y: [-16.0, 16.0],
        };
        assert_eq!(ground_truth_boxes(&scene, &r).len(), 2);
        assert_eq!(ground_truth_boxes(&scene, &EvalRange::OPV2V).len(), 3);
        assert!(ground_truth_boxes(&single(vec![]), &r).is_empty());
    }
}
