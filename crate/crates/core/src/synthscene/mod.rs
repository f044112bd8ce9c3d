//! Seeded synthetic driving scenes: multi-camera images, ground-truth boxes,
//! ego motion and BEV segmentation maps.

mod dataset;
mod render;
mod sampler;
mod world;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bevmodel::BevGridSpec;
use crate::camgeom::{CameraRig, EgoPose};
use crate::error::{Error, Result};
use crate::scalar::wrap_angle;

pub use dataset::{
    atomic_write, read_blob, write_blob, Dataset, DatasetSpec, SceneManifest, DATASET_FILE, RIG_FILE,
};
pub use render::{render_bev_gt, NUM_SEG_CLASSES, SEG_DIVIDER, SEG_DRIVABLE};
pub use sampler::{temporal_sampler, SamplerMode, TRAIN_HORIZON_S, TRAIN_SAMPLES};
pub use world::{Actor, Attribute, ObjectClass, Road, WorldModel, LANE_WIDTH, MOVING_SPEED};

pub(crate) use render::{render_camera, EgoCuboid};

/// HWC RGB image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    #[inline]
    pub fn get(&self, v: usize, u: usize) -> [f32; 3] {
        let i = (v * self.width + u) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, v: usize, u: usize, rgb: [f32; 3]) {
        let i = (v * self.width + u) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Per-class binary BEV masks, indexed `[class][row][col]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMasks {
    pub classes: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl SegMasks {
    pub fn new(classes: usize, rows: usize, cols: usize) -> Self {
        Self {
            classes,
            rows,
            cols,
            data: vec![0; classes * rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, k: usize, r: usize, c: usize) -> bool {
        self.data[(k * self.rows + r) * self.cols + c] != 0
    }

    #[inline]
    pub fn set(&mut self, k: usize, r: usize, c: usize, v: bool) {
        self.data[(k * self.rows + r) * self.cols + c] = v as u8;
    }

    pub fn count(&self, k: usize) -> usize {
        let n = self.rows * self.cols;
        self.data[k * n..(k + 1) * n].iter().filter(|v| **v != 0).count()
    }
}

/// Ground-truth 3-D box in the ego frame of its frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub center: [f64; 3],
    /// (length, width, height), meters.
    pub size: [f64; 3],
    pub yaw: f64,
    /// Absolute velocity expressed in ego axes, m/s.
    pub velocity: [f64; 2],
    pub class_id: usize,
    pub attribute_id: usize,
    #[serde(default)]
    pub instance_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub images: Vec<Image>,
    pub ego_pose: EgoPose<f64>,
    pub boxes: Vec<GtBox>,
    pub bev_seg: SegMasks,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneLayout {
    Straight,
    Curve,
    Intersection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub duration_s: f64,
    pub frame_hz: f64,
    pub num_actors: usize,
    pub lane_layout: LaneLayout,
    pub classes: Vec<ObjectClass>,
}

impl SceneSpec {
    pub fn num_frames(&self) -> usize {
        let n = self.duration_s * self.frame_hz;
        if n.is_finite() && n > 0.0 {
            n.round() as usize
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frame_hz > 0.0) {
            return Err(Error::Validation("frame rate must be positive".into()));
        }
        let n = self.num_frames();
        if n < 4 {
            return Err(Error::Validation(format!(
                "scene has {n} frames; temporal attention needs at least 4"
            )));
        }
        if self.num_actors > 0 && self.classes.is_empty() {
            return Err(Error::Validation("actors requested but no classes allowed".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSequence {
    pub spec: SceneSpec,
    pub world: WorldModel,
    pub frames: Vec<FrameSample>,
}

impl SceneSequence {
    pub fn timestamps(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.timestamp).collect()
    }
}

/// Main road, ego path and starting arc length for a layout.
fn build_roads(layout: LaneLayout, rng: &mut ChaCha8Rng) -> (Vec<Road>, f64) {
    let lw = LANE_WIDTH;
    match layout {
        LaneLayout::Straight => (
            vec![Road {
                centerline: vec![[-300.0, 0.0], [300.0, 0.0]],
                lanes: 2,
                lane_width: lw,
            }],
            300.0,
        ),
        LaneLayout::Curve => {
            let radius: f64 = rng.random_range(35.0..70.0);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let mut pts = vec![[-80.0, 0.0], [0.0, 0.0]];
            let sweep = 150.0 / radius;
            let steps = 60;
            for i in 1..=steps {
                let a = sweep * i as f64 / steps as f64;
                pts.push([radius * a.sin(), sign * radius * (1.0 - a.cos())]);
            }
            let start = rng.random_range(60.0..85.0);
            (
                vec![Road {
                    centerline: pts,
                    lanes: 2,
                    lane_width: lw,
                }],
                start,
            )
        }
        LaneLayout::Intersection => {
            let cross_x: f64 = rng.random_range(5.0..25.0);
            (
                vec![
                    Road {
                        centerline: vec![[-300.0, 0.0], [300.0, 0.0]],
                        lanes: 2,
                        lane_width: lw,
                    },
                    Road {
                        centerline: vec![[cross_x, -300.0], [cross_x, 300.0]],
                        lanes: 2,
                        lane_width: lw,
                    },
                ],
                300.0,
            )
        }
    }
}

fn place_actors(
    spec: &SceneSpec,
    roads: &[Road],
    ego_s0: f64,
    ego_start: [f64; 2],
    rng: &mut ChaCha8Rng,
) -> Vec<Actor> {
    let mut actors: Vec<Actor> = Vec::new();
    for id in 0..spec.num_actors {
        for _attempt in 0..50 {
            let class = spec.classes[rng.random_range(0..spec.classes.len())];
            let nominal = class.nominal_size();
            let jitter: f64 = rng.random_range(0.9..1.1);
            let size = [nominal[0] * jitter, nominal[1] * jitter, nominal[2] * rng.random_range(0.95..1.05)];
            let road = if roads.len() > 1 && rng.random_bool(0.3) { &roads[1] } else { &roads[0] };
            let on_main = std::ptr::eq(road, &roads[0]);
            let s = if on_main {
                ego_s0 + rng.random_range(-20.0..40.0)
            } else {
                road.length() / 2.0 + rng.random_range(-20.0..20.0)
            };
            let (start, yaw, velocity) = match class {
                ObjectClass::Pedestrian => {
                    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let lateral = side * (road.half_width() + rng.random_range(1.0..3.0));
                    let (p, _) = road.point_at(s, lateral);
                    let heading: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                    let speed = if rng.random_bool(0.6) { rng.random_range(0.8..1.6) } else { 0.0 };
                    (p, heading, [speed * heading.cos(), speed * heading.sin()])
                }
                ObjectClass::Car | ObjectClass::Truck => {
                    let oncoming = rng.random_bool(0.4);
                    let lateral = if oncoming { LANE_WIDTH / 2.0 } else { -LANE_WIDTH / 2.0 }
                        + rng.random_range(-0.2..0.2);
                    let (p, heading) = road.point_at(s, lateral);
                    let heading = if oncoming { wrap_angle(heading + std::f64::consts::PI) } else { heading };
                    let speed = if rng.random_bool(0.7) { rng.random_range(2.0..8.0) } else { 0.0 };
                    (p, heading, [speed * heading.cos(), speed * heading.sin()])
                }
            };
            let clearance = |a: &Actor| {
                let d = (a.start[0] - start[0]).hypot(a.start[1] - start[1]);
                d < 0.5 * (a.size[0] + size[0]) + 1.0
            };
            let near_ego = (start[0] - ego_start[0]).hypot(start[1] - ego_start[1]) < 6.0;
            if near_ego || actors.iter().any(clearance) {
                continue;
            }
            actors.push(Actor {
                instance_id: id,
                class,
                size,
                start,
                velocity,
                yaw,
            });
            break;
        }
    }
    actors
}

/// Ego-frame boxes at time `t`, keeping those whose centre lies on the grid.
pub fn boxes_at(world: &WorldModel, pose: &EgoPose<f64>, t: f64, grid: &BevGridSpec) -> Vec<GtBox> {
    world
        .actors
        .iter()
        .filter_map(|a| {
            let c = pose.world_to_ego(a.position_at(t));
            if !grid.contains(c) {
                return None;
            }
            Some(GtBox {
                center: [c[0], c[1], a.size[2] / 2.0],
                size: a.size,
                yaw: wrap_angle(a.yaw - pose.yaw),
                velocity: pose.world_vec_to_ego(a.velocity),
                class_id: a.class.id(),
                attribute_id: Attribute::from_speed(a.speed()).id(),
                instance_id: a.instance_id,
            })
        })
        .collect()
}

pub(crate) fn ego_cuboids(world: &WorldModel, pose: &EgoPose<f64>, t: f64) -> Vec<EgoCuboid> {
    world
        .actors
        .iter()
        .map(|a| {
            let c = pose.world_to_ego(a.position_at(t));
            EgoCuboid {
                id: a.instance_id,
                class: a.class,
                center: [c[0], c[1], a.size[2] / 2.0],
                half: a.size.map(|v| v / 2.0),
                yaw: wrap_angle(a.yaw - pose.yaw),
            }
        })
        .collect()
}

/// Renders all frames of a world along an ego path.
pub fn render_sequence(
    spec: &SceneSpec,
    world: WorldModel,
    poses: &[EgoPose<f64>],
    rig: &CameraRig<f64>,
    grid: &BevGridSpec,
) -> SceneSequence {
    let frames = poses
        .iter()
        .map(|pose| {
            let t = pose.timestamp;
            let cubs = ego_cuboids(&world, pose, t);
            let images = rig
                .cameras()
                .iter()
                .map(|cam| render_camera(&world, pose, &cubs, cam).0)
                .collect();
            FrameSample {
                images,
                ego_pose: *pose,
                boxes: boxes_at(&world, pose, t, grid),
                bev_seg: render_bev_gt(&world, pose, grid),
                timestamp: t,
            }
        })
        .collect();
    SceneSequence {
        spec: spec.clone(),
        world,
        frames,
    }
}

/// Generates a deterministic scene: the same spec, rig and grid always give
/// bit-identical output.
pub fn generate_scene(spec: &SceneSpec, rig: &CameraRig<f64>, grid: &BevGridSpec) -> Result<SceneSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (roads, ego_s0) = build_roads(spec.lane_layout, &mut rng);
    let ego_speed: f64 = rng.random_range(3.0..7.0);
    let ego_lateral = -LANE_WIDTH / 2.0;
    let n = spec.num_frames();
    let poses: Vec<EgoPose<f64>> = (0..n)
        .map(|k| {
            let t = k as f64 / spec.frame_hz;
            let (p, yaw) = roads[0].point_at(ego_s0 + ego_speed * t, ego_lateral);
            EgoPose::new(p, yaw, t)
        })
        .collect();
    let actors = place_actors(spec, &roads, ego_s0, poses[0].position, &mut rng);
    let world = WorldModel { roads, actors };
    let seq = render_sequence(spec, world, &poses, rig, grid);
    let err = velocity_consistency_error(&seq);
    if err > 1e-6 {
        return Err(Error::Validation(format!("actor tracks inconsistent with velocity ({err:e} m)")));
    }
    Ok(seq)
}

/// Largest deviation, over consecutive frames and actors, between the world
/// displacement of a box and `velocity * dt`.
pub fn velocity_consistency_error(seq: &SceneSequence) -> f64 {
    let mut worst: f64 = 0.0;
    for w in seq.frames.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let dt = b.timestamp - a.timestamp;
        for ba in &a.boxes {
            let Some(bb) = b.boxes.iter().find(|x| x.instance_id == ba.instance_id) else {
                continue;
            };
            let pa = a.ego_pose.ego_to_world([ba.center[0], ba.center[1]]);
            let pb = b.ego_pose.ego_to_world([bb.center[0], bb.center[1]]);
            let (s, c) = a.ego_pose.yaw.sin_cos();
            let v = [c * ba.velocity[0] - s * ba.velocity[1], s * ba.velocity[0] + c * ba.velocity[1]];
            let ex = pb[0] - pa[0] - v[0] * dt;
            let ey = pb[1] - pa[1] - v[1] * dt;
            worst = worst.max(ex.hypot(ey));
        }
    }
    worst
}
