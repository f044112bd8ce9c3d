//! Flat-shaded ray-cast rendering of the world model into camera images and
//! rasterization of the BEV ground-truth maps.

use crate::bevmodel::BevGridSpec;
use crate::camgeom::{CameraSpec, EgoPose};
use crate::synthscene::world::{ObjectClass, WorldModel, DIVIDER_HALF_WIDTH};
use crate::synthscene::{Image, SegMasks};

const SKY: [f32; 3] = [0.55, 0.7, 0.9];
const GRASS: [f32; 3] = [0.25, 0.42, 0.2];
const ASPHALT: [f32; 3] = [0.35, 0.35, 0.37];
const PAINT: [f32; 3] = [0.95, 0.95, 0.95];

/// Segmentation channel indices.
pub const SEG_DRIVABLE: usize = 0;
pub const SEG_DIVIDER: usize = 1;
pub const NUM_SEG_CLASSES: usize = 2;

/// An actor placed in the ego frame at one timestamp.
#[derive(Debug, Clone, Copy)]
pub(crate) struct EgoCuboid {
    pub id: usize,
    pub class: ObjectClass,
    pub center: [f64; 3],
    pub half: [f64; 3],
    pub yaw: f64,
}

impl EgoCuboid {
    #[cfg(test)]
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let (s, c) = self.yaw.sin_cos();
        let mut out = [[0.0; 3]; 8];
        for (i, o) in out.iter_mut().enumerate() {
            let lx = if i & 1 == 0 { -self.half[0] } else { self.half[0] };
            let ly = if i & 2 == 0 { -self.half[1] } else { self.half[1] };
            let lz = if i & 4 == 0 { -self.half[2] } else { self.half[2] };
            *o = [
                self.center[0] + c * lx - s * ly,
                self.center[1] + s * lx + c * ly,
                self.center[2] + lz,
            ];
        }
        out
    }

    /// Ray/box slab intersection: entry distance and the hit face axis.
    fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, usize)> {
        let (s, c) = self.yaw.sin_cos();
        let rel = [o[0] - self.center[0], o[1] - self.center[1], o[2] - self.center[2]];
        let lo = [c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]];
        let ld = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        let mut axis = 0;
        for k in 0..3 {
            if ld[k].abs() < 1e-12 {
                if lo[k].abs() > self.half[k] {
                    return None;
                }
                continue;
            }
            let a = (-self.half[k] - lo[k]) / ld[k];
            let b = (self.half[k] - lo[k]) / ld[k];
            let (near, far) = if a < b { (a, b) } else { (b, a) };
            if near > t0 {
                t0 = near;
                axis = k;
            }
            t1 = t1.min(far);
        }
        (t0 <= t1 && t0 > 1e-6).then_some((t0, axis))
    }
}

/// Renders one camera. Returns the image and, per pixel, the instance id of
/// the actor painted there (or -1).
pub(crate) fn render_camera(
    world: &WorldModel,
    pose: &EgoPose<f64>,
    cuboids: &[EgoCuboid],
    cam: &CameraSpec<f64>,
) -> (Image, Vec<i64>) {
    let (h, w) = cam.image_size();
    let mut img = Image::new(h, w);
    let mut ids = vec![-1i64; h * w];
    let o = *cam.translation();
    for v in 0..h {
        for u in 0..w {
            let d = cam.pixel_ray(u as f64 + 0.5, v as f64 + 0.5);
            let mut best_t = f64::INFINITY;
            let mut color = SKY;
            if d[2] < -1e-9 {
                let t = -o[2] / d[2];
                best_t = t;
                let p = [o[0] + d[0] * t, o[1] + d[1] * t];
                let wp = pose.ego_to_world(p);
                color = if world.divider(wp, DIVIDER_HALF_WIDTH) {
                    PAINT
                } else if world.drivable(wp) {
                    ASPHALT
                } else {
                    GRASS
                };
            }
            let mut hit_id = -1i64;
            for cb in cuboids {
                if let Some((t, axis)) = cb.intersect(o, d) {
                    if t < best_t {
                        best_t = t;
                        let shade = [0.8f32, 0.9, 1.0][axis];
                        color = cb.class.color().map(|c| c * shade);
                        hit_id = cb.id as i64;
                    }
                }
            }
            img.set(v, u, color);
            ids[v * w + u] = hit_id;
        }
    }
    (img, ids)
}

/// Rasterizes drivable area and lane dividers at BEV cell centres in the
/// ego frame. Dividers are thin, so a cell is marked when the line passes
/// within half a cell of its centre.
pub fn render_bev_gt(world: &WorldModel, pose: &EgoPose<f64>, grid: &BevGridSpec) -> SegMasks {
    let mut masks = SegMasks::new(NUM_SEG_CLASSES, grid.rows, grid.cols);
    let tol = grid.cell_size() / 2.0;
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let wp = pose.ego_to_world(grid.cell_center(r, c));
            if world.drivable(wp) {
                masks.set(SEG_DRIVABLE, r, c, true);
            }
            if world.divider(wp, tol) {
                masks.set(SEG_DIVIDER, r, c, true);
            }
        }
    }
    masks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthscene::{ego_cuboids, generate_scene, DatasetSpec};

    fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
        pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
        let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
        let mut hull: Vec<[f64; 2]> = Vec::new();
        for pass in 0..2 {
            let start = hull.len();
            let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
                Box::new(pts.iter())
            } else {
                Box::new(pts.iter().rev())
            };
            for &p in iter {
                while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                    hull.pop();
                }
                hull.push(p);
            }
            hull.pop();
        }
        hull
    }

    fn inside(hull: &[[f64; 2]], p: [f64; 2]) -> bool {
        (0..hull.len()).all(|i| {
            let a = hull[i];
            let b = hull[(i + 1) % hull.len()];
            (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
        })
    }

    #[test]
    fn painted_footprint_matches_projected_hull() {
        let spec = DatasetSpec::default();
        let rig = spec.rig().unwrap();
        let mut checked = 0;
        for i in 0..4 {
            let seq = generate_scene(&spec.scene_spec(i), &rig, &spec.grid).unwrap();
            let frame = &seq.frames[i % seq.frames.len()];
            let pose = frame.ego_pose;
            for cb in ego_cuboids(&seq.world, &pose, frame.timestamp) {
                for cam in rig.cameras() {
                    let corners = cb.corners();
                    let proj: Option<Vec<[f64; 2]>> = corners.iter().map(|p| cam.project_unbounded(p)).collect();
                    let Some(proj) = proj else { continue };
                    let (_, ids) = render_camera(&seq.world, &pose, &[cb], cam);
                    let (h, w) = cam.image_size();
                    let hull = convex_hull(proj);
                    let (mut inter, mut union, mut painted) = (0usize, 0usize, 0usize);
                    for v in 0..h {
                        for u in 0..w {
                            let a = ids[v * w + u] == cb.id as i64;
                            let b = inside(&hull, [u as f64 + 0.5, v as f64 + 0.5]);
                            painted += a as usize;
                            inter += (a && b) as usize;
                            union += (a || b) as usize;
                        }
                    }
                    // Tiny footprints are dominated by pixel quantization.
                    if painted < 40 {
                        continue;
                    }
                    let iou = inter as f64 / union as f64;
                    assert!(iou >= 0.9, "actor {} camera {}: IoU {iou}", cb.id, cam.id());
                    checked += 1;
                }
            }
        }
        assert!(checked >= 5, "only {checked} footprints checked");
    }
}
