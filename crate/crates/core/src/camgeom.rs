//! Camera rig geometry: pinhole projection, pillar reference points and
//! azimuth angles.
//!
//! Frames: the ego frame is x forward, y left, z up, with the origin on the
//! ground below the rig. Camera frames follow the pinhole convention
//! x right, y down, z along the optical axis.

use serde::{Deserialize, Serialize};

use crate::bevmodel::BevGridSpec;
use crate::error::{Error, Result};
use crate::scalar::{lit, wrap_angle, Real};

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

pub(crate) fn mat_vec<T: Real>(m: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub(crate) fn transpose<T: Real>(m: &Mat3<T>) -> Mat3<T> {
    let mut t = [[T::zero(); 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            t[j][i] = *v;
        }
    }
    t
}

fn det3<T: Real>(m: &Mat3<T>) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Rotation ego<-camera for a camera looking horizontally along `yaw`.
pub fn camera_rotation_from_yaw<T: Real>(yaw: T) -> Mat3<T> {
    let (s, c) = yaw.sin_cos();
    let z = T::zero();
    // Columns are the camera axes (right, down, forward) in ego coordinates.
    [[s, z, c], [-c, z, s], [z, -T::one(), z]]
}

/// A single calibrated pinhole camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraSpec<T: Real> {
    id: String,
    intrinsics: Mat3<T>,
    rotation: Mat3<T>,
    rotation_inv: Mat3<T>,
    translation: Vec3<T>,
    image_size: (usize, usize),
    is_front: bool,
    aperture_deg: T,
}

impl<T: Real> CameraSpec<T> {
    /// Builds a camera, rejecting non-pinhole intrinsics and rotations that
    /// are not proper orthonormal matrices (checked to 1e-6).
    pub fn new(
        id: impl Into<String>,
        intrinsics: Mat3<T>,
        rotation: Mat3<T>,
        translation: Vec3<T>,
        image_size: (usize, usize),
        is_front: bool,
        aperture_deg: T,
    ) -> Result<Self> {
        let id = id.into();
        let k = &intrinsics;
        let zero = T::zero();
        if !(k[0][0] > zero && k[1][1] > zero) {
            return Err(Error::Config(format!("camera {id}: focal lengths must be positive")));
        }
        if k[0][1] != zero || k[1][0] != zero || k[2][0] != zero || k[2][1] != zero || k[2][2] != T::one() {
            return Err(Error::Config(format!("camera {id}: intrinsics must be zero-skew pinhole")));
        }
        let tol = lit::<T>(1e-6);
        for i in 0..3 {
            for j in 0..3 {
                let dot = (0..3).fold(zero, |acc, r| acc + rotation[r][i] * rotation[r][j]);
                let expect = if i == j { T::one() } else { zero };
                if (dot - expect).abs() > tol || !dot.is_finite() {
                    return Err(Error::Config(format!("camera {id}: rotation is not orthonormal")));
                }
            }
        }
        if (det3(&rotation) - T::one()).abs() > tol {
            return Err(Error::Config(format!("camera {id}: rotation determinant is not +1")));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::Config(format!("camera {id}: empty image size")));
        }
        if !(aperture_deg > zero && aperture_deg < lit(180.0)) {
            return Err(Error::Config(format!("camera {id}: aperture must be in (0, 180) degrees")));
        }
        Ok(Self {
            id,
            intrinsics,
            rotation_inv: transpose(&rotation),
            rotation,
            translation,
            image_size,
            is_front,
            aperture_deg,
        })
    }

    /// Horizontal camera at `yaw_deg` whose focal length spans `aperture_deg`
    /// across the image width.
    pub fn looking_along(
        id: impl Into<String>,
        yaw_deg: T,
        aperture_deg: T,
        mount: Vec3<T>,
        image_size: (usize, usize),
        is_front: bool,
    ) -> Result<Self> {
        let (h, w) = image_size;
        let half_w = lit::<T>(w as f64 / 2.0);
        let half_h = lit::<T>(h as f64 / 2.0);
        let f = half_w / (aperture_deg.to_radians() / lit(2.0)).tan();
        let z = T::zero();
        let k = [[f, z, half_w], [z, f, half_h], [z, z, T::one()]];
        Self::new(
            id,
            k,
            camera_rotation_from_yaw(yaw_deg.to_radians()),
            mount,
            image_size,
            is_front,
            aperture_deg,
        )
    }

    pub fn id(&self) -> &str {
        &self.id
    }
    pub fn intrinsics(&self) -> &Mat3<T> {
        &self.intrinsics
    }
    pub fn rotation(&self) -> &Mat3<T> {
        &self.rotation
    }
    pub fn translation(&self) -> &Vec3<T> {
        &self.translation
    }
    /// (height, width) in pixels.
    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }
    pub fn is_front(&self) -> bool {
        self.is_front
    }
    pub fn aperture_deg(&self) -> T {
        self.aperture_deg
    }

    /// Yaw of the optical axis in the ego frame, degrees.
    pub fn yaw_deg(&self) -> T {
        let r = &self.rotation;
        r[1][2].atan2(r[0][2]).to_degrees()
    }

    /// Ego-frame point expressed in the camera frame.
    pub fn to_camera(&self, p: &Vec3<T>) -> Vec3<T> {
        let d = [
            p[0] - self.translation[0],
            p[1] - self.translation[1],
            p[2] - self.translation[2],
        ];
        mat_vec(&self.rotation_inv, &d)
    }

    /// Pixel coordinates for an ego-frame point, regardless of image bounds.
    /// `None` when the point is not strictly in front of the camera plane.
    pub fn project_unbounded(&self, p: &Vec3<T>) -> Option<[T; 2]> {
        let c = self.to_camera(p);
        if !(c[2] > lit(1e-6)) {
            return None;
        }
        let k = &self.intrinsics;
        Some([
            k[0][0] * c[0] / c[2] + k[0][2],
            k[1][1] * c[1] / c[2] + k[1][2],
        ])
    }

    /// Projects an ego-frame point to (u, v) pixels; `None` if it is behind
    /// the camera or outside `[0, width) x [0, height)`.
    pub fn project_point(&self, p: &Vec3<T>) -> Option<[T; 2]> {
        let uv = self.project_unbounded(p)?;
        let (h, w) = self.image_size;
        let inside = uv[0] >= T::zero()
            && uv[0] < lit(w as f64)
            && uv[1] >= T::zero()
            && uv[1] < lit(h as f64);
        inside.then_some(uv)
    }

    /// Unit ray direction in the ego frame through pixel (u, v).
    pub fn pixel_ray(&self, u: T, v: T) -> Vec3<T> {
        let k = &self.intrinsics;
        let d = [(u - k[0][2]) / k[0][0], (v - k[1][2]) / k[1][1], T::one()];
        let e = mat_vec(&self.rotation, &d);
        let n = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
        [e[0] / n, e[1] / n, e[2] / n]
    }
}

/// Six-camera layout parameters for [`CameraRig::surround`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigLayout {
    pub ids: Vec<String>,
    pub yaws_deg: Vec<f64>,
    pub apertures_deg: Vec<f64>,
    pub front_index: usize,
    /// Camera centre in the ego frame (shared by all cameras), meters.
    pub mount: [f64; 3],
}

impl Default for RigLayout {
    fn default() -> Self {
        Self {
            ids: [
                "CAM_FRONT",
                "CAM_FRONT_LEFT",
                "CAM_BACK_LEFT",
                "CAM_BACK",
                "CAM_BACK_RIGHT",
                "CAM_FRONT_RIGHT",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            yaws_deg: vec![0.0, 55.0, 110.0, 180.0, -110.0, -55.0],
            apertures_deg: vec![64.5, 72.0, 72.0, 72.0, 72.0, 72.0],
            front_index: 0,
            mount: [0.0, 0.0, 1.6],
        }
    }
}

/// Ordered set of cameras with exactly one front camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig<T: Real> {
    cameras: Vec<CameraSpec<T>>,
    front_index: usize,
}

impl<T: Real> CameraRig<T> {
    pub fn new(cameras: Vec<CameraSpec<T>>) -> Result<Self> {
        let fronts: Vec<usize> = cameras
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_front())
            .map(|(i, _)| i)
            .collect();
        if fronts.len() != 1 {
            return Err(Error::Config(format!(
                "rig must have exactly one front camera, found {}",
                fronts.len()
            )));
        }
        let size = cameras[0].image_size();
        if cameras.iter().any(|c| c.image_size() != size) {
            return Err(Error::Config("all rig cameras must share one image size".into()));
        }
        Ok(Self {
            front_index: fronts[0],
            cameras,
        })
    }

    pub fn surround(image_size: (usize, usize), layout: &RigLayout) -> Result<Self> {
        let n = layout.ids.len();
        if layout.yaws_deg.len() != n || layout.apertures_deg.len() != n {
            return Err(Error::Config("rig layout lists differ in length".into()));
        }
        if layout.front_index >= n {
            return Err(Error::Config("rig layout front index out of range".into()));
        }
        let mount = [lit(layout.mount[0]), lit(layout.mount[1]), lit(layout.mount[2])];
        let cameras = (0..n)
            .map(|i| {
                CameraSpec::looking_along(
                    layout.ids[i].clone(),
                    lit(layout.yaws_deg[i]),
                    lit(layout.apertures_deg[i]),
                    mount,
                    image_size,
                    i == layout.front_index,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cameras)
    }

    pub fn cameras(&self) -> &[CameraSpec<T>] {
        &self.cameras
    }
    pub fn len(&self) -> usize {
        self.cameras.len()
    }
    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
    pub fn front_index(&self) -> usize {
        self.front_index
    }
    pub fn front(&self) -> &CameraSpec<T> {
        &self.cameras[self.front_index]
    }
    pub fn image_size(&self) -> (usize, usize) {
        self.cameras[0].image_size()
    }

    /// True if some camera's horizontal FOV contains `azimuth_deg`.
    pub fn covers_azimuth(&self, azimuth_deg: T) -> bool {
        self.cameras.iter().any(|c| {
            let d = wrap_angle((azimuth_deg - c.yaw_deg()).to_radians()).to_degrees();
            d.abs() <= c.aperture_deg() / lit(2.0)
        })
    }

    /// Checks the surround-view invariants: six cameras whose horizontal
    /// FOVs cover all of 360 degrees (sampled every 0.25 degrees).
    pub fn validate_surround(&self) -> Result<()> {
        if self.cameras.len() != 6 {
            return Err(Error::Config(format!(
                "surround rig needs 6 cameras, found {}",
                self.cameras.len()
            )));
        }
        for i in 0..1440 {
            let az = lit::<T>(-180.0 + 0.25 * i as f64);
            if !self.covers_azimuth(az) {
                return Err(Error::Config(format!("rig leaves azimuth {az} uncovered")));
            }
        }
        Ok(())
    }

    pub fn to_doc(&self) -> RigDoc {
        RigDoc {
            cameras: self
                .cameras
                .iter()
                .map(|c| CameraDoc {
                    id: c.id.clone(),
                    intrinsics: flatten(&c.intrinsics),
                    rotation: flatten(&c.rotation),
                    translation: c.translation.map(|v| v.f64()),
                    image_size: [c.image_size.0, c.image_size.1],
                    is_front: c.is_front,
                    aperture_deg: c.aperture_deg.f64(),
                })
                .collect(),
        }
    }

    pub fn from_doc(doc: &RigDoc) -> Result<Self> {
        let cams = doc
            .cameras
            .iter()
            .map(|c| {
                CameraSpec::new(
                    c.id.clone(),
                    unflatten(&c.intrinsics),
                    unflatten(&c.rotation),
                    c.translation.map(lit),
                    (c.image_size[0], c.image_size[1]),
                    c.is_front,
                    lit(c.aperture_deg),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cams)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("rig serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: RigDoc = serde_json::from_str(s)?;
        Self::from_doc(&doc)
    }
}

fn flatten<T: Real>(m: &Mat3<T>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = m[i][j].f64();
        }
    }
    out
}

fn unflatten<T: Real>(v: &[f64; 9]) -> Mat3<T> {
    let mut m = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = lit(v[3 * i + j]);
        }
    }
    m
}

/// JSON form of a rig. Matrices are row-major; `rotation` maps camera
/// coordinates into the ego frame and `translation` is the camera centre in
/// the ego frame (meters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigDoc {
    pub cameras: Vec<CameraDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraDoc {
    pub id: String,
    pub intrinsics: [f64; 9],
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    /// [height, width]
    pub image_size: [usize; 2],
    pub is_front: bool,
    pub aperture_deg: f64,
}

/// Planar ego pose in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoPose<T> {
    pub position: [T; 2],
    /// Radians, normalized to (-pi, pi].
    pub yaw: T,
    pub timestamp: T,
}

impl<T: Real> EgoPose<T> {
    pub fn new(position: [T; 2], yaw: T, timestamp: T) -> Self {
        Self {
            position,
            yaw: wrap_angle(yaw),
            timestamp,
        }
    }

    pub fn world_to_ego(&self, p: [T; 2]) -> [T; 2] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.position[0];
        let dy = p[1] - self.position[1];
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn ego_to_world(&self, p: [T; 2]) -> [T; 2] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.position[0] + c * p[0] - s * p[1],
            self.position[1] + s * p[0] + c * p[1],
        ]
    }

    /// Rotates a world-frame vector into ego axes.
    pub fn world_vec_to_ego(&self, v: [T; 2]) -> [T; 2] {
        let (s, c) = self.yaw.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }

    pub fn cast<U: Real>(&self) -> EgoPose<U> {
        EgoPose {
            position: self.position.map(|v| lit(v.f64())),
            yaw: lit(self.yaw.f64()),
            timestamp: lit(self.timestamp.f64()),
        }
    }
}

/// Vertical height samples for pillar reference points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PillarSpec {
    pub z_min: f64,
    pub z_max: f64,
    pub num_heights: usize,
}

impl Default for PillarSpec {
    fn default() -> Self {
        Self {
            z_min: -1.0,
            z_max: 3.0,
            num_heights: 4,
        }
    }
}

/// Reference points stacked above one BEV cell. A single height sits at the
/// midpoint of the range; more heights are spaced endpoint-inclusive.
pub fn pillar_reference_points<T: Real>(
    cell: (usize, usize),
    grid: &BevGridSpec,
    pillar: &PillarSpec,
) -> Result<Vec<Vec3<T>>> {
    if cell.0 >= grid.rows || cell.1 >= grid.cols {
        return Err(Error::Validation(format!(
            "cell {cell:?} outside {}x{} grid",
            grid.rows, grid.cols
        )));
    }
    if pillar.num_heights == 0 {
        return Err(Error::Validation("pillar needs at least one height".into()));
    }
    let [x, y] = grid.cell_center(cell.0, cell.1);
    let n = pillar.num_heights;
    Ok((0..n)
        .map(|i| {
            let z = if n == 1 {
                0.5 * (pillar.z_min + pillar.z_max)
            } else {
                pillar.z_min + (pillar.z_max - pillar.z_min) * i as f64 / (n - 1) as f64
            };
            [lit(x), lit(y), lit(z)]
        })
        .collect())
}

/// Azimuth of a box centre in degrees, in (-180, 180]. Zero is straight
/// ahead (+x) and positive angles turn left (+y). A centre exactly at the
/// origin overlaps the ego vehicle and is reported as 0.
pub fn box_azimuth<T: Real>(center: [T; 2]) -> T {
    if center[0] == T::zero() && center[1] == T::zero() {
        return T::zero();
    }
    let deg = center[1].atan2(center[0]).to_degrees();
    if deg <= lit(-180.0) {
        lit(180.0)
    } else {
        deg
    }
}
