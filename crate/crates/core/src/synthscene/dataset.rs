//! On-disk dataset layout.
//!
//! ```text
//! DIR/dataset.json              DatasetSpec + ordered scene names
//! DIR/rig.json                  camera rig (see camgeom::RigDoc)
//! DIR/scene_0000/manifest.json  SceneManifest
//! DIR/scene_0000/frame_0000.images.bin   [cameras, H, W, 3]
//! DIR/scene_0000/frame_0000.seg.bin      [classes, rows, cols] (0.0 / 1.0)
//! ```
//!
//! Tensor blobs: ASCII magic `MBT1`, `u32` rank, `rank` x `u32` dims, then
//! row-major `f32` values. All integers and floats are little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generate_scene, FrameSample, GtBox, Image, LaneLayout, ObjectClass, SceneSequence, SceneSpec, SegMasks, WorldModel};
use crate::bevmodel::BevGridSpec;
use crate::camgeom::{CameraRig, EgoPose, RigLayout};
use crate::error::{Error, Result};
use crate::synthscene::NUM_SEG_CLASSES;

pub const DATASET_FILE: &str = "dataset.json";
pub const RIG_FILE: &str = "rig.json";
const MANIFEST_FILE: &str = "manifest.json";
const BLOB_MAGIC: &[u8; 4] = b"MBT1";

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_blob(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    assert_eq!(dims.iter().product::<usize>(), data.len(), "blob dims do not match data");
    let mut buf = Vec::with_capacity(8 + 4 * dims.len() + 4 * data.len());
    buf.extend_from_slice(BLOB_MAGIC);
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &buf)
}

pub fn read_blob(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |d: &str| Error::format(path, d);
    if bytes.len() < 8 || &bytes[0..4] != BLOB_MAGIC {
        return Err(bad("missing MBT1 magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    let rank = u32_at(4);
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = (0..rank).map(|i| u32_at(8 + 4 * i)).collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + 4 * n {
        return Err(bad("payload size does not match dims"));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub seed: u64,
    pub scenes: usize,
    pub duration_s: f64,
    pub frame_hz: f64,
    pub min_actors: usize,
    pub max_actors: usize,
    /// [height, width]
    pub image_size: [usize; 2],
    pub grid: BevGridSpec,
    pub rig: RigLayout,
    pub classes: Vec<ObjectClass>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 60,
            duration_s: 4.0,
            frame_hz: 2.0,
            min_actors: 4,
            max_actors: 10,
            image_size: [128, 224],
            grid: BevGridSpec::new(50, 50, 50.0, 32),
            rig: RigLayout::default(),
            classes: ObjectClass::ALL.to_vec(),
        }
    }
}

impl DatasetSpec {
    pub fn rig(&self) -> Result<CameraRig<f64>> {
        let rig = CameraRig::surround((self.image_size[0], self.image_size[1]), &self.rig)?;
        rig.validate_surround()?;
        Ok(rig)
    }

    /// Per-scene spec; scene seeds derive from the dataset seed and index.
    pub fn scene_spec(&self, index: usize) -> SceneSpec {
        let seed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index as u64 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1B5_4A32_D192_ED03);
        let lane_layout = match rng.random_range(0..3) {
            0 => LaneLayout::Straight,
            1 => LaneLayout::Curve,
            _ => LaneLayout::Intersection,
        };
        SceneSpec {
            seed,
            duration_s: self.duration_s,
            frame_hz: self.frame_hz,
            num_actors: rng.random_range(self.min_actors..=self.max_actors.max(self.min_actors)),
            lane_layout,
            classes: self.classes.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 {
            return Err(Error::Validation("dataset needs at least one scene".into()));
        }
        self.scene_spec(0).validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetDoc {
    format: String,
    spec: DatasetSpec,
    scenes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub index: usize,
    pub timestamp: f64,
    pub ego_pose: EgoPose<f64>,
    pub boxes: Vec<GtBox>,
    pub images: String,
    pub bev_seg: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub format: String,
    pub spec: SceneSpec,
    /// Path of the rig document relative to the scene directory.
    pub rig: String,
    pub world: WorldModel,
    pub frames: Vec<FrameEntry>,
}

/// A generated dataset held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub rig: CameraRig<f64>,
    pub names: Vec<String>,
    pub scenes: Vec<SceneSequence>,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let rig = spec.rig()?;
        let mut scenes = Vec::with_capacity(spec.scenes);
        let mut names = Vec::with_capacity(spec.scenes);
        for i in 0..spec.scenes {
            scenes.push(generate_scene(&spec.scene_spec(i), &rig, &spec.grid)?);
            names.push(format!("scene_{i:04}"));
        }
        Ok(Self {
            spec: spec.clone(),
            rig,
            names,
            scenes,
        })
    }

    /// Scene indices for (training, held-out). Every fifth scene is held out.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.scenes.len()).partition(|i| i % 5 != 4)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        atomic_write(&dir.join(RIG_FILE), self.rig.to_json().as_bytes())?;
        for (name, scene) in self.names.iter().zip(&self.scenes) {
            save_scene(&dir.join(name), scene)?;
        }
        let doc = DatasetDoc {
            format: "monobev-dataset/1".into(),
            spec: self.spec.clone(),
            scenes: self.names.clone(),
        };
        atomic_write(&dir.join(DATASET_FILE), serde_json::to_string_pretty(&doc)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(DATASET_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let doc: DatasetDoc = serde_json::from_str(&text)?;
        let rig_path = dir.join(RIG_FILE);
        let rig_text = fs::read_to_string(&rig_path).map_err(|e| Error::io(&rig_path, e))?;
        let rig = CameraRig::from_json(&rig_text)?;
        let scenes = doc
            .scenes
            .iter()
            .map(|n| load_scene(&dir.join(n), &rig, &doc.spec.grid))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: doc.spec,
            rig,
            names: doc.scenes,
            scenes,
        })
    }
}

fn save_scene(dir: &Path, scene: &SceneSequence) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::with_capacity(scene.frames.len());
    for (i, f) in scene.frames.iter().enumerate() {
        let images = format!("frame_{i:04}.images.bin");
        let seg = format!("frame_{i:04}.seg.bin");
        let (h, w) = (f.images[0].height, f.images[0].width);
        let mut pix = Vec::with_capacity(f.images.len() * h * w * 3);
        for img in &f.images {
            pix.extend_from_slice(&img.data);
        }
        write_blob(&dir.join(&images), &[f.images.len(), h, w, 3], &pix)?;
        let segv: Vec<f32> = f.bev_seg.data.iter().map(|v| *v as f32).collect();
        write_blob(&dir.join(&seg), &[f.bev_seg.classes, f.bev_seg.rows, f.bev_seg.cols], &segv)?;
        frames.push(FrameEntry {
            index: i,
            timestamp: f.timestamp,
            ego_pose: f.ego_pose,
            boxes: f.boxes.clone(),
            images,
            bev_seg: seg,
        });
    }
    let manifest = SceneManifest {
        format: "monobev-scene/1".into(),
        spec: scene.spec.clone(),
        rig: format!("../{RIG_FILE}"),
        world: scene.world.clone(),
        frames,
    };
    atomic_write(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

fn load_scene(dir: &Path, rig: &CameraRig<f64>, grid: &BevGridSpec) -> Result<SceneSequence> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: SceneManifest = serde_json::from_str(&text)?;
    let (h, w) = rig.image_size();
    let frames = m
        .frames
        .iter()
        .map(|e| {
            let ipath: PathBuf = dir.join(&e.images);
            let (dims, pix) = read_blob(&ipath)?;
            if dims != [rig.len(), h, w, 3] {
                return Err(Error::format(&ipath, format!("image blob dims {dims:?}")));
            }
            let plane = h * w * 3;
            let images = (0..rig.len())
                .map(|c| Image {
                    height: h,
                    width: w,
                    data: pix[c * plane..(c + 1) * plane].to_vec(),
                })
                .collect();
            let spath = dir.join(&e.bev_seg);
            let (sdims, seg) = read_blob(&spath)?;
            if sdims != [NUM_SEG_CLASSES, grid.rows, grid.cols] {
                return Err(Error::format(&spath, format!("seg blob dims {sdims:?}")));
            }
            Ok(FrameSample {
                images,
                ego_pose: e.ego_pose,
                boxes: e.boxes.clone(),
                bev_seg: SegMasks {
                    classes: sdims[0],
                    rows: sdims[1],
                    cols: sdims[2],
                    data: seg.iter().map(|v| (*v > 0.5) as u8).collect(),
                },
                timestamp: e.timestamp,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneSequence {
        spec: m.spec,
        world: m.world,
        frames,
    })
}
