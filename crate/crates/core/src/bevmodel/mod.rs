//! Toy BEVFormer-style encoder: patch backbone, temporal self-attention and
//! spatial cross-attention over per-cell BEV queries, detection and
//! segmentation heads.

mod checkpoint;
mod heads;
mod network;

use serde::{Deserialize, Serialize};

use crate::autograd::{SparseRows, Tensor};
use crate::camgeom::{EgoPose, PillarSpec};
use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

pub use checkpoint::{config_hash, Checkpoint, CHECKPOINT_MAGIC};
pub use heads::{DecodeSpec, DetOutput, PredBox, SegOutput, REGRESS_DIM};
pub use network::{BevModel, CameraMasks, ModelOutput, SequenceVars};

/// BEV grid: `rows` along ego +x (row 0 is the rear edge), `cols` along
/// ego +y (col 0 is the right edge), square cells of `extent / rows` m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevGridSpec {
    pub rows: usize,
    pub cols: usize,
    /// Side length along x, meters.
    pub extent: f64,
    pub embed_dim: usize,
}

impl BevGridSpec {
    pub fn new(rows: usize, cols: usize, extent: f64, embed_dim: usize) -> Self {
        Self {
            rows,
            cols,
            extent,
            embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.embed_dim == 0 {
            return Err(Error::Config("BEV grid needs nonzero rows, cols and embed_dim".into()));
        }
        if !(self.extent.is_finite() && self.extent > 0.0) {
            return Err(Error::Config(format!("BEV extent {} must be positive", self.extent)));
        }
        Ok(())
    }

    pub fn cell_size(&self) -> f64 {
        self.extent / self.rows as f64
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    fn half_y(&self) -> f64 {
        self.cols as f64 * self.cell_size() / 2.0
    }

    pub fn cell_center(&self, r: usize, c: usize) -> [f64; 2] {
        let cs = self.cell_size();
        [
            -self.extent / 2.0 + (r as f64 + 0.5) * cs,
            -self.half_y() + (c as f64 + 0.5) * cs,
        ]
    }

    /// Continuous (row, col) position of an ego-frame point; cell centres
    /// sit at integer coordinates.
    pub fn fractional_index(&self, p: [f64; 2]) -> [f64; 2] {
        let cs = self.cell_size();
        [
            (p[0] + self.extent / 2.0) / cs - 0.5,
            (p[1] + self.half_y()) / cs - 0.5,
        ]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let hx = self.extent / 2.0;
        let hy = self.half_y();
        p[0] >= -hx && p[0] < hx && p[1] >= -hy && p[1] < hy
    }

    pub fn cell_of(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        if !self.contains(p) {
            return None;
        }
        let cs = self.cell_size();
        let r = ((p[0] + self.extent / 2.0) / cs).floor() as usize;
        let c = ((p[1] + self.half_y()) / cs).floor() as usize;
        Some((r.min(self.rows - 1), c.min(self.cols - 1)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub grid: BevGridSpec,
    /// Backbone patch size in pixels; equals the mask patch size.
    pub patch_size: usize,
    pub feat_dim: usize,
    pub heads: usize,
    pub points: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub pillar: PillarSpec,
    pub num_classes: usize,
    pub num_seg_classes: usize,
    /// Earlier frames run without gradient tracking when true.
    pub detach_history: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: BevGridSpec::new(50, 50, 50.0, 32),
            patch_size: 8,
            feat_dim: 32,
            heads: 4,
            points: 4,
            layers: 3,
            ffn_dim: 64,
            pillar: PillarSpec::default(),
            num_classes: 3,
            num_seg_classes: 2,
            detach_history: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let d = self.grid.embed_dim;
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!("embed_dim {d} not divisible by {} heads", self.heads)));
        }
        if self.patch_size == 0 || self.feat_dim == 0 || self.points == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("patch_size, feat_dim, points and ffn_dim must be positive".into()));
        }
        if self.layers == 0 || self.num_classes == 0 || self.num_seg_classes == 0 {
            return Err(Error::Config("need at least one layer, class and segmentation class".into()));
        }
        if self.pillar.num_heights == 0 || !(self.pillar.z_max >= self.pillar.z_min) {
            return Err(Error::Config("pillar needs a height and z_max >= z_min".into()));
        }
        Ok(())
    }
}

/// BEV query embeddings (`rows*cols x embed_dim`, row-major cells) and the
/// pose they are aligned to.
#[derive(Debug, Clone, PartialEq)]
pub struct BevState<T> {
    pub rows: usize,
    pub cols: usize,
    pub embeddings: Tensor<T>,
    pub ego_pose: EgoPose<f64>,
}

impl<T: Real> BevState<T> {
    pub fn embed_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.embeddings.all_finite()
    }

    /// Embedding of cell (r, c).
    pub fn cell(&self, r: usize, c: usize) -> &[T] {
        self.embeddings.row(r * self.cols + c)
    }
}

/// Bilinear resampling map taking a grid aligned to `from` onto a grid
/// aligned to `to`: world-fixed content keeps its world position. Samples
/// outside the old grid are zero.
pub fn history_map<T: Real>(grid: &BevGridSpec, from: &EgoPose<f64>, to: &EgoPose<f64>) -> SparseRows<T> {
    let n = grid.num_cells();
    if from.position == to.position && from.yaw == to.yaw {
        return SparseRows {
            in_rows: n,
            entries: (0..n).map(|i| vec![(i, T::one())]).collect(),
        };
    }
    let snap = |v: f64| {
        let r = v.round();
        if (v - r).abs() < 1e-9 {
            r
        } else {
            v
        }
    };
    let mut entries = Vec::with_capacity(n);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let world = to.ego_to_world(grid.cell_center(r, c));
            let old = from.world_to_ego(world);
            let [fr, fc] = grid.fractional_index(old).map(snap);
            let (r0, c0) = (fr.floor(), fc.floor());
            let (ar, ac) = (fr - r0, fc - c0);
            let mut row = Vec::with_capacity(4);
            for (dr, wr) in [(0.0, 1.0 - ar), (1.0, ar)] {
                for (dc, wc) in [(0.0, 1.0 - ac), (1.0, ac)] {
                    let (rr, cc) = (r0 + dr, c0 + dc);
                    let w = wr * wc;
                    if w == 0.0 || rr < 0.0 || cc < 0.0 || rr >= grid.rows as f64 || cc >= grid.cols as f64 {
                        continue;
                    }
                    row.push((rr as usize * grid.cols + cc as usize, lit::<T>(w)));
                }
            }
            entries.push(row);
        }
    }
    SparseRows { in_rows: n, entries }
}

/// Resamples a history state into the frame of `current_pose`.
pub fn align_history<T: Real>(history: &BevState<T>, current_pose: &EgoPose<f64>, grid: &BevGridSpec) -> BevState<T> {
    let map: SparseRows<T> = history_map(grid, &history.ego_pose, current_pose);
    let d = history.embed_dim();
    let mut out = Tensor::zeros(map.entries.len(), d);
    for (i, row) in map.entries.iter().enumerate() {
        let o = out.row_mut(i);
        for (j, w) in row {
            for (ov, hv) in o.iter_mut().zip(history.embeddings.row(*j)) {
                *ov += *w * *hv;
            }
        }
    }
    BevState {
        rows: history.rows,
        cols: history.cols,
        embeddings: out,
        ego_pose: *current_pose,
    }
}
