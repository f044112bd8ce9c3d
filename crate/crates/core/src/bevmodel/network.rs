//! Parameters and forward pass of the BEV encoder.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::heads::{DetOutput, SegOutput, REGRESS_DIM};
use super::{align_history, history_map, BevState, ModelConfig};
use crate::autograd::{DeformLayout, DeformPlan, Graph, ParamId, ParamStore, Tensor, Var};
use crate::camgeom::{pillar_reference_points, CameraRig, EgoPose};
use crate::error::{Error, Result};
use crate::maskcurriculum::{check_masks, PatchMask};
use crate::scalar::{lit, Real};
use crate::synthscene::{FrameSample, Image};

const LN_EPS: f64 = 1e-5;
/// Focal-loss prior: initial foreground probability of every query.
const CLASS_PRIOR: f64 = 0.01;

/// Per-camera patch masks plus the value written into masked pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraMasks {
    pub masks: Vec<Option<PatchMask>>,
    pub fill: f32,
}

struct LayerIds {
    tsa_off_w: ParamId,
    tsa_off_b: ParamId,
    tsa_attn_w: ParamId,
    tsa_attn_b: ParamId,
    tsa_val_w: ParamId,
    tsa_out_w: ParamId,
    tsa_out_b: ParamId,
    sca_off_w: ParamId,
    sca_off_b: ParamId,
    sca_attn_w: ParamId,
    sca_attn_b: ParamId,
    sca_val_w: ParamId,
    sca_out_w: ParamId,
    /// Row 0: output bias for queries that hit a camera; row 1: fallback bias.
    sca_bias: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

struct Ids {
    bb_w1: ParamId,
    bb_b1: ParamId,
    bb_w2: ParamId,
    bb_b2: ParamId,
    queries: ParamId,
    init_history: ParamId,
    layers: Vec<LayerIds>,
    det_w1: ParamId,
    det_b1: ParamId,
    det_w2: ParamId,
    det_b2: ParamId,
    seg_w: ParamId,
    seg_b: ParamId,
}

/// Values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput<T> {
    pub state: BevState<T>,
    pub det: DetOutput<T>,
    pub seg: SegOutput<T>,
}

/// Graph nodes of the final frame of a sequence.
#[derive(Debug, Clone, Copy)]
pub struct SequenceVars {
    pub bev: Var,
    pub det: Var,
    pub seg: Var,
    pub pose: EgoPose<f64>,
}

pub struct BevModel<T: Real> {
    config: ModelConfig,
    rig: CameraRig<f64>,
    params: ParamStore<T>,
    ids: Ids,
    sca_plan: Rc<DeformPlan<T>>,
    /// `N x 2` one-hot: column 0 when the query hits a camera, else column 1.
    sca_hits: Tensor<T>,
    tsa_plan: Rc<DeformPlan<T>>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform<T: Real>(&mut self, rows: usize, cols: usize, limit: f64) -> Tensor<T> {
        let data = (0..rows * cols)
            .map(|_| lit(self.rng.random_range(-limit..=limit)))
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    fn xavier<T: Real>(&mut self, rows: usize, cols: usize) -> Tensor<T> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        self.uniform(rows, cols, limit)
    }
}

/// Initial sampling offsets: points of head `h` fan out along direction
/// `2*pi*(h + 0.5)/heads` at radii 0.5, 1.0, ... feature cells.
fn offset_pattern<T: Real>(groups: usize, heads: usize, refs: usize, points: usize) -> Tensor<T> {
    let mut v = Vec::with_capacity(groups * heads * refs * points * 2);
    for _ in 0..groups {
        for h in 0..heads {
            let a = std::f64::consts::TAU * (h as f64 + 0.5) / heads as f64;
            for _ in 0..refs {
                for p in 0..points {
                    let r = 0.5 * (p + 1) as f64;
                    v.push(lit(r * a.cos()));
                    v.push(lit(r * a.sin()));
                }
            }
        }
    }
    Tensor::from_vec(1, v.len(), v)
}

impl<T: Real> BevModel<T> {
    pub fn new(config: ModelConfig, rig: &CameraRig<f64>) -> Result<Self> {
        config.validate()?;
        let (h, w) = rig.image_size();
        let p = config.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!("image {h}x{w} not divisible by patch size {p}")));
        }
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let mut ps = ParamStore::new();
        let d = config.grid.embed_dim;
        let f = config.feat_dim;
        let n = config.grid.num_cells();
        let heads = config.heads;
        let pts = config.points;
        let z = config.pillar.num_heights;
        let k = config.num_classes;
        let patch_in = p * p * 3;

        let bb_w1 = ps.add("backbone.w1", init.xavier(patch_in, f));
        let bb_b1 = ps.add("backbone.b1", Tensor::zeros(1, f));
        let bb_w2 = ps.add("backbone.w2", init.xavier(f, f));
        let bb_b2 = ps.add("backbone.b2", Tensor::zeros(1, f));
        let queries = ps.add("bev.queries", init.uniform(n, d, 0.5));
        let init_history = ps.add("bev.init_history", init.uniform(n, d, 0.5));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let name = |s: &str| format!("layer{l}.{s}");
            let tsa_off = 2 * heads * pts * 2;
            let sca_off = heads * z * pts * 2;
            layers.push(LayerIds {
                tsa_off_w: ps.add(name("tsa.offset_w"), init.uniform(2 * d, tsa_off, 0.01)),
                tsa_off_b: ps.add(name("tsa.offset_b"), offset_pattern(2, heads, 1, pts)),
                tsa_attn_w: ps.add(name("tsa.attn_w"), init.xavier(2 * d, 2 * heads * pts)),
                tsa_attn_b: ps.add(name("tsa.attn_b"), Tensor::zeros(1, 2 * heads * pts)),
                tsa_val_w: ps.add(name("tsa.value_w"), init.xavier(d, d)),
                tsa_out_w: ps.add(name("tsa.out_w"), init.xavier(d, d)),
                tsa_out_b: ps.add(name("tsa.out_b"), Tensor::zeros(1, d)),
                sca_off_w: ps.add(name("sca.offset_w"), init.uniform(d, sca_off, 0.01)),
                sca_off_b: ps.add(name("sca.offset_b"), offset_pattern(1, heads, z, pts)),
                sca_attn_w: ps.add(name("sca.attn_w"), init.xavier(d, heads * z * pts)),
                sca_attn_b: ps.add(name("sca.attn_b"), Tensor::zeros(1, heads * z * pts)),
                sca_val_w: ps.add(name("sca.value_w"), init.xavier(f, d)),
                sca_out_w: ps.add(name("sca.out_w"), init.xavier(d, d)),
                sca_bias: ps.add(name("sca.bias"), Tensor::zeros(2, d)),
                ffn_w1: ps.add(name("ffn.w1"), init.xavier(d, config.ffn_dim)),
                ffn_b1: ps.add(name("ffn.b1"), Tensor::zeros(1, config.ffn_dim)),
                ffn_w2: ps.add(name("ffn.w2"), init.xavier(config.ffn_dim, d)),
                ffn_b2: ps.add(name("ffn.b2"), Tensor::zeros(1, d)),
            });
        }
        let det_w1 = ps.add("det.w1", init.xavier(d, d));
        let det_b1 = ps.add("det.b1", Tensor::zeros(1, d));
        let det_w2 = ps.add("det.w2", init.xavier(d, k + REGRESS_DIM));
        let mut det_b2_init = Tensor::zeros(1, k + REGRESS_DIM);
        let prior: T = lit(-((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln());
        det_b2_init.data_mut()[..k].iter_mut().for_each(|v| *v = prior);
        // cos(yaw) = 1 at init.
        det_b2_init.data_mut()[k + 7] = T::one();
        let det_b2 = ps.add("det.b2", det_b2_init);
        let seg_w = ps.add("seg.w", init.xavier(d, config.num_seg_classes));
        let seg_b = ps.add("seg.b", Tensor::zeros(1, config.num_seg_classes));

        let ids = Ids {
            bb_w1,
            bb_b1,
            bb_w2,
            bb_b2,
            queries,
            init_history,
            layers,
            det_w1,
            det_b1,
            det_w2,
            det_b2,
            seg_w,
            seg_b,
        };
        let (sca_plan, sca_hits) = Self::build_sca_plan(&config, rig)?;
        let tsa_plan = Self::build_tsa_plan(&config)?;
        Ok(Self {
            config,
            rig: rig.clone(),
            params: ps,
            ids,
            sca_plan: Rc::new(sca_plan),
            sca_hits,
            tsa_plan: Rc::new(tsa_plan),
        })
    }

    fn build_sca_plan(config: &ModelConfig, rig: &CameraRig<f64>) -> Result<(DeformPlan<T>, Tensor<T>)> {
        let grid = &config.grid;
        let (h, w) = rig.image_size();
        let p = config.patch_size as f64;
        let pillars = (0..grid.rows)
            .flat_map(|r| (0..grid.cols).map(move |c| (r, c)))
            .map(|cell| pillar_reference_points::<f64>(cell, grid, &config.pillar))
            .collect::<Result<Vec<_>>>()?;
        let layout = DeformLayout {
            num_queries: grid.num_cells(),
            num_sources: rig.len(),
            src_h: h / config.patch_size,
            src_w: w / config.patch_size,
            heads: config.heads,
            dim: grid.embed_dim,
            refs: config.pillar.num_heights,
            points: config.points,
            offsets_per_source: false,
            weights_per_source: false,
        };
        let cams = rig.cameras();
        let plan = DeformPlan::new(layout, |s, q, z| {
            cams[s]
                .project_point(&pillars[q][z])
                .map(|[u, v]| [lit(u / p - 0.5), lit(v / p - 0.5)])
        })?;
        let mut hits = Tensor::zeros(grid.num_cells(), 2);
        for q in 0..grid.num_cells() {
            let col = if plan.hits(q).is_empty() { 1 } else { 0 };
            hits.row_mut(q)[col] = T::one();
        }
        Ok((plan, hits))
    }

    fn build_tsa_plan(config: &ModelConfig) -> Result<DeformPlan<T>> {
        let grid = &config.grid;
        let layout = DeformLayout {
            num_queries: grid.num_cells(),
            num_sources: 2,
            src_h: grid.rows,
            src_w: grid.cols,
            heads: config.heads,
            dim: grid.embed_dim,
            refs: 1,
            points: config.points,
            offsets_per_source: true,
            weights_per_source: true,
        };
        let cols = grid.cols;
        DeformPlan::new(layout, |_, q, _| Some([lit((q % cols) as f64), lit((q / cols) as f64)]))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn rig(&self) -> &CameraRig<f64> {
        &self.rig
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Backbone output grid (patch rows, patch cols).
    pub fn patch_grid(&self) -> (usize, usize) {
        let (h, w) = self.rig.image_size();
        (h / self.config.patch_size, w / self.config.patch_size)
    }

    /// Cameras whose image receives at least one valid pillar point of the
    /// given cell.
    pub fn cameras_hit(&self, cell: (usize, usize)) -> &[usize] {
        self.sca_plan.hits(cell.0 * self.config.grid.cols + cell.1)
    }

    /// Flattens images into `(cameras * patches) x (patch*patch*3)` rows,
    /// writing the fill value into masked patches.
    fn patchify(&self, images: &[Image], masks: Option<&CameraMasks>) -> Result<Tensor<T>> {
        if images.len() != self.rig.len() {
            return Err(Error::Validation(format!(
                "{} images for a {}-camera rig",
                images.len(),
                self.rig.len()
            )));
        }
        let (h, w) = self.rig.image_size();
        for img in images {
            if (img.height, img.width) != (h, w) {
                return Err(Error::Validation(format!(
                    "image is {}x{}, rig expects {h}x{w}",
                    img.height, img.width
                )));
            }
        }
        if let Some(m) = masks {
            check_masks(&self.rig, &m.masks, self.config.patch_size)?;
        }
        let p = self.config.patch_size;
        let (ph, pw) = self.patch_grid();
        let width = p * p * 3;
        let mut out = Tensor::zeros(images.len() * ph * pw, width);
        for (ci, img) in images.iter().enumerate() {
            let mask = masks.and_then(|m| m.masks[ci].as_ref());
            for pr in 0..ph {
                for pc in 0..pw {
                    let row = out.row_mut((ci * ph + pr) * pw + pc);
                    if mask.is_some_and(|m| m.is_masked(pr, pc)) {
                        let fill = lit(masks.map_or(0.0, |m| m.fill as f64));
                        row.iter_mut().for_each(|v| *v = fill);
                        continue;
                    }
                    for dv in 0..p {
                        for du in 0..p {
                            let px = img.get(pr * p + dv, pc * p + du);
                            let o = (dv * p + du) * 3;
                            for ch in 0..3 {
                                row[o + ch] = lit(px[ch] as f64);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let wv = g.param(&self.params, w);
        let y = g.matmul(x, wv);
        match b {
            Some(b) => {
                let bv = g.param(&self.params, b);
                g.add_bias(y, bv)
            }
            None => y,
        }
    }

    /// Per-camera patch features, stacked camera-major: `(C*ph*pw) x feat_dim`.
    pub fn backbone(&self, g: &mut Graph<T>, images: &[Image], masks: Option<&CameraMasks>) -> Result<Var> {
        let x = g.constant(self.patchify(images, masks)?);
        let h = self.linear(g, x, self.ids.bb_w1, Some(self.ids.bb_b1));
        let h = g.relu(h);
        Ok(self.linear(g, h, self.ids.bb_w2, Some(self.ids.bb_b2)))
    }

    /// Backbone features split per camera, each `(ph*pw) x feat_dim`.
    pub fn backbone_features(&self, images: &[Image], masks: Option<&CameraMasks>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new(false);
        let v = self.backbone(&mut g, images, masks)?;
        let t = g.value(v);
        let (ph, pw) = self.patch_grid();
        let plane = ph * pw;
        Ok((0..images.len())
            .map(|c| {
                let f = t.cols();
                Tensor::from_vec(plane, f, t.data()[c * plane * f..(c + 1) * plane * f].to_vec())
            })
            .collect())
    }

    /// Deformable attention over {current queries, aligned history}; a
    /// missing history is replaced by the current queries. Returns the
    /// layer-normalized residual output.
    pub fn temporal_self_attention(&self, g: &mut Graph<T>, layer: usize, q: Var, history: Option<Var>) -> Var {
        let ids = &self.ids.layers[layer];
        let h = history.unwrap_or(q);
        let cat = g.concat_cols(&[q, h]);
        let off = self.linear(g, cat, ids.tsa_off_w, Some(ids.tsa_off_b));
        let logits = self.linear(g, cat, ids.tsa_attn_w, Some(ids.tsa_attn_b));
        let attn = g.softmax_groups(logits, self.tsa_plan.weight_group());
        let vq = self.linear(g, q, ids.tsa_val_w, None);
        let vh = self.linear(g, h, ids.tsa_val_w, None);
        let value = g.concat_rows(&[vq, vh]);
        let s = g.deform(value, off, attn, self.tsa_plan.clone());
        let o = self.linear(g, s, ids.tsa_out_w, Some(ids.tsa_out_b));
        let r = g.add(q, o);
        g.layer_norm(r, lit(LN_EPS))
    }

    /// Attention output before the residual: sampled camera features for
    /// queries with hits, the fallback bias for queries without.
    pub fn spatial_cross_attention_delta(&self, g: &mut Graph<T>, layer: usize, q: Var, feats: Var) -> Var {
        let ids = &self.ids.layers[layer];
        let off = self.linear(g, q, ids.sca_off_w, Some(ids.sca_off_b));
        let logits = self.linear(g, q, ids.sca_attn_w, Some(ids.sca_attn_b));
        let attn = g.softmax_groups(logits, self.sca_plan.weight_group());
        let value = self.linear(g, feats, ids.sca_val_w, None);
        let s = g.deform(value, off, attn, self.sca_plan.clone());
        let o = self.linear(g, s, ids.sca_out_w, None);
        let ind = g.constant(self.sca_hits.clone());
        let bias = g.param(&self.params, ids.sca_bias);
        let b = g.matmul(ind, bias);
        g.add(o, b)
    }

    pub fn spatial_cross_attention(&self, g: &mut Graph<T>, layer: usize, q: Var, feats: Var) -> Var {
        let delta = self.spatial_cross_attention_delta(g, layer, q, feats);
        let r = g.add(q, delta);
        g.layer_norm(r, lit(LN_EPS))
    }

    fn ffn(&self, g: &mut Graph<T>, layer: usize, q: Var) -> Var {
        let ids = &self.ids.layers[layer];
        let h = self.linear(g, q, ids.ffn_w1, Some(ids.ffn_b1));
        let h = g.relu(h);
        let o = self.linear(g, h, ids.ffn_w2, Some(ids.ffn_b2));
        let r = g.add(q, o);
        g.layer_norm(r, lit(LN_EPS))
    }

    /// Encodes one frame given an already aligned history node.
    pub fn encode_frame(
        &self,
        g: &mut Graph<T>,
        sample: &FrameSample,
        masks: Option<&CameraMasks>,
        history: Var,
    ) -> Result<Var> {
        let feats = self.backbone(g, &sample.images, masks)?;
        let mut q = g.param(&self.params, self.ids.queries);
        for l in 0..self.config.layers {
            q = self.temporal_self_attention(g, l, q, Some(history));
            q = self.spatial_cross_attention(g, l, q, feats);
            q = self.ffn(g, l, q);
        }
        Ok(q)
    }

    /// Detection and segmentation heads.
    pub fn heads(&self, g: &mut Graph<T>, bev: Var) -> (Var, Var) {
        let h = self.linear(g, bev, self.ids.det_w1, Some(self.ids.det_b1));
        let h = g.relu(h);
        let det = self.linear(g, h, self.ids.det_w2, Some(self.ids.det_b2));
        let seg = self.linear(g, bev, self.ids.seg_w, Some(self.ids.seg_b));
        (det, seg)
    }

    fn history_node(&self, g: &mut Graph<T>, state: Option<&BevState<T>>, pose: &EgoPose<f64>) -> Var {
        match state {
            None => g.param(&self.params, self.ids.init_history),
            Some(s) => g.constant(align_history(s, pose, &self.config.grid).embeddings),
        }
    }

    fn state_of(&self, g: &Graph<T>, bev: Var, pose: EgoPose<f64>) -> BevState<T> {
        BevState {
            rows: self.config.grid.rows,
            cols: self.config.grid.cols,
            embeddings: g.value(bev).clone(),
            ego_pose: pose,
        }
    }

    /// Runs frames oldest-first, threading the BEV state as history, and
    /// puts the final frame (plus every earlier one when history is not
    /// detached) on `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        frames: &[&FrameSample],
        masks: Option<&CameraMasks>,
    ) -> Result<SequenceVars> {
        let Some((last, earlier)) = frames.split_last() else {
            return Err(Error::Validation("forward needs at least one frame".into()));
        };
        let bev = if self.config.detach_history {
            let mut state: Option<BevState<T>> = None;
            for f in earlier {
                let mut g0 = Graph::new(false);
                let h = self.history_node(&mut g0, state.as_ref(), &f.ego_pose);
                let b = self.encode_frame(&mut g0, f, masks, h)?;
                state = Some(self.state_of(&g0, b, f.ego_pose));
            }
            let h = self.history_node(g, state.as_ref(), &last.ego_pose);
            self.encode_frame(g, last, masks, h)?
        } else {
            let mut prev: Option<(Var, EgoPose<f64>)> = None;
            let mut bev = None;
            for f in frames {
                let h = match prev {
                    None => g.param(&self.params, self.ids.init_history),
                    Some((v, pose)) => {
                        let map = history_map(&self.config.grid, &pose, &f.ego_pose);
                        g.sparse_rows(v, Rc::new(map))
                    }
                };
                let b = self.encode_frame(g, f, masks, h)?;
                prev = Some((b, f.ego_pose));
                bev = Some(b);
            }
            bev.expect("at least one frame")
        };
        let (det, seg) = self.heads(g, bev);
        Ok(SequenceVars {
            bev,
            det,
            seg,
            pose: last.ego_pose,
        })
    }

    /// Splits the detection head node into logits and regression values.
    pub fn det_output(&self, g: &Graph<T>, det: Var) -> DetOutput<T> {
        let t = g.value(det);
        let k = self.config.num_classes;
        let n = t.rows();
        let mut logits = Tensor::zeros(n, k);
        let mut regress = Tensor::zeros(n, REGRESS_DIM);
        for i in 0..n {
            logits.row_mut(i).copy_from_slice(&t.row(i)[..k]);
            regress.row_mut(i).copy_from_slice(&t.row(i)[k..]);
        }
        DetOutput { logits, regress }
    }

    fn collect(&self, g: &Graph<T>, vars: &SequenceVars) -> ModelOutput<T> {
        ModelOutput {
            state: self.state_of(g, vars.bev, vars.pose),
            det: self.det_output(g, vars.det),
            seg: SegOutput {
                rows: self.config.grid.rows,
                cols: self.config.grid.cols,
                logits: g.value(vars.seg).clone(),
            },
        }
    }

    /// Gradient-free forward over a time-ordered frame list.
    pub fn forward(&self, frames: &[&FrameSample], masks: Option<&CameraMasks>) -> Result<ModelOutput<T>> {
        let mut g = Graph::new(false);
        let vars = self.forward_graph(&mut g, frames, masks)?;
        Ok(self.collect(&g, &vars))
    }

    /// Gradient-free forward of a single frame with an explicit history
    /// (`None` uses the learned initial history).
    pub fn forward_with_history(
        &self,
        frame: &FrameSample,
        history: Option<&BevState<T>>,
        masks: Option<&CameraMasks>,
    ) -> Result<ModelOutput<T>> {
        let mut g = Graph::new(false);
        let h = self.history_node(&mut g, history, &frame.ego_pose);
        let bev = self.encode_frame(&mut g, frame, masks, h)?;
        let (det, seg) = self.heads(&mut g, bev);
        let vars = SequenceVars {
            bev,
            det,
            seg,
            pose: frame.ego_pose,
        };
        Ok(self.collect(&g, &vars))
    }

    /// Named parameter tensors, widened to f64.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<f64>)> {
        self.params.iter().map(|(n, t)| (n.to_string(), t.cast())).collect()
    }

    /// Overwrites parameters from named tensors; every parameter must be
    /// present with a matching shape.
    pub fn load_named_tensors(&mut self, tensors: &[(String, Tensor<f64>)]) -> Result<()> {
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            let Some((_, t)) = tensors.iter().find(|(n, _)| *n == name) else {
                return Err(Error::Validation(format!("checkpoint lacks parameter {name}")));
            };
            if t.shape() != self.params.get(id).shape() {
                return Err(Error::Validation(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.params.get(id).shape()
                )));
            }
            *self.params.get_mut(id) = t.cast();
        }
        Ok(())
    }
}
