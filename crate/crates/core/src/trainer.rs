//! Curriculum training loop: schedules, dual forward passes, GT filtering,
//! held-out evaluation, checkpointing and the ablation grid.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AdamW, AdamWConfig, Graph, Grads, Tensor};
use crate::bevmodel::{config_hash, BevModel, BevState, CameraMasks, Checkpoint, DecodeSpec, ModelConfig};
use crate::error::{Error, Result};
use crate::losses::{
    bev_feature_distance, detection_loss, feature_reconstruction_loss, filter_gt_boxes, hungarian_match,
    segmentation_loss, FovFilterSpec, LossWeights,
};
use crate::maskcurriculum::{
    cyclic_lr, front_only_masks, mask_schedule, sample_camera_masks, single_cosine_lr, LrScheduleSpec, MaskKind,
    MaskScheduleState, MaskSpec, FINAL_PHASE_START, TOTAL_EPOCHS,
};
use crate::metrics::{evaluate, EvalFrame, EvalReport};
use crate::scalar::{lit, Real};
use crate::synthscene::{temporal_sampler, Dataset, FrameSample, SamplerMode, SceneSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Inverse block masking, cyclic LR and reconstruction loss.
    Ours,
    /// Five cameras fully masked from the first epoch.
    #[serde(rename = "baseline_1cam")]
    Baseline1cam,
    /// All cameras visible, no curriculum features.
    #[serde(rename = "baseline_6cam")]
    Baseline6cam,
    /// Features taken from `features`.
    Custom,
}

/// The three independently switchable method features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureFlags {
    pub inverse_block: bool,
    pub cyclic_lr: bool,
    pub reconstruction: bool,
}

impl FeatureFlags {
    pub const ALL: FeatureFlags = FeatureFlags {
        inverse_block: true,
        cyclic_lr: true,
        reconstruction: true,
    };
    pub const NONE: FeatureFlags = FeatureFlags {
        inverse_block: false,
        cyclic_lr: false,
        reconstruction: false,
    };

    /// All 8 combinations, bit 0 = inverse block, bit 1 = cyclic LR,
    /// bit 2 = reconstruction.
    pub fn grid() -> Vec<FeatureFlags> {
        (0..8u8)
            .map(|b| FeatureFlags {
                inverse_block: b & 1 != 0,
                cyclic_lr: b & 2 != 0,
                reconstruction: b & 4 != 0,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub features: FeatureFlags,
    pub seed: u64,
    /// Epochs to run, at most 30 (shorter runs stop early on the schedule).
    pub epochs: usize,
    pub batch_size: usize,
    /// Caps the number of optimizer steps per epoch; `None` uses every
    /// training anchor once.
    pub steps_per_epoch: Option<usize>,
    pub dataset: PathBuf,
    pub model: ModelConfig,
    pub lr: LrScheduleSpec,
    pub optimizer: AdamWConfig,
    pub mask: MaskSpec,
    pub loss: LossWeights,
    pub fov: FovFilterSpec,
    /// GT filter on detection targets during training (epochs >= 20 with mu = 1).
    pub gt_filter_train: bool,
    /// GT filter at evaluation.
    pub gt_filter_eval: bool,
    pub decode: DecodeSpec,
    /// Evaluate every N epochs (and always after the last); 0 = last only.
    pub eval_every: usize,
    /// Caps evaluation anchors per held-out scene; `None` uses all.
    pub eval_frames_per_scene: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Ours,
            features: FeatureFlags::ALL,
            seed: 0,
            epochs: TOTAL_EPOCHS,
            batch_size: 1,
            steps_per_epoch: None,
            dataset: PathBuf::from("data"),
            model: ModelConfig::default(),
            lr: LrScheduleSpec::default(),
            optimizer: AdamWConfig::default(),
            mask: MaskSpec::default(),
            loss: LossWeights::default(),
            fov: FovFilterSpec::default(),
            gt_filter_train: true,
            gt_filter_eval: true,
            decode: DecodeSpec::default(),
            eval_every: 1,
            eval_frames_per_scene: None,
        }
    }
}

impl TrainConfig {
    /// Reads TOML (`.toml`) or JSON (anything else); unknown keys are errors.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.epochs > TOTAL_EPOCHS {
            return Err(Error::Config(format!("epochs must be in 1..={TOTAL_EPOCHS}")));
        }
        if self.batch_size == 0 || self.steps_per_epoch == Some(0) {
            return Err(Error::Config("batch_size and steps_per_epoch must be positive".into()));
        }
        if self.loss.reconstruction < 0.0 {
            return Err(Error::Config("reconstruction weight must be non-negative".into()));
        }
        self.model.validate()?;
        self.lr.validate()?;
        self.fov.validate()
    }

    /// Feature switches implied by the mode.
    pub fn effective_features(&self) -> FeatureFlags {
        match self.mode {
            Mode::Ours => FeatureFlags::ALL,
            Mode::Baseline1cam | Mode::Baseline6cam => FeatureFlags::NONE,
            Mode::Custom => self.features,
        }
    }

    /// Masking is on for single-camera training and whenever inverse block
    /// masking or the reconstruction loss is enabled; without inverse block
    /// masking the random-patch baseline masks are used.
    pub fn masking(&self) -> Option<MaskKind> {
        let f = self.effective_features();
        match self.mode {
            Mode::Baseline1cam => Some(MaskKind::InverseBlock),
            Mode::Baseline6cam => None,
            _ if f.inverse_block => Some(MaskKind::InverseBlock),
            _ if f.reconstruction => Some(MaskKind::RandomPatch),
            _ => None,
        }
    }

    /// Masking-ratio state actually used at `epoch`.
    pub fn schedule_state(&self, epoch: usize) -> Result<MaskScheduleState> {
        let s = mask_schedule(epoch)?;
        Ok(match (self.mode, self.masking()) {
            (Mode::Baseline1cam, _) => MaskScheduleState { epoch, mu: 1.0, sigma: 0.0 },
            (_, None) => MaskScheduleState { epoch, mu: 0.0, sigma: 0.0 },
            _ => s,
        })
    }

    pub fn learning_rate(&self, epoch: usize, step: usize, steps_per_epoch: usize) -> Result<f64> {
        if self.effective_features().cyclic_lr {
            cyclic_lr(epoch, step, steps_per_epoch, &self.lr)
        } else {
            single_cosine_lr(epoch, step, steps_per_epoch, &self.lr)
        }
    }

    /// The detection targets are FOV-filtered only once the non-front
    /// cameras are fully masked in the final phase.
    pub fn gt_filter_active(&self, epoch: usize) -> Result<bool> {
        let s = self.schedule_state(epoch)?;
        Ok(self.gt_filter_train && epoch >= FINAL_PHASE_START && s.mu == 1.0 && self.masking().is_some())
    }

    pub fn hash(&self) -> String {
        config_hash(&serde_json::to_string(self).unwrap_or_default())
    }
}

/// One row of the dry-run schedule table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub epoch: usize,
    pub mu: f64,
    pub sigma: f64,
    pub lr_first: f64,
    pub lr_last: f64,
    pub gt_filter: bool,
}

/// Per-epoch (mu, sigma, lr) table without training.
pub fn schedule_table(config: &TrainConfig, steps_per_epoch: usize) -> Result<Vec<ScheduleRow>> {
    (0..config.epochs)
        .map(|e| {
            let s = config.schedule_state(e)?;
            Ok(ScheduleRow {
                epoch: e,
                mu: s.mu,
                sigma: s.sigma,
                lr_first: config.learning_rate(e, 0, steps_per_epoch)?,
                lr_last: config.learning_rate(e, steps_per_epoch - 1, steps_per_epoch)?,
                gt_filter: config.gt_filter_active(e)?,
            })
        })
        .collect()
}

/// Scalars logged for one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub mu: f64,
    pub sigma: f64,
    pub loss: f64,
    pub det_class: f64,
    pub det_center: f64,
    pub det_height: f64,
    pub det_size: f64,
    pub det_yaw: f64,
    pub det_velocity: f64,
    pub segmentation: f64,
    pub reconstruction: f64,
    pub grad_norm: f64,
    /// Forward passes run for this step (2 per sample with reconstruction).
    pub forwards: usize,
    pub gt_boxes: usize,
    pub gt_filtered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mu: f64,
    pub sigma: f64,
    pub mean_loss: f64,
    pub eval: Option<EvalReport>,
    /// Held-out mean BEV distance between front-only and all-camera passes.
    pub feature_distance: Option<f64>,
}

/// Seed for (run seed, epoch, step) streams.
fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Frames fed for (scene, anchor) at evaluation: the anchor and its predecessor.
pub fn infer_frames(scene: &SceneSequence, anchor: usize) -> Vec<&FrameSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    temporal_sampler(&scene.timestamps(), anchor, SamplerMode::Infer, &mut rng)
        .expect("anchor inside the scene")
        .into_iter()
        .map(|i| &scene.frames[i])
        .collect()
}

pub struct Trainer<'a, T: Real> {
    pub config: TrainConfig,
    pub model: BevModel<T>,
    pub optimizer: AdamW<T>,
    dataset: &'a Dataset,
    train_anchors: Vec<(usize, usize)>,
    /// Position in the schedule: next step to run.
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub global_step: u64,
    epoch_loss_sum: f64,
    log: Option<BufWriter<File>>,
    pub history: Vec<EpochRecord>,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(config: TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        if config.model.grid != dataset.spec.grid {
            return Err(Error::Config("model grid differs from the dataset grid".into()));
        }
        let model = BevModel::new(config.model.clone(), &dataset.rig)?;
        let optimizer = AdamW::new(config.optimizer.clone(), model.params());
        let (train, _) = dataset.split();
        let train_anchors = train
            .iter()
            .flat_map(|&s| (0..dataset.scenes[s].frames.len()).map(move |a| (s, a)))
            .collect::<Vec<_>>();
        if train_anchors.is_empty() {
            return Err(Error::Validation("dataset has no training frames".into()));
        }
        Ok(Self {
            config,
            model,
            optimizer,
            dataset,
            train_anchors,
            epoch: 0,
            step_in_epoch: 0,
            global_step: 0,
            epoch_loss_sum: 0.0,
            log: None,
            history: Vec::new(),
        })
    }

    /// Streams step scalars as JSON lines to `path` (appending).
    pub fn log_to(&mut self, path: &Path) -> Result<()> {
        let f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        self.log = Some(BufWriter::new(f));
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        let full = self.train_anchors.len().div_ceil(self.config.batch_size);
        self.config.steps_per_epoch.map_or(full, |s| s.min(full))
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Anchors of `step` in `epoch`, from a per-epoch seeded shuffle.
    fn batch_anchors(&self, epoch: usize, step: usize) -> Vec<(usize, usize)> {
        let mut order = self.train_anchors.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed, epoch as u64, u64::MAX)));
        let b = self.config.batch_size;
        order.into_iter().skip(step * b).take(b).collect()
    }

    fn masks_for(&self, state: &MaskScheduleState, rng: &mut ChaCha8Rng) -> Result<Option<CameraMasks>> {
        let grid = self.model.patch_grid();
        let rig = self.model.rig();
        let masks = match (self.config.mode, self.config.masking()) {
            (_, None) => return Ok(None),
            (Mode::Baseline1cam, _) => front_only_masks(rig, grid),
            (_, Some(kind)) => {
                let spec = MaskSpec { kind, ..self.config.mask };
                sample_camera_masks(state, rig, grid, &spec, rng)?
            }
        };
        Ok(Some(CameraMasks {
            masks,
            fill: self.config.mask.fill_value,
        }))
    }

    /// Forward/backward for one sample; gradients are added to `grads`.
    fn sample_step(
        &self,
        scene_idx: usize,
        anchor: usize,
        state: &MaskScheduleState,
        rng: &mut ChaCha8Rng,
        grads: &mut Grads<T>,
        log: &mut StepLog,
    ) -> Result<()> {
        let scene = &self.dataset.scenes[scene_idx];
        let idx = temporal_sampler(&scene.timestamps(), anchor, SamplerMode::Train, rng)?;
        let frames: Vec<&FrameSample> = idx.iter().map(|i| &scene.frames[*i]).collect();
        let masks = self.masks_for(state, rng)?;
        let last = frames[frames.len() - 1];
        let filtered = self.config.gt_filter_active(self.epoch)?;
        let gts = if filtered {
            filter_gt_boxes(&last.boxes, &self.config.fov)
        } else {
            last.boxes.clone()
        };
        let rec_on = self.config.effective_features().reconstruction;
        // Teacher pass: same frames, no masks, held constant.
        let teacher: Option<BevState<T>> = if rec_on {
            log.forwards += 1;
            Some(self.model.forward(&frames, None)?.state)
        } else {
            None
        };
        let mut g = Graph::new(true);
        log.forwards += 1;
        let vars = self.model.forward_graph(&mut g, &frames, masks.as_ref())?;
        let det_out = self.model.det_output(&g, vars.det);
        let w = &self.config.loss;
        let grid = &self.config.model.grid;
        let matching = hungarian_match(&det_out, &gts, grid, &w.matching)?;
        let det = detection_loss(&mut g, vars.det, self.config.model.num_classes, grid, &gts, &matching, w)?;
        let seg = segmentation_loss(&mut g, vars.seg, &last.bev_seg)?;
        let det_w = g.scale(det.total, lit(w.detection));
        let seg_w = g.scale(seg, lit(w.segmentation));
        let mut total = g.add(det_w, seg_w);
        if let Some(t) = &teacher {
            let rec = feature_reconstruction_loss(&mut g, vars.bev, t)?;
            log.reconstruction += g.value(rec).item().f64();
            let rec_w = g.scale(rec, lit(w.reconstruction));
            total = g.add(total, rec_w);
        }
        let loss = g.value(total).item().f64();
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch: self.epoch,
                step: self.step_in_epoch,
                detail: format!("non-finite loss {loss} on scene {scene_idx} frame {anchor}"),
            });
        }
        log.loss += loss;
        log.det_class += det.class;
        log.det_center += det.center;
        log.det_height += det.height;
        log.det_size += det.size;
        log.det_yaw += det.yaw;
        log.det_velocity += det.velocity;
        log.segmentation += g.value(seg).item().f64();
        log.gt_boxes += gts.len();
        log.gt_filtered |= filtered;
        grads.merge(&g.backward(total, self.model.params().len()));
        Ok(())
    }

    /// Runs the next optimizer step of the schedule.
    pub fn step(&mut self) -> Result<StepLog> {
        if self.finished() {
            return Err(Error::Validation("training already finished".into()));
        }
        let (epoch, step) = (self.epoch, self.step_in_epoch);
        let spe = self.steps_per_epoch();
        let state = self.config.schedule_state(epoch)?;
        let lr = self.config.learning_rate(epoch, step, spe)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed, epoch as u64, step as u64));
        let anchors = self.batch_anchors(epoch, step);
        let mut grads = Grads::empty(self.model.params().len());
        let mut log = StepLog {
            step: self.global_step,
            epoch,
            lr,
            mu: state.mu,
            sigma: state.sigma,
            loss: 0.0,
            det_class: 0.0,
            det_center: 0.0,
            det_height: 0.0,
            det_size: 0.0,
            det_yaw: 0.0,
            det_velocity: 0.0,
            segmentation: 0.0,
            reconstruction: 0.0,
            grad_norm: 0.0,
            forwards: 0,
            gt_boxes: 0,
            gt_filtered: false,
        };
        for &(s, a) in &anchors {
            self.sample_step(s, a, &state, &mut rng, &mut grads, &mut log)?;
        }
        let inv = 1.0 / anchors.len() as f64;
        grads.scale(lit(inv));
        for v in [
            &mut log.loss,
            &mut log.det_class,
            &mut log.det_center,
            &mut log.det_height,
            &mut log.det_size,
            &mut log.det_yaw,
            &mut log.det_velocity,
            &mut log.segmentation,
            &mut log.reconstruction,
        ] {
            *v *= inv;
        }
        if !grads.all_finite() {
            return Err(Error::Divergence {
                epoch,
                step,
                detail: "non-finite gradient".into(),
            });
        }
        let norm = self.optimizer.update(self.model.params_mut(), &mut grads, lr);
        log.grad_norm = norm.f64();
        if let Some(w) = self.log.as_mut() {
            let line = serde_json::to_string(&log)?;
            writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        self.epoch_loss_sum += log.loss;
        self.global_step += 1;
        self.step_in_epoch += 1;
        if self.step_in_epoch == spe {
            self.finish_epoch()?;
        }
        Ok(log)
    }

    fn finish_epoch(&mut self) -> Result<()> {
        let epoch = self.epoch;
        let spe = self.steps_per_epoch();
        let state = self.config.schedule_state(epoch)?;
        let last = epoch + 1 == self.config.epochs;
        let due = self.config.eval_every > 0 && (epoch + 1) % self.config.eval_every == 0;
        let (eval, dist) = if last || due {
            let (r, d) = self.evaluate_held_out()?;
            (Some(r), Some(d))
        } else {
            (None, None)
        };
        if let Some(w) = self.log.as_mut() {
            w.flush().map_err(|e| Error::io("training log", e))?;
        }
        self.history.push(EpochRecord {
            epoch,
            mu: state.mu,
            sigma: state.sigma,
            mean_loss: self.epoch_loss_sum / spe as f64,
            eval,
            feature_distance: dist,
        });
        self.epoch_loss_sum = 0.0;
        self.epoch += 1;
        self.step_in_epoch = 0;
        log::info!(
            "epoch {epoch} done: mu {:.1} loss {:.4}",
            state.mu,
            self.history.last().map_or(0.0, |h| h.mean_loss)
        );
        Ok(())
    }

    /// Held-out evaluation with front-camera-only input over two consecutive
    /// frames; also returns the mean BEV distance to the all-camera pass.
    pub fn evaluate_held_out(&self) -> Result<(EvalReport, f64)> {
        let (_, held) = self.dataset.split();
        evaluate_model(&self.model, self.dataset, &held, &self.config)
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.finished() {
            self.step()?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor<f64>)> = self
            .model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("param/{n}"), t))
            .collect();
        for (id, (m, v)) in self.optimizer.m.iter().zip(&self.optimizer.v).enumerate() {
            let name = self.model.params().name(crate::autograd::ParamId(id));
            tensors.push((format!("adam_m/{name}"), m.cast()));
            tensors.push((format!("adam_v/{name}"), v.cast()));
        }
        let meta = serde_json::json!({
            "format": "monobev-checkpoint/1",
            "dtype": T::DTYPE,
            "config": self.config,
            "config_hash": self.config.hash(),
            "rig": self.model.rig().to_doc(),
            "epoch": self.epoch,
            "step_in_epoch": self.step_in_epoch,
            "global_step": self.global_step,
            "adam_step": self.optimizer.step,
            "epoch_loss_sum": self.epoch_loss_sum,
            "history": self.history,
            "rng": "ChaCha8 streams derived from (seed, epoch, step)",
        });
        Checkpoint { meta, tensors }
    }

    /// Restores a trainer mid-run; the continuation is step-identical to an
    /// uninterrupted run.
    pub fn from_checkpoint(ck: &Checkpoint, dataset: &'a Dataset) -> Result<Self> {
        let bad = |d: &str| Error::Validation(format!("checkpoint: {d}"));
        let config: TrainConfig = serde_json::from_value(ck.meta["config"].clone())?;
        if ck.meta["config_hash"].as_str() != Some(config.hash().as_str()) {
            return Err(bad("config hash mismatch"));
        }
        let mut t = Self::new(config, dataset)?;
        t.model.load_named_tensors(&ck.with_prefix("param/"))?;
        let names: Vec<String> = t
            .model
            .params()
            .ids()
            .map(|id| t.model.params().name(id).to_string())
            .collect();
        for (i, name) in names.iter().enumerate() {
            let m = ck.get(&format!("adam_m/{name}")).ok_or_else(|| bad("missing optimizer state"))?;
            let v = ck.get(&format!("adam_v/{name}")).ok_or_else(|| bad("missing optimizer state"))?;
            t.optimizer.m[i] = m.cast();
            t.optimizer.v[i] = v.cast();
        }
        let num = |k: &str| ck.meta[k].as_u64().ok_or_else(|| bad(&format!("missing {k}")));
        t.epoch = num("epoch")? as usize;
        t.step_in_epoch = num("step_in_epoch")? as usize;
        t.global_step = num("global_step")?;
        t.optimizer.step = num("adam_step")?;
        t.epoch_loss_sum = ck.meta["epoch_loss_sum"].as_f64().ok_or_else(|| bad("missing epoch_loss_sum"))?;
        t.history = serde_json::from_value(ck.meta["history"].clone())?;
        Ok(t)
    }
}

/// Loads model weights (f64 master copy cast to `T`) from a trainer checkpoint.
pub fn model_from_checkpoint<T: Real>(ck: &Checkpoint) -> Result<(BevModel<T>, TrainConfig)> {
    let config: TrainConfig = serde_json::from_value(ck.meta["config"].clone())?;
    let rig_doc = serde_json::from_value(ck.meta["rig"].clone())?;
    let rig = crate::camgeom::CameraRig::from_doc(&rig_doc)?;
    let mut model = BevModel::new(config.model.clone(), &rig)?;
    model.load_named_tensors(&ck.with_prefix("param/"))?;
    Ok((model, config))
}

/// Predictions and GT for every evaluation anchor of the given scenes,
/// using front-camera-only input. Also returns, per anchor, the front-only
/// and all-camera BEV states' mean squared distance.
pub fn evaluate_model<T: Real>(
    model: &BevModel<T>,
    dataset: &Dataset,
    scenes: &[usize],
    config: &TrainConfig,
) -> Result<(EvalReport, f64)> {
    let front = CameraMasks {
        masks: front_only_masks(model.rig(), model.patch_grid()),
        fill: config.mask.fill_value,
    };
    let mut frames = Vec::new();
    let mut segs = Vec::new();
    let mut dist_sum = 0.0;
    let grid = &config.model.grid;
    for &s in scenes {
        let scene = &dataset.scenes[s];
        let anchors: Vec<usize> = (1..scene.frames.len()).collect();
        let take = config.eval_frames_per_scene.unwrap_or(anchors.len());
        for &a in anchors.iter().take(take) {
            let input = infer_frames(scene, a);
            let out = model.forward(&input, Some(&front))?;
            let teacher = model.forward(&input, None)?;
            dist_sum += bev_feature_distance(&out.state, &teacher.state)?;
            frames.push(EvalFrame {
                preds: out.det.decode(grid, &config.decode),
                gts: scene.frames[a].boxes.clone(),
            });
            segs.push((out.seg.threshold(), scene.frames[a].bev_seg.clone()));
        }
    }
    if frames.is_empty() {
        return Err(Error::Validation("no evaluation frames".into()));
    }
    let pairs: Vec<_> = segs.iter().map(|(p, g)| (p, g)).collect();
    let fov = config.gt_filter_eval.then_some(&config.fov);
    let report = evaluate(&frames, &pairs, config.model.num_classes, fov)?;
    Ok((report, dist_sum / frames.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub final_report: EvalReport,
    pub final_feature_distance: f64,
    pub checkpoint: Option<PathBuf>,
}

/// Full run. With `out_dir`, writes `train_log.jsonl`, `final.ckpt` and
/// `history.json` there; a divergence leaves `diverged.ckpt` behind.
pub fn run_training<T: Real>(config: &TrainConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::<T>::new(config.clone(), dataset)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log = dir.join("train_log.jsonl");
        if log.exists() {
            fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
        }
        trainer.log_to(&log)?;
    }
    while !trainer.finished() {
        if let Err(e) = trainer.step() {
            if let (Error::Divergence { .. }, Some(dir)) = (&e, out_dir) {
                trainer.to_checkpoint().save(&dir.join("diverged.ckpt"))?;
            }
            return Err(e);
        }
    }
    let last = trainer.history.last().expect("at least one epoch");
    let final_report = last.eval.clone().expect("last epoch is evaluated");
    let final_feature_distance = last.feature_distance.unwrap_or(f64::NAN);
    let checkpoint = match out_dir {
        Some(dir) => {
            let p = dir.join("final.ckpt");
            trainer.to_checkpoint().save(&p)?;
            crate::synthscene::atomic_write(
                &dir.join("history.json"),
                serde_json::to_string_pretty(&trainer.history)?.as_bytes(),
            )?;
            Some(p)
        }
        None => None,
    };
    Ok(TrainOutcome {
        history: trainer.history,
        final_report,
        final_feature_distance,
        checkpoint,
    })
}

/// Column order of the ablation table.
pub const ABLATION_COLUMNS: [&str; 11] = [
    "inverse_block",
    "cyclic_lr",
    "reconstruction",
    "NDS",
    "mAP",
    "mATE",
    "mASE",
    "mAOE",
    "mAVE",
    "mAAE",
    "mIoU",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub features: FeatureFlags,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

impl AblationRow {
    /// Values in [`ABLATION_COLUMNS`] order; metrics are NaN for failed rows.
    pub fn values(&self) -> [f64; 11] {
        let b = |v: bool| if v { 1.0 } else { 0.0 };
        let f = &self.features;
        let mut out = [f64::NAN; 11];
        out[0] = b(f.inverse_block);
        out[1] = b(f.cyclic_lr);
        out[2] = b(f.reconstruction);
        if let Some(r) = &self.report {
            let t = r.tp_errors;
            out[3..].copy_from_slice(&[r.nds, r.map, t.ate, t.ase, t.aoe, t.ave, t.aae, r.miou]);
        }
        out
    }
}

/// Trains all 8 feature combinations with the base config's seed. A failed
/// row records its error and the grid continues.
pub fn run_ablation_grid<T: Real>(base: &TrainConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Vec<AblationRow> {
    FeatureFlags::grid()
        .into_iter()
        .enumerate()
        .map(|(i, features)| {
            let cfg = TrainConfig {
                mode: Mode::Custom,
                features,
                ..base.clone()
            };
            let dir = out_dir.map(|d| d.join(format!("row_{i}")));
            match run_training::<T>(&cfg, dataset, dir.as_deref()) {
                Ok(o) => AblationRow {
                    features,
                    report: Some(o.final_report),
                    error: None,
                },
                Err(e) => AblationRow {
                    features,
                    report: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Renders ablation rows as CSV with a header in [`ABLATION_COLUMNS`] order.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = ABLATION_COLUMNS.join(",");
    s.push('\n');
    for r in rows {
        let v = r.values();
        let cells: Vec<String> = v
            .iter()
            .enumerate()
            .map(|(i, x)| if i < 3 { format!("{}", *x as u8) } else { format!("{x:.4}") })
            .collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}
