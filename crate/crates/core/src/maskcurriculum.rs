//! Masking curriculum for non-front cameras: the (mu, sigma) staircase, ratio
//! sampling, inverse block masks and the cyclic learning-rate schedule.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camgeom::CameraRig;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::synthscene::FrameSample;

pub const TOTAL_EPOCHS: usize = 30;
pub const CYCLE_EPOCHS: usize = 4;
pub const FINAL_PHASE_EPOCHS: usize = 10;
/// First epoch of the final (fully masked) phase.
pub const FINAL_PHASE_START: usize = TOTAL_EPOCHS - FINAL_PHASE_EPOCHS;
pub const MU_STEP: f64 = 0.2;
pub const RAMP_SIGMA: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskScheduleState {
    pub epoch: usize,
    pub mu: f64,
    pub sigma: f64,
}

fn check_epoch(epoch: usize) -> Result<()> {
    if epoch >= TOTAL_EPOCHS {
        return Err(Error::Validation(format!(
            "epoch {epoch} outside the {TOTAL_EPOCHS}-epoch schedule"
        )));
    }
    Ok(())
}

/// Staircase of mean masking ratios: +0.2 every four epochs, then ten
/// epochs at 1.0. The spread is zero in the first and last cycle.
pub fn mask_schedule(epoch: usize) -> Result<MaskScheduleState> {
    check_epoch(epoch)?;
    let (mu, sigma) = if epoch >= FINAL_PHASE_START {
        (1.0, 0.0)
    } else {
        let cycle = epoch / CYCLE_EPOCHS;
        let sigma = if cycle == 0 { 0.0 } else { RAMP_SIGMA };
        // Exact decimal steps rather than accumulated 0.2 additions.
        ([0.0, 0.2, 0.4, 0.6, 0.8][cycle], sigma)
    };
    Ok(MaskScheduleState { epoch, mu, sigma })
}

/// Draws a masking ratio from N(mu, sigma^2) clamped to [0, 1].
pub fn sample_ratio<R: Rng + ?Sized>(state: &MaskScheduleState, rng: &mut R) -> f64 {
    if state.sigma <= 0.0 {
        return state.mu.clamp(0.0, 1.0);
    }
    let normal = Normal::new(state.mu, state.sigma).expect("sigma is positive and finite");
    normal.sample(rng).clamp(0.0, 1.0)
}

/// Top-left corner of a square block of un-masked patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl Block {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.size && c >= self.col && c < self.col + self.size
    }
}

/// Patch-level mask over the backbone patch grid; `true` means masked.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    pub rows: usize,
    pub cols: usize,
    pub masked: Vec<bool>,
    /// Blocks un-masked by the inverse block sampler, in draw order.
    pub blocks: Vec<Block>,
    /// Patches inside the last block that were re-masked to hit the target.
    pub trimmed: Vec<(usize, usize)>,
}

impl PatchMask {
    pub fn all_visible(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            masked: vec![false; rows * cols],
            blocks: Vec::new(),
            trimmed: Vec::new(),
        }
    }

    pub fn all_masked(rows: usize, cols: usize) -> Self {
        Self {
            masked: vec![true; rows * cols],
            ..Self::all_visible(rows, cols)
        }
    }

    #[inline]
    pub fn is_masked(&self, r: usize, c: usize) -> bool {
        self.masked[r * self.cols + c]
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|m| **m).count()
    }

    pub fn achieved_ratio(&self) -> f64 {
        self.masked_count() as f64 / (self.rows * self.cols) as f64
    }

    pub fn any_masked(&self) -> bool {
        self.masked.iter().any(|m| *m)
    }
}

/// Inverse block masking: start fully masked and un-mask random
/// `block x block` squares (overlaps allowed) until enough patches are
/// visible, then re-mask patches of the last block, boundary first, so the
/// masked count equals `round(target * N)`.
pub fn inverse_block_mask<R: Rng + ?Sized>(
    patch_h: usize,
    patch_w: usize,
    target_ratio: f64,
    block_size: usize,
    rng: &mut R,
) -> Result<PatchMask> {
    if block_size == 0 || block_size > patch_h.min(patch_w) {
        return Err(Error::Validation(format!(
            "block size {block_size} does not fit a {patch_h}x{patch_w} patch grid"
        )));
    }
    if !(0.0..=1.0).contains(&target_ratio) {
        return Err(Error::Validation(format!("target ratio {target_ratio} outside [0, 1]")));
    }
    let n = patch_h * patch_w;
    let target_masked = (target_ratio * n as f64).round() as usize;
    let need_visible = n - target_masked;
    let mut mask = PatchMask::all_masked(patch_h, patch_w);
    if need_visible == 0 {
        return Ok(mask);
    }
    let mut visible = 0;
    let mut last_new: Vec<(usize, usize)> = Vec::new();
    let max_draws = 50 * n;
    let mut draws = 0;
    // Deterministic sweep used only if random draws fail to cover the grid.
    let mut sweep = (0..=patch_h - block_size)
        .step_by(block_size)
        .chain(std::iter::once(patch_h - block_size))
        .flat_map(|r| {
            (0..=patch_w - block_size)
                .step_by(block_size)
                .chain(std::iter::once(patch_w - block_size))
                .map(move |c| (r, c))
        });
    while visible < need_visible {
        let (row, col) = if draws < max_draws {
            draws += 1;
            (
                rng.random_range(0..=patch_h - block_size),
                rng.random_range(0..=patch_w - block_size),
            )
        } else {
            sweep.next().expect("sweep covers every patch")
        };
        last_new.clear();
        for r in row..row + block_size {
            for c in col..col + block_size {
                let i = r * patch_w + c;
                if mask.masked[i] {
                    mask.masked[i] = false;
                    last_new.push((r, c));
                }
            }
        }
        if last_new.is_empty() {
            continue;
        }
        visible += last_new.len();
        mask.blocks.push(Block { row, col, size: block_size });
    }
    let excess = visible - need_visible;
    if excess > 0 {
        let last = *mask.blocks.last().expect("at least one block was drawn");
        let depth = |&(r, c): &(usize, usize)| {
            let dr = (r - last.row).min(last.row + last.size - 1 - r);
            let dc = (c - last.col).min(last.col + last.size - 1 - c);
            dr.min(dc)
        };
        // Stable sort keeps row-major order among equally deep patches.
        last_new.sort_by_key(depth);
        for &(r, c) in last_new.iter().take(excess) {
            mask.masked[r * patch_w + c] = true;
            mask.trimmed.push((r, c));
        }
    }
    Ok(mask)
}

/// Random-patch baseline: exactly `round(target * N)` patches masked,
/// chosen uniformly.
pub fn random_patch_mask<R: Rng + ?Sized>(
    patch_h: usize,
    patch_w: usize,
    target_ratio: f64,
    rng: &mut R,
) -> Result<PatchMask> {
    if !(0.0..=1.0).contains(&target_ratio) {
        return Err(Error::Validation(format!("target ratio {target_ratio} outside [0, 1]")));
    }
    let n = patch_h * patch_w;
    let k = (target_ratio * n as f64).round() as usize;
    let mut mask = PatchMask::all_visible(patch_h, patch_w);
    for i in sample_indices(rng, n, k) {
        mask.masked[i] = true;
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    InverseBlock,
    RandomPatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub block_size: usize,
    pub fill_value: f32,
    /// One sampled ratio shared by all masked cameras instead of one each.
    pub shared_ratio: bool,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            kind: MaskKind::InverseBlock,
            block_size: 3,
            fill_value: 0.0,
            shared_ratio: false,
        }
    }
}

/// Per-camera masks for one training sample; the front camera gets `None`.
pub fn sample_camera_masks<T: Real, R: Rng + ?Sized>(
    state: &MaskScheduleState,
    rig: &CameraRig<T>,
    patch_grid: (usize, usize),
    spec: &MaskSpec,
    rng: &mut R,
) -> Result<Vec<Option<PatchMask>>> {
    let shared = spec.shared_ratio.then(|| sample_ratio(state, rng));
    (0..rig.len())
        .map(|c| {
            if c == rig.front_index() {
                return Ok(None);
            }
            let ratio = shared.unwrap_or_else(|| sample_ratio(state, rng));
            let m = match spec.kind {
                MaskKind::InverseBlock => {
                    inverse_block_mask(patch_grid.0, patch_grid.1, ratio, spec.block_size, rng)?
                }
                MaskKind::RandomPatch => random_patch_mask(patch_grid.0, patch_grid.1, ratio, rng)?,
            };
            Ok(Some(m))
        })
        .collect()
}

/// Masks that hide every non-front camera completely.
pub fn front_only_masks<T: Real>(rig: &CameraRig<T>, patch_grid: (usize, usize)) -> Vec<Option<PatchMask>> {
    (0..rig.len())
        .map(|c| (c != rig.front_index()).then(|| PatchMask::all_masked(patch_grid.0, patch_grid.1)))
        .collect()
}

/// Checks a mask set against the rig and the image patch grid.
pub fn check_masks<T: Real>(
    rig: &CameraRig<T>,
    masks: &[Option<PatchMask>],
    patch_size: usize,
) -> Result<()> {
    if masks.len() != rig.len() {
        return Err(Error::Validation(format!(
            "{} masks for a {}-camera rig",
            masks.len(),
            rig.len()
        )));
    }
    let (h, w) = rig.image_size();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Validation(format!(
            "image {h}x{w} not divisible into {patch_size}-pixel patches"
        )));
    }
    if let Some(m) = &masks[rig.front_index()] {
        if m.any_masked() {
            return Err(Error::Contract("the front camera must never be masked".into()));
        }
    }
    for m in masks.iter().flatten() {
        if (m.rows, m.cols) != (h / patch_size, w / patch_size) {
            return Err(Error::Validation(format!(
                "mask grid {}x{} does not match {}x{} patches",
                m.rows,
                m.cols,
                h / patch_size,
                w / patch_size
            )));
        }
    }
    Ok(())
}

/// Replaces the pixels of masked patches with `fill`.
pub fn apply_masks<T: Real>(
    sample: &FrameSample,
    rig: &CameraRig<T>,
    masks: &[Option<PatchMask>],
    patch_size: usize,
    fill: f32,
) -> Result<FrameSample> {
    check_masks(rig, masks, patch_size)?;
    let mut out = sample.clone();
    for (img, m) in out.images.iter_mut().zip(masks) {
        let Some(m) = m else { continue };
        for pr in 0..m.rows {
            for pc in 0..m.cols {
                if !m.is_masked(pr, pc) {
                    continue;
                }
                for v in pr * patch_size..(pr + 1) * patch_size {
                    for u in pc * patch_size..(pc + 1) * patch_size {
                        img.set(v, u, [fill; 3]);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrScheduleSpec {
    pub peak_lr: f64,
    pub floor_fraction: f64,
    pub final_lr: f64,
    pub cycle_epochs: usize,
    pub final_phase_epochs: usize,
}

impl Default for LrScheduleSpec {
    fn default() -> Self {
        Self {
            peak_lr: 2e-4,
            floor_fraction: 0.1,
            final_lr: 2e-7,
            cycle_epochs: CYCLE_EPOCHS,
            final_phase_epochs: FINAL_PHASE_EPOCHS,
        }
    }
}

impl LrScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        let floor = self.floor_fraction * self.peak_lr;
        if !(self.peak_lr > floor && floor > self.final_lr && self.final_lr > 0.0) {
            return Err(Error::Config(format!(
                "need peak_lr > floor_fraction*peak_lr > final_lr > 0, got {} > {} > {}",
                self.peak_lr, floor, self.final_lr
            )));
        }
        if self.cycle_epochs != CYCLE_EPOCHS || self.final_phase_epochs != FINAL_PHASE_EPOCHS {
            return Err(Error::Config(format!(
                "learning-rate cycles must align with the mask staircase ({CYCLE_EPOCHS}-epoch cycles, \
                 {FINAL_PHASE_EPOCHS}-epoch final phase)"
            )));
        }
        Ok(())
    }
}

fn cosine(from: f64, to: f64, progress: f64) -> f64 {
    to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn check_step(epoch: usize, step: usize, steps_per_epoch: usize) -> Result<()> {
    check_epoch(epoch)?;
    if steps_per_epoch == 0 || step >= steps_per_epoch {
        return Err(Error::Validation(format!(
            "step {step} outside an epoch of {steps_per_epoch} steps"
        )));
    }
    Ok(())
}

/// Cosine decay from `peak_lr` to `floor_fraction * peak_lr` inside each
/// 4-epoch cycle with a reset at every cycle start, then one cosine from
/// `peak_lr` to `final_lr` across the final ten epochs. The first step of a
/// cycle is exactly the peak and its last step exactly the end value.
pub fn cyclic_lr(epoch: usize, step: usize, steps_per_epoch: usize, spec: &LrScheduleSpec) -> Result<f64> {
    check_step(epoch, step, steps_per_epoch)?;
    let (start, len, end) = if epoch >= FINAL_PHASE_START {
        (FINAL_PHASE_START, FINAL_PHASE_EPOCHS, spec.final_lr)
    } else {
        let start = epoch / CYCLE_EPOCHS * CYCLE_EPOCHS;
        (start, CYCLE_EPOCHS, spec.floor_fraction * spec.peak_lr)
    };
    let total = len * steps_per_epoch;
    let k = (epoch - start) * steps_per_epoch + step;
    let progress = if total > 1 { k as f64 / (total - 1) as f64 } else { 0.0 };
    Ok(cosine(spec.peak_lr, end, progress))
}

/// Schedule used when cycling is disabled: one cosine from `peak_lr` to
/// `final_lr` over all 30 epochs.
pub fn single_cosine_lr(epoch: usize, step: usize, steps_per_epoch: usize, spec: &LrScheduleSpec) -> Result<f64> {
    check_step(epoch, step, steps_per_epoch)?;
    let total = TOTAL_EPOCHS * steps_per_epoch;
    let k = epoch * steps_per_epoch + step;
    Ok(cosine(spec.peak_lr, spec.final_lr, k as f64 / (total - 1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_spot_values() {
        let s = mask_schedule(0).unwrap();
        assert_eq!((s.mu, s.sigma), (0.0, 0.0));
        let s = mask_schedule(10).unwrap();
        assert_eq!((s.mu, s.sigma), (0.4, 0.2));
        let s = mask_schedule(25).unwrap();
        assert_eq!((s.mu, s.sigma), (1.0, 0.0));
        assert!(mask_schedule(30).is_err());
    }

    #[test]
    fn degenerate_ratio_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = MaskScheduleState { epoch: 20, mu: 1.0, sigma: 0.0 };
        let zero = MaskScheduleState { epoch: 0, mu: 0.0, sigma: 0.0 };
        assert_eq!(sample_ratio(&one, &mut rng), 1.0);
        assert_eq!(sample_ratio(&zero, &mut rng), 0.0);
    }

    #[test]
    fn extreme_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = inverse_block_mask(16, 28, 0.0, 3, &mut rng).unwrap();
        assert_eq!(m.achieved_ratio(), 0.0);
        let m = inverse_block_mask(16, 28, 1.0, 3, &mut rng).unwrap();
        assert_eq!(m.achieved_ratio(), 1.0);
        assert!(inverse_block_mask(2, 2, 0.5, 3, &mut rng).is_err());
    }

    #[test]
    fn single_patch_fill() {
        use crate::camgeom::RigLayout;
        use crate::synthscene::{Image, SegMasks};
        use crate::camgeom::EgoPose;
        let rig = CameraRig::<f64>::surround((16, 16), &RigLayout::default()).unwrap();
        let mut img = Image::new(16, 16);
        img.data.iter_mut().for_each(|v| *v = 0.5);
        let sample = FrameSample {
            images: vec![img; 6],
            ego_pose: EgoPose::new([0.0, 0.0], 0.0, 0.0),
            boxes: vec![],
            bev_seg: SegMasks::new(2, 1, 1),
            timestamp: 0.0,
        };
        let mut m = PatchMask::all_visible(2, 2);
        m.masked[0] = true;
        let mut masks = vec![None; 6];
        masks[1] = Some(m);
        let out = apply_masks(&sample, &rig, &masks, 8, 0.0).unwrap();
        for v in 0..16 {
            for u in 0..16 {
                let expect = if v < 8 && u < 8 { 0.0 } else { 0.5 };
                assert_eq!(out.images[1].get(v, u), [expect; 3]);
                assert_eq!(out.images[0].get(v, u), [0.5; 3]);
            }
        }
        masks[0] = Some(PatchMask::all_masked(2, 2));
        assert!(matches!(apply_masks(&sample, &rig, &masks, 8, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn lr_cycle_edges() {
        let spec = LrScheduleSpec::default();
        let spe = 7;
        assert_eq!(cyclic_lr(4, 0, spe, &spec).unwrap(), spec.peak_lr);
        let end = cyclic_lr(19, spe - 1, spe, &spec).unwrap();
        assert!((end - 0.1 * spec.peak_lr).abs() < 1e-18);
        let last = cyclic_lr(29, spe - 1, spe, &spec).unwrap();
        assert!((last - spec.final_lr).abs() < 1e-18);
        assert!(cyclic_lr(30, 0, spe, &spec).is_err());
    }
}
