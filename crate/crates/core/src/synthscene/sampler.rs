use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training draws this many frames per sample.
pub const TRAIN_SAMPLES: usize = 3;
/// Training window length ending at the anchor, seconds.
pub const TRAIN_HORIZON_S: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Train,
    Infer,
}

/// Chooses the time-ordered frame indices fed to the model for `anchor`.
///
/// Training picks the anchor plus two distinct random frames from the
/// preceding 2 s window; inference uses the anchor and its predecessor.
/// With too little history both modes return every available frame of the
/// window instead.
pub fn temporal_sampler<R: Rng>(timestamps: &[f64], anchor: usize, mode: SamplerMode, rng: &mut R) -> Result<Vec<usize>> {
    if anchor >= timestamps.len() {
        return Err(Error::Validation(format!(
            "anchor {anchor} outside sequence of {} frames",
            timestamps.len()
        )));
    }
    match mode {
        SamplerMode::Infer => Ok(if anchor == 0 { vec![0] } else { vec![anchor - 1, anchor] }),
        SamplerMode::Train => {
            let t_end = timestamps[anchor];
            let window: Vec<usize> = (0..anchor)
                .filter(|&i| t_end - timestamps[i] <= TRAIN_HORIZON_S + 1e-9)
                .collect();
            if window.len() < TRAIN_SAMPLES - 1 {
                let mut all = window;
                all.push(anchor);
                return Ok(all);
            }
            let mut picked: Vec<usize> = index::sample(rng, window.len(), TRAIN_SAMPLES - 1)
                .into_iter()
                .map(|k| window[k])
                .collect();
            picked.push(anchor);
            picked.sort_unstable();
            Ok(picked)
        }
    }
}
