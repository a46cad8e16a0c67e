use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::rng_from;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecAugmentConfig {
    pub n_time_masks: usize,
    pub time_mask_max: usize,
    pub n_freq_masks: usize,
    pub freq_mask_max: usize,
}

impl SpecAugmentConfig {
    /// Two time masks of up to 50 frames and one frequency mask of up to `dim/4` bins.
    pub fn with_defaults(dim: usize) -> Self {
        SpecAugmentConfig {
            n_time_masks: 2,
            time_mask_max: 50,
            n_freq_masks: 1,
            freq_mask_max: dim / 4,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.n_time_masks == 0 && self.n_freq_masks == 0
    }
}

/// Zeroes `n` random spans along one axis. Each span width is uniform in
/// `[0, min(max_width, extent)]` and its start uniform over valid positions.
fn spans<R: Rng>(rng: &mut R, n: usize, max_width: usize, extent: usize) -> Vec<(usize, usize)> {
    let max_w = max_width.min(extent);
    (0..n)
        .map(|_| {
            let w = rng.random_range(0..=max_w);
            let start = rng.random_range(0..=extent - w);
            (start, w)
        })
        .collect()
}

pub fn specaugment(features: &Tensor, cfg: &SpecAugmentConfig, seed: u64) -> Tensor {
    let mut out = features.clone();
    if cfg.is_identity() {
        return out;
    }
    let mut rng = rng_from(seed, &[0x5bec]);
    for (start, w) in spans(&mut rng, cfg.n_time_masks, cfg.time_mask_max, out.rows) {
        for r in start..start + w {
            out.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    for (start, w) in spans(&mut rng, cfg.n_freq_masks, cfg.freq_mask_max, out.cols) {
        for r in 0..out.rows {
            out.row_mut(r)[start..start + w].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}
