use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Span masking: every frame starts a masked span with probability
/// `mask_prob`; spans are `span` frames long and clipped at the end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub mask_prob: f64,
    pub span: usize,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self { mask_prob: 0.08, span: 10 }
    }
}

pub(crate) fn sample_mask_with(rng: &mut Rng, n_frames: usize, params: &MaskParams) -> Result<Vec<bool>> {
    if params.span == 0 {
        return Err(Error::InvalidParams("mask span must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&params.mask_prob) {
        return Err(Error::InvalidParams(format!("mask_prob {} outside [0, 1]", params.mask_prob)));
    }
    let mut mask = vec![false; n_frames];
    for start in 0..n_frames {
        if rng.random_bool(params.mask_prob) {
            let end = (start + params.span).min(n_frames);
            mask[start..end].iter_mut().for_each(|m| *m = true);
        }
    }
    Ok(mask)
}

/// Deterministic span mask from the `mask` stream of `seed`.
pub fn sample_mask(n_frames: usize, mask_prob: f64, span: usize, seed: u64) -> Result<Vec<bool>> {
    sample_mask_with(&mut rng::stream(seed, "mask"), n_frames, &MaskParams { mask_prob, span })
}
