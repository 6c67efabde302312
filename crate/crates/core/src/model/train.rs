use ndarray::{Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{backward, forward_cached, head_backward, head_forward};
use super::masking::{sample_mask_with, MaskParams};
use super::{Real, TransformerModel, Weights};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// One pretraining utterance: model input frames and frame-aligned cluster
/// targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance<T> {
    pub features: Array2<T>,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub step: u64,
    pub adam: AdamConfig,
    pub m: Weights<T>,
    pub v: Weights<T>,
    pub rng: Rng,
    pub loss_history: Vec<f64>,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: &TransformerModel<T>, adam: AdamConfig, seed: u64) -> Self {
        Self {
            step: 0,
            adam,
            m: Weights::zeros(&model.config),
            v: Weights::zeros(&model.config),
            rng: rng::stream(seed, "mask"),
            loss_history: Vec::new(),
        }
    }
}

/// One bias-corrected Adam update of a single tensor. `step` is 1-based.
pub(crate) fn adam_update<T: Real>(
    p: &mut ArrayViewMutD<'_, T>,
    g: &ArrayViewD<'_, T>,
    m: &mut ArrayViewMutD<'_, T>,
    v: &mut ArrayViewMutD<'_, T>,
    adam: &AdamConfig,
    step: u64,
    lr: f64,
) {
    let t = step as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    let (b1, b2) = (T::lit(adam.beta1), T::lit(adam.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - adam.beta1), T::lit(1.0 - adam.beta2));
    let step_size = T::lit(lr / c1);
    let c2_inv = T::lit(1.0 / c2);
    let eps = T::lit(adam.eps);
    ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        *m = b1 * *m + one_b1 * g;
        *v = b2 * *v + one_b2 * g * g;
        let vhat = *v * c2_inv;
        *p -= step_size * *m / (vhat.sqrt() + eps);
    });
}

/// Bias-corrected Adam update, followed by re-applying the pruning masks.
pub fn adam_step<T: Real>(model: &mut TransformerModel<T>, state: &mut TrainState<T>, grads: &Weights<T>, lr: f64) {
    state.step += 1;
    for (((mut p, g), mut m), mut v) in model
        .weights
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        adam_update(&mut p, &g, &mut m, &mut v, &state.adam, state.step, lr);
    }
    model.apply_masks();
}

/// Endless batches of corpus indices: each epoch is a fresh seeded shuffle.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64, stream: &str) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self {
            n,
            order: Vec::new(),
            pos: 0,
            rng: rng::stream(seed, stream),
        })
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order = (0..self.n).collect();
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Summed cross-entropy over the selected frames and its gradient with
/// respect to the logits. Computed in f64 regardless of `T`.
fn cross_entropy_sum<T: Real>(logits: &Array2<T>, targets: &[usize], select: &[bool]) -> (f64, usize, Array2<T>) {
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0;
    let mut count = 0;
    for (t, (row, mut grow)) in logits.axis_iter(Axis(0)).zip(grad.axis_iter_mut(Axis(0))).enumerate() {
        if !select[t] {
            continue;
        }
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() + max - row[targets[t]].as_f64();
        for (k, (g, e)) in grow.iter_mut().zip(&exps).enumerate() {
            let p = e / z;
            *g = T::lit(if k == targets[t] { p - 1.0 } else { p });
        }
        count += 1;
    }
    (total, count, grad)
}

/// Mean cross-entropy over the selected frames and the gradient of that
/// mean.
pub fn cross_entropy<T: Real>(logits: &Array2<T>, targets: &[usize], select: &[bool]) -> (f64, Array2<T>) {
    let (sum, count, mut grad) = cross_entropy_sum(logits, targets, select);
    if count == 0 {
        return (0.0, grad);
    }
    grad.mapv_inplace(|g| g / T::lit(count as f64));
    (sum / count as f64, grad)
}

fn check_utterance<T: Real>(model: &TransformerModel<T>, u: &Utterance<T>) -> Result<()> {
    if u.targets.len() != u.features.nrows() {
        return Err(Error::DimensionMismatch {
            expected: u.features.nrows(),
            got: u.targets.len(),
            context: "targets must be frame-aligned",
        });
    }
    if let Some(&bad) = u.targets.iter().find(|&&t| t >= model.config.n_clusters) {
        return Err(Error::DimensionMismatch {
            expected: model.config.n_clusters,
            got: bad,
            context: "cluster target out of range",
        });
    }
    Ok(())
}

/// Summed masked-frame cross-entropy of one utterance, the number of masked
/// frames, and the gradient of the sum.
pub fn masked_prediction_loss<T: Real>(
    model: &TransformerModel<T>,
    u: &Utterance<T>,
    frame_mask: &[bool],
) -> Result<(f64, usize, Weights<T>)> {
    check_utterance(model, u)?;
    let cache = forward_cached(model, &u.features, Some(frame_mask))?;
    let (logits, head_cache) = head_forward(&model.weights, cache.reps.last().expect("at least one rep"));
    let (loss, count, dlogits) = cross_entropy_sum(&logits, &u.targets, frame_mask);
    let mut grads = Weights::zeros(&model.config);
    if count == 0 {
        return Ok((0.0, 0, grads));
    }
    let dlast = head_backward(&model.weights, &head_cache, &dlogits, &mut grads);
    let mut d_reps = vec![None; model.config.n_layers + 1];
    d_reps[model.config.n_layers] = Some(dlast);
    grads.add_assign(&backward(model, &cache, &d_reps));
    Ok((loss, count, grads))
}

/// One masked-prediction update over `batch`. Returns the pre-update mean
/// loss over masked frames, or `None` (and no update) if the sampled masks
/// cover no frame.
pub fn pretrain_step<T: Real>(
    model: &mut TransformerModel<T>,
    state: &mut TrainState<T>,
    batch: &[&Utterance<T>],
    mask: &MaskParams,
    lr: f64,
) -> Result<Option<f64>> {
    let masks: Vec<Vec<bool>> = batch
        .iter()
        .map(|u| sample_mask_with(&mut state.rng, u.features.nrows(), mask))
        .collect::<Result<_>>()?;
    let model_ref = &*model;
    let parts: Vec<(f64, usize, Weights<T>)> = batch
        .par_iter()
        .zip(masks.par_iter())
        .map(|(u, m)| masked_prediction_loss(model_ref, u, m))
        .collect::<Result<_>>()?;
    let count: usize = parts.iter().map(|p| p.1).sum();
    if count == 0 {
        return Ok(None);
    }
    let mut grads = Weights::zeros(&model.config);
    let mut loss = 0.0;
    for (l, _, g) in &parts {
        loss += l;
        grads.add_assign(g);
    }
    grads.scale(T::lit(1.0 / count as f64));
    let loss = loss / count as f64;
    adam_step(model, state, &grads, lr);
    state.loss_history.push(loss);
    Ok(Some(loss))
}
