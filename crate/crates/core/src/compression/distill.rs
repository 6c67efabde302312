//! Layer-to-layer distillation into a shallower student.

use ndarray::{Array2, ArrayViewMutD, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::forward::{linear, linear_backward};
use crate::model::train::adam_update;
use crate::model::{backward, forward, forward_cached, init_model, AdamConfig, BatchSampler, Linear, Real, TrainState, TransformerModel};
use crate::rng;

/// Teacher representation levels predicted by default: `⌈n_l/3⌉` and
/// `n_l` (4 and 12 for a 12-layer teacher).
pub fn default_targets(teacher_layers: usize) -> Vec<usize> {
    let mut t = vec![teacher_layers.div_ceil(3).max(1), teacher_layers];
    t.dedup();
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    /// Teacher representation indices (0 = projection output).
    pub targets: Option<Vec<usize>>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 2e-4,
            batch_size: 24,
            targets: None,
        }
    }
}

/// A shallow encoder plus one `d_m -> d_m` prediction head per teacher
/// target, all reading the student's last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel<T> {
    pub model: TransformerModel<T>,
    pub heads: Vec<Linear<T>>,
    pub targets: Vec<usize>,
}

impl<T: Real> StudentModel<T> {
    /// Copies the teacher's front end and first layers; layers beyond the
    /// teacher's depth and the prediction heads are freshly initialised.
    pub fn from_teacher(teacher: &TransformerModel<T>, n_layers: usize, targets: Vec<usize>, seed: u64) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::InvalidConfig("need at least one distillation target".into()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t > teacher.config.n_layers) {
            return Err(Error::InvalidConfig(format!(
                "target layer {t} beyond teacher depth {}",
                teacher.config.n_layers
            )));
        }
        let mut cfg = teacher.config;
        cfg.n_layers = n_layers;
        let mut model = init_model::<T>(&cfg, rng::child_seed(seed, "student"))?;
        let (tw, sw) = (&teacher.weights, &mut model.weights);
        sw.input_proj = tw.input_proj.clone();
        sw.mask_embed = tw.mask_embed.clone();
        sw.pos_conv = tw.pos_conv.clone();
        sw.final_ln = tw.final_ln.clone();
        sw.head = tw.head.clone();
        let shared = n_layers.min(teacher.config.n_layers);
        for l in 0..shared {
            sw.blocks[l] = tw.blocks[l].clone();
        }
        let d = cfg.hidden_dim;
        let heads_model = init_model::<T>(&cfg, rng::child_seed(seed, "distill-heads"))?;
        // reuse the q-projection init of fresh blocks: N(0, 1/d), zero bias
        let heads = (0..targets.len())
            .map(|i| heads_model.weights.blocks[i % n_layers].q.clone())
            .collect::<Vec<_>>();
        debug_assert!(heads.iter().all(|h| h.weight.dim() == (d, d)));
        Ok(Self { model, heads, targets })
    }

    /// Sets every head to the identity map.
    pub fn identity_heads(&mut self) {
        let d = self.model.config.hidden_dim;
        for h in &mut self.heads {
            h.weight = Array2::eye(d);
            h.bias.fill(T::zero());
        }
    }

    /// Head predictions for one input.
    pub fn predict(&self, input: &Array2<T>) -> Result<Vec<Array2<T>>> {
        let reps = forward(&self.model, input)?;
        let last = reps.last().expect("at least one rep");
        Ok(self.heads.iter().map(|h| linear(last, h)).collect())
    }
}

/// `mean |p - y| + mean_t (1 - cos(p_t, y_t))` and its gradient in `p`.
pub fn distill_loss<T: Real>(pred: &Array2<T>, target: &Array2<T>) -> (f64, Array2<T>) {
    let (n_t, n_d) = pred.dim();
    let n = (n_t * n_d) as f64;
    let mut grad = Array2::<T>::zeros(pred.dim());
    let mut l1 = 0.0;
    let mut cos_term = 0.0;
    for ((p, y), mut g) in pred
        .axis_iter(Axis(0))
        .zip(target.axis_iter(Axis(0)))
        .zip(grad.axis_iter_mut(Axis(0)))
    {
        let pv: Vec<f64> = p.iter().map(|v| v.as_f64()).collect();
        let yv: Vec<f64> = y.iter().map(|v| v.as_f64()).collect();
        let pn = pv.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let yn = yv.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let dot: f64 = pv.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let cos = dot / (pn * yn);
        cos_term += 1.0 - cos;
        for ((gi, &a), &b) in g.iter_mut().zip(&pv).zip(&yv) {
            l1 += (a - b).abs();
            let d_l1 = if a > b {
                1.0
            } else if a < b {
                -1.0
            } else {
                0.0
            } / n;
            let d_cos = -(b / (pn * yn) - cos * a / (pn * pn)) / n_t as f64;
            *gi = T::lit(d_l1 + d_cos);
        }
    }
    (l1 / n + cos_term / n_t as f64, grad)
}

fn tensors<T>(l: &mut Linear<T>) -> [ArrayViewMutD<'_, T>; 2] {
    let Linear { weight, bias } = l;
    [weight.view_mut().into_dyn(), bias.view_mut().into_dyn()]
}

struct Grads<T> {
    model: crate::model::Weights<T>,
    heads: Vec<Linear<T>>,
}

/// Loss summed over targets for one utterance, with gradients.
fn utterance_grads<T: Real>(s: &StudentModel<T>, input: &Array2<T>, teacher_reps: &[Array2<T>]) -> Result<(f64, Grads<T>)> {
    let cache = forward_cached(&s.model, input, None)?;
    let last = cache.reps.last().expect("at least one rep");
    let d = s.model.config.hidden_dim;
    let mut dlast = Array2::<T>::zeros(last.dim());
    let mut head_grads: Vec<Linear<T>> = s.heads.iter().map(|_| Linear::zeros(d, d)).collect();
    let mut loss = 0.0;
    for ((h, g), target) in s.heads.iter().zip(&mut head_grads).zip(teacher_reps) {
        let pred = linear(last, h);
        let (l, dpred) = distill_loss(&pred, target);
        loss += l;
        dlast += &linear_backward(last.view(), &dpred, h, g);
    }
    let mut d_reps = vec![None; s.model.config.n_layers + 1];
    d_reps[s.model.config.n_layers] = Some(dlast);
    Ok((
        loss,
        Grads {
            model: backward(&s.model, &cache, &d_reps),
            heads: head_grads,
        },
    ))
}

/// Teacher representations at `targets` for every input; the teacher is
/// only read.
pub fn teacher_targets<T: Real>(teacher: &TransformerModel<T>, inputs: &[Array2<T>], targets: &[usize]) -> Result<Vec<Vec<Array2<T>>>> {
    inputs
        .par_iter()
        .map(|x| {
            let reps = forward(teacher, x)?;
            Ok(targets.iter().map(|&t| reps[t].clone()).collect())
        })
        .collect()
}

/// Mean distillation loss of `student` over `inputs`.
pub fn distill_eval<T: Real>(student: &StudentModel<T>, inputs: &[Array2<T>], teacher_reps: &[Vec<Array2<T>>]) -> Result<f64> {
    let losses: Vec<f64> = inputs
        .par_iter()
        .zip(teacher_reps.par_iter())
        .map(|(x, ys)| {
            let preds = student.predict(x)?;
            Ok(preds.iter().zip(ys).map(|(p, y)| distill_loss(p, y).0).sum())
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Trains a `student_layers`-deep student against the frozen teacher.
/// Returns the student and the per-step batch losses.
pub fn distill<T: Real>(
    teacher: &TransformerModel<T>,
    student_layers: usize,
    inputs: &[Array2<T>],
    cfg: &DistillConfig,
    seed: u64,
) -> Result<(StudentModel<T>, Vec<f64>)> {
    if inputs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let targets = cfg.targets.clone().unwrap_or_else(|| default_targets(teacher.config.n_layers));
    let mut student = StudentModel::from_teacher(teacher, student_layers, targets, seed)?;
    let teacher_reps = teacher_targets(teacher, inputs, &student.targets)?;
    let losses = distill_train(&mut student, inputs, &teacher_reps, cfg, seed)?;
    Ok((student, losses))
}

/// The optimisation loop of [`distill`] on precomputed teacher targets.
pub fn distill_train<T: Real>(
    student: &mut StudentModel<T>,
    inputs: &[Array2<T>],
    teacher_reps: &[Vec<Array2<T>>],
    cfg: &DistillConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig("distillation needs positive batch size and lr".into()));
    }
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = TrainState::new(&student.model, adam, seed);
    let d = student.model.config.hidden_dim;
    let mut head_m: Vec<Linear<T>> = student.heads.iter().map(|_| Linear::zeros(d, d)).collect();
    let mut head_v = head_m.clone();
    let mut sampler = BatchSampler::new(inputs.len(), seed, "distill-batches")?;
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for _ in 0..cfg.steps {
        let batch = sampler.next_batch(cfg.batch_size);
        let s = &*student;
        let parts: Vec<(f64, Grads<T>)> = batch
            .par_iter()
            .map(|&i| utterance_grads(s, &inputs[i], &teacher_reps[i]))
            .collect::<Result<_>>()?;
        let scale = T::lit(1.0 / batch.len() as f64);
        let mut iter = parts.into_iter();
        let (mut loss, mut total) = iter.next().expect("non-empty batch");
        for (l, g) in iter {
            loss += l;
            total.model.add_assign(&g.model);
            for (a, b) in total.heads.iter_mut().zip(&g.heads) {
                a.weight += &b.weight;
                a.bias += &b.bias;
            }
        }
        total.model.scale(scale);
        crate::model::adam_step(&mut student.model, &mut state, &total.model, cfg.lr);
        for (((h, g), m), v) in student.heads.iter_mut().zip(&total.heads).zip(&mut head_m).zip(&mut head_v) {
            let mut g_scaled = g.clone();
            Zip::from(&mut g_scaled.weight).for_each(|x| *x *= scale);
            Zip::from(&mut g_scaled.bias).for_each(|x| *x *= scale);
            let gs = [g_scaled.weight.view().into_dyn(), g_scaled.bias.view().into_dyn()];
            for (((mut p, g), mut m), mut v) in tensors(h).into_iter().zip(gs).zip(tensors(m)).zip(tensors(v)) {
                adam_update(&mut p, &g, &mut m, &mut v, &adam, state.step, cfg.lr);
            }
        }
        losses.push(loss / batch.len() as f64);
    }
    Ok(losses)
}
