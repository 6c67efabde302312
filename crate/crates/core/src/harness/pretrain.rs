//! Masked-prediction pretraining on a waveform set.

use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;

use crate::acoustics::{FeatureConfig, FeatureKind, Waveform};
use crate::error::{Error, Result};
use crate::model::{
    fit_cluster_targets, pretrain_step, AdamConfig, BatchSampler, ClusterModel, MaskParams, Real, TrainState, TransformerModel, Utterance,
};
use crate::pipeline::model_input;
use crate::rng;

/// Model inputs plus k-means unit targets fit on MFCC frames of the same
/// utterances.
#[derive(Debug, Clone)]
pub struct PretrainData<T> {
    pub utterances: Vec<Utterance<T>>,
    pub clusters: ClusterModel,
}

pub fn pretraining_set<T: Real>(waves: &[Waveform], features: &FeatureConfig, k: usize, seed: u64) -> Result<PretrainData<T>> {
    if waves.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mfcc: Vec<Array2<f64>> = waves
        .par_iter()
        .map(|w| Ok(features.compute(FeatureKind::Mfcc, w)?.frames))
        .collect::<Result<_>>()?;
    let views: Vec<_> = mfcc.iter().map(|m| m.view()).collect();
    let pooled = concatenate(Axis(0), &views).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let clusters = fit_cluster_targets(&pooled, k, rng::child_seed(seed, "kmeans"))?;
    let utterances = waves
        .par_iter()
        .zip(mfcc.par_iter())
        .map(|(w, m)| {
            let features = model_input::<T>(w, features)?;
            debug_assert_eq!(features.nrows(), m.nrows());
            Ok(Utterance {
                features,
                targets: clusters.assign(m),
            })
        })
        .collect::<Result<_>>()?;
    Ok(PretrainData { utterances, clusters })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub mask: MaskParams,
}

/// Trains for `opts.steps` updates, calling `at_checkpoint(step, model,
/// last_loss)` before the first update when `0` is in `checkpoints` and after
/// every listed step otherwise. Returns the training state.
pub fn pretrain<T: Real>(
    model: &mut TransformerModel<T>,
    data: &[Utterance<T>],
    opts: &PretrainOptions,
    seed: u64,
    checkpoints: &[u64],
    mut at_checkpoint: impl FnMut(u64, &TransformerModel<T>, Option<f64>) -> Result<()>,
) -> Result<TrainState<T>> {
    if opts.batch_size == 0 || !(opts.lr > 0.0) {
        return Err(Error::InvalidConfig("pretraining needs positive batch size and lr".into()));
    }
    let adam = AdamConfig {
        lr: opts.lr,
        ..AdamConfig::default()
    };
    let mut state = TrainState::new(model, adam, seed);
    let mut sampler = BatchSampler::new(data.len(), seed, "pretrain-batches")?;
    let mut last = None;
    if checkpoints.contains(&0) {
        at_checkpoint(0, model, None)?;
    }
    for step in 1..=opts.steps {
        let idx = sampler.next_batch(opts.batch_size);
        let batch: Vec<&Utterance<T>> = idx.iter().map(|&i| &data[i]).collect();
        if let Some(l) = pretrain_step(model, &mut state, &batch, &opts.mask, opts.lr)? {
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("pretraining loss at step {step}")));
            }
            last = Some(l);
        }
        if checkpoints.contains(&step) {
            at_checkpoint(step, model, last)?;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig, Positional};
    use crate::synthcorpus::{build_corpus_with, CategorySpec, CorpusParams};

    #[test]
    fn short_run_lowers_the_loss() {
        let cats = CategorySpec::standard();
        let params = CorpusParams {
            attribute_count: 20,
            ..CorpusParams::default()
        };
        let corpus = build_corpus_with(&cats[0].clone().with_count(40), &cats, &params, 1.0, 7).unwrap();
        assert_eq!(corpus.waveforms.len(), 120);
        let waves = &corpus.waveforms[..100];
        let features = FeatureConfig::default();
        let data = pretraining_set::<f32>(waves, &features, 16, 42).unwrap();
        assert!(data.utterances.iter().all(|u| u.targets.iter().all(|&t| t < 16)));
        let cfg = ModelConfig {
            n_layers: 2,
            hidden_dim: 16,
            ffw_dim: 32,
            n_heads: 2,
            n_clusters: 16,
            input_dim: 80,
            positional: Positional::Conv { kernel: 8, groups: 2 },
        };
        let mut model = init_model::<f32>(&cfg, 42).unwrap();
        let opts = PretrainOptions {
            steps: 200,
            batch_size: 8,
            lr: 1e-3,
            mask: MaskParams { mask_prob: 0.08, span: 10 },
        };
        let mut seen = Vec::new();
        let state = pretrain(&mut model, &data.utterances, &opts, 42, &[0, 1, 200], |s, _, l| {
            seen.push((s, l.is_some()));
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![(0, false), (1, true), (200, true)]);
        let h = &state.loss_history;
        assert_eq!(h.len(), 200);
        let first: f64 = h[..10].iter().sum();
        let last: f64 = h[h.len() - 10..].iter().sum();
        assert!(h[h.len() - 1] < h[0], "{} -> {}", h[0], h[h.len() - 1]);
        assert!(last < first, "{first} -> {last}");
    }
}
