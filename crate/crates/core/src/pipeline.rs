//! Glue from waveforms to [`EmbeddingSequence`]s and [`BiasTest`]s.

use ndarray::Array2;
use rayon::prelude::*;

use crate::acoustics::{FeatureConfig, FeatureKind, FrameMatrix, Waveform};
use crate::error::{Error, Result};
use crate::model::{forward, Real, TransformerModel};
use crate::speat::{BiasTest, EmbeddingSequence};
use crate::synthcorpus::{Corpus, Role};

/// Where embeddings come from: a classic front-end or a model.
pub enum Embedder<'a, T> {
    Feature(FeatureKind),
    Model(&'a TransformerModel<T>),
}

/// Per-utterance standardized log-mel frames: the model's input.
pub fn model_input<T: Real>(w: &Waveform, features: &FeatureConfig) -> Result<Array2<T>> {
    let m = features.compute(FeatureKind::LogMel, w)?.standardized();
    Ok(m.frames.mapv(T::lit))
}

pub fn feature_layers(w: &Waveform, kind: FeatureKind, features: &FeatureConfig) -> Result<Vec<Array2<f64>>> {
    let FrameMatrix { frames, .. } = features.compute(kind, w)?;
    Ok(vec![frames])
}

pub fn model_layers<T: Real>(model: &TransformerModel<T>, w: &Waveform, features: &FeatureConfig) -> Result<Vec<Array2<f64>>> {
    let reps = forward(model, &model_input::<T>(w, features)?)?;
    let layers: Vec<Array2<f64>> = reps.into_iter().map(|r| r.mapv(|v| v.as_f64())).collect();
    if layers.iter().any(|l| l.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("model representation".into()));
    }
    Ok(layers)
}

impl<T: Real> Embedder<'_, T> {
    pub fn layers(&self, w: &Waveform, features: &FeatureConfig) -> Result<Vec<Array2<f64>>> {
        match self {
            Embedder::Feature(kind) => feature_layers(w, *kind, features),
            Embedder::Model(m) => model_layers(m, w, features),
        }
    }
}

/// Embeds every stimulus of `corpus` (in parallel) and assembles the test.
pub fn bias_test<T: Real>(corpus: &Corpus, embedder: &Embedder<'_, T>, features: &FeatureConfig) -> Result<BiasTest> {
    let seqs: Vec<EmbeddingSequence> = corpus
        .manifest
        .stimuli
        .par_iter()
        .zip(corpus.waveforms.par_iter())
        .map(|(e, w)| EmbeddingSequence::new(embedder.layers(w, features)?, e.id.clone(), e.group.clone()))
        .collect::<Result<_>>()?;
    let mut sets: [Vec<EmbeddingSequence>; 4] = Default::default();
    for (e, s) in corpus.manifest.stimuli.iter().zip(seqs) {
        let slot = Role::ALL.iter().position(|&r| r == e.role).expect("known role");
        sets[slot].push(s);
    }
    let [x, y, a, b] = sets;
    BiasTest::new(corpus.manifest.category.clone(), x, y, a, b)
}
