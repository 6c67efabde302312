//! Distils shallow students from a tiny teacher and compares their bias.

use speatforge::acoustics::FeatureConfig;
use speatforge::compression::{default_targets, distill, DistillConfig};
use speatforge::harness::pretraining_set;
use speatforge::model::{init_model, ModelConfig};
use speatforge::pipeline::{bias_test, Embedder};
use speatforge::speat::effect_size;
use speatforge::synthcorpus::{build_corpus, CategorySpec};

pub fn main() -> anyhow::Result<()> {
    let features = FeatureConfig::default();
    let corpus = build_corpus(&CategorySpec::native().with_count(10), 1.0, 11)?;
    let mut cfg = ModelConfig::tiny();
    cfg.n_layers = 6;
    let teacher = init_model::<f32>(&cfg, 11)?;
    let data = pretraining_set::<f32>(&corpus.waveforms, &features, cfg.n_clusters, 11)?;
    let inputs: Vec<_> = data.utterances.iter().map(|u| u.features.clone()).collect();
    println!("teacher targets: layers {:?}", default_targets(cfg.n_layers));

    let d_teacher = effect_size(&bias_test(&corpus, &Embedder::Model(&teacher), &features)?)?.d_aggregate;
    println!("teacher ({} layers): d = {d_teacher:+.3}", cfg.n_layers);
    let dc = DistillConfig {
        steps: 20,
        batch_size: 8,
        ..DistillConfig::default()
    };
    for layers in [2, 4] {
        let (student, losses) = distill(&teacher, layers, &inputs, &dc, 11)?;
        let d = effect_size(&bias_test(&corpus, &Embedder::Model(&student.model), &features)?)?.d_aggregate;
        println!(
            "student ({layers} layers): loss {:.3} -> {:.3}, d = {d:+.3}",
            losses[0],
            losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
