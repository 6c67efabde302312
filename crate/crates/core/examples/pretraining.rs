//! k-means unit targets from MFCC, a short masked-prediction run, and a
//! checkpoint round trip.

use speatforge::acoustics::FeatureConfig;
use speatforge::harness::{pretrain, pretraining_set, PretrainOptions};
use speatforge::model::{init_model, read_checkpoint, write_checkpoint, MaskParams, ModelConfig, TransformerModel};
use speatforge::synthcorpus::{build_corpus, CategorySpec};

pub fn main() -> anyhow::Result<()> {
    let corpus = build_corpus(&CategorySpec::gender().with_count(20), 1.0, 3)?;
    let mut cfg = ModelConfig::tiny();
    cfg.n_clusters = 16;
    let data = pretraining_set::<f32>(&corpus.waveforms, &FeatureConfig::default(), cfg.n_clusters, 3)?;
    println!(
        "{} utterances, k-means inertia {:.1} after {} iterations",
        data.utterances.len(),
        data.clusters.inertia(),
        data.clusters.inertia_history.len()
    );

    let mut model = init_model::<f32>(&cfg, 3)?;
    let opts = PretrainOptions {
        steps: 60,
        batch_size: 8,
        lr: 1e-3,
        mask: MaskParams::default(),
    };
    let state = pretrain(&mut model, &data.utterances, &opts, 3, &[1, 20, 40, 60], |step, _, loss| {
        println!("step {step:>3}: loss {:.3}", loss.unwrap_or(f64::NAN));
        Ok(())
    })?;
    println!("{} updates", state.step);

    let path = std::env::temp_dir().join("speatforge_tiny.spfm");
    write_checkpoint(&model, &path)?;
    let back: TransformerModel<f32> = read_checkpoint(&path)?;
    assert_eq!(back, model);
    println!(
        "checkpoint {} ({} bytes) reloads identically",
        path.display(),
        std::fs::metadata(&path)?.len()
    );
    Ok(())
}
