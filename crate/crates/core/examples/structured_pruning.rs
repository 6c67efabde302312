//! Head and FFW-row pruning of a tiny model: scores, the scaled schedules,
//! and bias measured after each event.

use speatforge::acoustics::FeatureConfig;
use speatforge::compression::{head_scores, run_schedule, Finetuner, PruneSchedule};
use speatforge::harness::pretraining_set;
use speatforge::model::{init_model, MaskParams, ModelConfig};
use speatforge::pipeline::{bias_test, Embedder};
use speatforge::speat::effect_size;
use speatforge::synthcorpus::{build_corpus, CategorySpec};

pub fn main() -> anyhow::Result<()> {
    let features = FeatureConfig::default();
    let corpus = build_corpus(&CategorySpec::gender().with_count(10), 1.0, 5)?;
    let cfg = ModelConfig::tiny();
    let data = pretraining_set::<f32>(&corpus.waveforms, &features, cfg.n_clusters, 5)?;
    let model = init_model::<f32>(&cfg, 5)?;
    println!("head L1 scores:\n{:.2}", head_scores(&model));

    // base-size plans, for reference
    let base = ModelConfig::base();
    let heads: Vec<usize> = PruneSchedule::heads(&base, 100).plan(&base).iter().map(|p| p.0).collect();
    println!("base head grid: {heads:?}");
    let rows: Vec<usize> = PruneSchedule::rows(&base, 100)
        .plan(&base)
        .iter()
        .map(|p| p.0 / base.n_layers)
        .collect();
    println!("base rows per layer: {rows:?}");

    for schedule in [PruneSchedule::heads(&cfg, 5000), PruneSchedule::rows(&cfg, 5000)] {
        let mut m = model.clone();
        let mut ft = Finetuner::for_schedule(&m, &data.utterances, MaskParams::default(), &schedule, 5)?;
        let events = run_schedule(&mut m, &schedule, &mut ft, |m, e, at| {
            let d = effect_size(&bias_test(&corpus, &Embedder::Model(m), &features)?)?.d_aggregate;
            println!(
                "  {} event @ step {:>2}: {:>3} remaining, d = {d:+.3}",
                e.method, at.step, e.remaining
            );
            Ok(())
        })?;
        println!("{} {} events, sparsity {:.3}", events.len(), schedule.method, m.sparsity());
    }
    Ok(())
}
