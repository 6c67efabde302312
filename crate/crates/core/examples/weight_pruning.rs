//! The sparsity ladder, the loss-plateau gate, and replaying a recorded
//! event log onto a second copy of the model.

use speatforge::acoustics::FeatureConfig;
use speatforge::compression::{
    read_event_log, replay, run_schedule, sparsity_recurrence, write_event_log, Finetuner, PruneSchedule, ReplayMode,
};
use speatforge::harness::pretraining_set;
use speatforge::model::{init_model, MaskParams, ModelConfig};
use speatforge::synthcorpus::{build_corpus, CategorySpec};

pub fn main() -> anyhow::Result<()> {
    let ladder: Vec<String> = sparsity_recurrence().iter().map(|s| format!("{s:.4}")).collect();
    println!("{} events: {}", ladder.len(), ladder.join(" "));

    let corpus = build_corpus(&CategorySpec::age().with_count(8), 0.0, 9)?;
    let cfg = ModelConfig::tiny();
    let data = pretraining_set::<f32>(&corpus.waveforms, &FeatureConfig::default(), cfg.n_clusters, 9)?;
    let fresh = init_model::<f32>(&cfg, 9)?;
    let schedule = PruneSchedule::weights(5000);
    println!("gate window {} steps, tolerance {}", schedule.gate.window, schedule.gate.tolerance);

    let mut model = fresh.clone();
    let mut ft = Finetuner::for_schedule(&model, &data.utterances, MaskParams::default(), &schedule, 9)?;
    let events = run_schedule(&mut model, &schedule, &mut ft, |_, _, _| Ok(()))?;
    let forced = events.iter().filter(|e| e.forced).count();
    println!(
        "{} events over {} steps ({forced} forced), final sparsity {:.4}",
        events.len(),
        ft.steps_done(),
        model.sparsity()
    );

    let log = std::env::temp_dir().join("speatforge_events.jsonl");
    write_event_log(&log, &events)?;
    let recorded = read_event_log(&log)?;
    let mut copy = fresh.clone();
    let mut ft2 = Finetuner::for_schedule(&copy, &data.utterances, MaskParams::default(), &schedule, 9)?;
    let tail = ft.steps_done() - recorded.last().map_or(0, |e| e.step);
    replay(&mut copy, &recorded, ReplayMode::Indices, &mut ft2, tail, |_, _, _| Ok(()))?;
    println!("replayed: sparsity {:.4}, identical model: {}", copy.sparsity(), copy == model);
    Ok(())
}
