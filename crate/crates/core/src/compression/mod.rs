//! Compression of a pretrained encoder: magnitude pruning of heads, FFW
//! rows, or single weights interleaved with finetuning, and layer-to-layer
//! distillation into shallower students.

mod distill;
mod prune;
mod schedule;

pub use distill::{default_targets, distill, distill_eval, distill_loss, distill_train, teacher_targets, DistillConfig, StudentModel};
pub use prune::{head_scores, prune_heads, prune_rows, row_scores, weight_event_size, weight_prune_event};
pub use schedule::{
    read_event_log, scale_steps, sparsity_recurrence, sparsity_schedule, weight_prune_gate, write_event_log, CompressionState, GateCompare,
    GateConfig, Method, Phase, PruneEvent, PruneSchedule, SPARSITY_EPS, SPARSITY_LADDER,
};

use crate::error::{Error, Result};
use crate::model::{pretrain_step, AdamConfig, BatchSampler, MaskParams, Real, TrainState, TransformerModel, Utterance};

/// Continues masked-prediction training on a fixed corpus. Owns its Adam
/// state and batch order, so two finetuners with the same seed produce the
/// same step sequence.
pub struct Finetuner<'a, T> {
    data: &'a [Utterance<T>],
    mask: MaskParams,
    batch_size: usize,
    lr: f64,
    sampler: BatchSampler,
    state: TrainState<T>,
    steps: u64,
    last_loss: Option<f64>,
}

/// Where a finetuner stands when a callback fires.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub step: u64,
    pub loss: Option<f64>,
}

impl<'a, T: Real> Finetuner<'a, T> {
    pub fn new(
        model: &TransformerModel<T>,
        data: &'a [Utterance<T>],
        mask: MaskParams,
        batch_size: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 || !(lr > 0.0) {
            return Err(Error::InvalidConfig("finetuning needs positive batch size and lr".into()));
        }
        let adam = AdamConfig {
            lr,
            ..AdamConfig::default()
        };
        Ok(Self {
            data,
            mask,
            batch_size,
            lr,
            sampler: BatchSampler::new(data.len(), seed, "finetune-batches")?,
            state: TrainState::new(model, adam, seed),
            steps: 0,
            last_loss: None,
        })
    }

    /// From a schedule's batch size and learning rate.
    pub fn for_schedule(
        model: &TransformerModel<T>,
        data: &'a [Utterance<T>],
        mask: MaskParams,
        schedule: &PruneSchedule,
        seed: u64,
    ) -> Result<Self> {
        Self::new(model, data, mask, schedule.batch_size, schedule.lr, seed)
    }

    /// One update; `None` when the sampled masks covered no frame.
    pub fn step(&mut self, model: &mut TransformerModel<T>) -> Result<Option<f64>> {
        let idx = self.sampler.next_batch(self.batch_size);
        let batch: Vec<&Utterance<T>> = idx.iter().map(|&i| &self.data[i]).collect();
        let loss = pretrain_step(model, &mut self.state, &batch, &self.mask, self.lr)?;
        self.steps += 1;
        if loss.is_some() {
            self.last_loss = loss;
        }
        Ok(loss)
    }

    pub fn run(&mut self, model: &mut TransformerModel<T>, steps: u64) -> Result<()> {
        for _ in 0..steps {
            self.step(model)?;
        }
        Ok(())
    }

    pub fn steps_done(&self) -> u64 {
        self.steps
    }

    pub fn progress(&self) -> Progress {
        Progress {
            step: self.steps,
            loss: self.last_loss,
        }
    }
}

fn remaining_units<T: Real>(model: &TransformerModel<T>, method: Method) -> usize {
    match method {
        Method::Head => model.masks.remaining_heads(),
        Method::Row => model.masks.remaining_rows(),
        _ => model.masks.kept_prunable(),
    }
}

/// Runs a prune schedule to completion. `on_event` sees the model after each
/// event *and* the finetuning that follows it (just before the next event,
/// or at the end), so it is where bias measurements belong.
pub fn run_schedule<T: Real>(
    model: &mut TransformerModel<T>,
    schedule: &PruneSchedule,
    ft: &mut Finetuner<'_, T>,
    mut on_event: impl FnMut(&TransformerModel<T>, &PruneEvent, Progress) -> Result<()>,
) -> Result<Vec<PruneEvent>> {
    schedule.validate(&model.config)?;
    let mut events = Vec::new();
    match schedule.method {
        Method::Head | Method::Row => {
            for (_, interval) in schedule.plan(&model.config) {
                let step = ft.steps_done();
                let removed = if schedule.method == Method::Head {
                    prune_heads(model, schedule.units_per_event)?
                } else {
                    prune_rows(model, schedule.units_per_event)?
                };
                let event = PruneEvent {
                    step,
                    method: schedule.method,
                    units: schedule.units_per_event as f64,
                    sparsity_after: model.sparsity(),
                    remaining: remaining_units(model, schedule.method),
                    removed,
                    forced: false,
                };
                ft.run(model, interval)?;
                on_event(model, &event, ft.progress())?;
                events.push(event);
            }
        }
        Method::Weight => {
            let mut state = CompressionState::new(schedule.gate)?;
            // the pretrained model counts as converged: prune at once
            let mut fire = true;
            let mut forced = false;
            let mut waited = 0u64;
            loop {
                if fire {
                    if let Some(e) = events.last() {
                        on_event(model, e, ft.progress())?;
                    }
                    let Some(fraction) = sparsity_schedule(state.current_sparsity) else {
                        break;
                    };
                    let step = ft.steps_done();
                    let removed = weight_prune_event(model, fraction)?;
                    let sparsity = model.sparsity();
                    if forced {
                        log::warn!("weight event at step {step} forced after {waited} steps without a plateau");
                    }
                    events.push(PruneEvent {
                        step,
                        method: Method::Weight,
                        units: fraction,
                        sparsity_after: sparsity,
                        remaining: model.masks.kept_prunable(),
                        removed,
                        forced,
                    });
                    state.record_event(sparsity);
                    waited = 0;
                }
                let loss = ft.step(model)?;
                waited += 1;
                let gate = loss.is_some_and(|l| weight_prune_gate(&mut state, l));
                forced = !gate && waited >= schedule.max_wait_steps;
                fire = gate || forced;
            }
        }
        Method::Distill => return Err(Error::InvalidConfig("distillation has no prune schedule".into())),
    }
    Ok(events)
}

/// How [`replay`] turns a logged event into masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayMode {
    /// Mask exactly the logged indices (same model, same trajectory).
    Indices,
    /// Re-run the method's selection with the logged size on this model's
    /// own magnitudes: the schedule transfers, the choices do not.
    Schedule,
}

/// Re-applies logged events at their recorded steps, finetuning in between,
/// and finetunes `tail_steps` after the last one. `on_event` fires at the
/// same points as in [`run_schedule`]. Returns the events as applied.
pub fn replay<T: Real>(
    model: &mut TransformerModel<T>,
    events: &[PruneEvent],
    mode: ReplayMode,
    ft: &mut Finetuner<'_, T>,
    tail_steps: u64,
    mut on_event: impl FnMut(&TransformerModel<T>, &PruneEvent, Progress) -> Result<()>,
) -> Result<Vec<PruneEvent>> {
    let mut applied: Vec<PruneEvent> = Vec::with_capacity(events.len());
    for e in events {
        if e.step < ft.steps_done() {
            return Err(Error::UnsortedRecords {
                prev: ft.steps_done(),
                next: e.step,
            });
        }
        if e.removed.len() != model.config.n_layers {
            return Err(Error::DimensionMismatch {
                expected: model.config.n_layers,
                got: e.removed.len(),
                context: "event layers",
            });
        }
        ft.run(model, e.step - ft.steps_done())?;
        if let Some(p) = applied.last() {
            on_event(model, p, ft.progress())?;
        }
        let removed = match mode {
            ReplayMode::Indices => {
                apply_event(model, e)?;
                e.removed.clone()
            }
            ReplayMode::Schedule => match e.method {
                Method::Head => prune_heads(model, e.units as usize)?,
                Method::Row => prune_rows(model, e.units as usize)?,
                Method::Weight => weight_prune_event(model, e.units)?,
                Method::Distill => return Err(Error::InvalidConfig("distillation events cannot be replayed".into())),
            },
        };
        applied.push(PruneEvent {
            sparsity_after: model.sparsity(),
            remaining: remaining_units(model, e.method),
            removed,
            ..e.clone()
        });
    }
    ft.run(model, tail_steps)?;
    if let Some(p) = applied.last() {
        on_event(model, p, ft.progress())?;
    }
    Ok(applied)
}

/// Masks exactly the units an event removed.
pub fn apply_event<T: Real>(model: &mut TransformerModel<T>, e: &PruneEvent) -> Result<()> {
    let cfg = model.config;
    let limit = match e.method {
        Method::Head => cfg.n_heads,
        Method::Row => cfg.ffw_dim,
        Method::Weight => model.masks.blocks.first().map_or(0, |b| b.iter().map(|m| m.len()).sum()),
        Method::Distill => return Err(Error::InvalidConfig("distillation events cannot be replayed".into())),
    };
    if let Some(&bad) = e.removed.iter().flatten().find(|&&i| i >= limit) {
        return Err(Error::Format(format!("event index {bad} out of range {limit}")));
    }
    for (l, gone) in e.removed.iter().enumerate() {
        match e.method {
            Method::Head => gone.iter().for_each(|&h| model.masks.drop_head(l, h, cfg.head_dim())),
            Method::Row => gone.iter().for_each(|&i| model.masks.drop_row(l, i)),
            _ => {
                let mut sorted = gone.clone();
                sorted.sort_unstable();
                prune::mask_local_entries(&mut model.masks.blocks[l], &sorted);
            }
        }
    }
    model.apply_masks();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig, Positional};
    use ndarray::Array2;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            hidden_dim: 8,
            ffw_dim: 24,
            n_heads: 4,
            n_clusters: 4,
            input_dim: 5,
            positional: Positional::Sinusoidal,
        }
    }

    fn data() -> Vec<Utterance<f64>> {
        (0..6)
            .map(|u| Utterance {
                features: Array2::from_shape_fn((20, 5), |(i, j)| (((i + u) * 7 + j * 3) % 11) as f64 / 5.0 - 1.0),
                targets: (0..20).map(|i| (i / 5 + u) % 4).collect(),
            })
            .collect()
    }

    const MASK: MaskParams = MaskParams { mask_prob: 0.3, span: 3 };

    #[test]
    fn head_schedule_runs_and_replays() {
        let base = init_model::<f64>(&cfg(), 7).unwrap();
        let d = data();
        let sched = PruneSchedule::heads(&cfg(), 5000);
        let mut m = base.clone();
        let mut ft = Finetuner::for_schedule(&m, &d, MASK, &sched, 3).unwrap();
        let mut seen = Vec::new();
        let events = run_schedule(&mut m, &sched, &mut ft, |m, e, _| {
            seen.push((e.remaining, m.masks.remaining_heads()));
            Ok(())
        })
        .unwrap();
        assert_eq!(events.iter().map(|e| e.remaining).collect::<Vec<_>>(), vec![6, 4, 2]);
        assert_eq!(seen, vec![(6, 6), (4, 4), (2, 2)]);
        assert_eq!(events.iter().map(|e| e.step).collect::<Vec<_>>(), vec![0, 5, 10]);

        let mut r = base.clone();
        let mut ft2 = Finetuner::for_schedule(&r, &d, MASK, &sched, 3).unwrap();
        let mut n = 0;
        replay(&mut r, &events, ReplayMode::Indices, &mut ft2, 8, |_, _, _| {
            n += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(n, 3);
        assert_eq!(r, m);

        // the schedule alone, on a differently initialised model
        let mut other = init_model::<f64>(&cfg(), 99).unwrap();
        let mut ft3 = Finetuner::for_schedule(&other, &d, MASK, &sched, 3).unwrap();
        let applied = replay(&mut other, &events, ReplayMode::Schedule, &mut ft3, 8, |_, _, _| Ok(())).unwrap();
        let steps = |es: &[PruneEvent]| es.iter().map(|e| (e.step, e.remaining)).collect::<Vec<_>>();
        assert_eq!(steps(&applied), steps(&events));
        assert_eq!(other.masks.remaining_heads(), 2);
    }

    #[test]
    fn weight_schedule_walks_the_ladder() {
        let mut m = init_model::<f64>(&cfg(), 8).unwrap();
        let d = data();
        let mut sched = PruneSchedule::weights(5000);
        sched.max_wait_steps = 4;
        let mut ft = Finetuner::for_schedule(&m, &d, MASK, &sched, 1).unwrap();
        let mut calls = 0;
        let events = run_schedule(&mut m, &sched, &mut ft, |_, _, _| {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, events.len());
        assert_eq!(events[0].step, 0);
        assert!((events[0].units - 0.2).abs() < 1e-12);
        let last = events.last().unwrap();
        assert!(last.sparsity_after >= 0.8 - 1e-9, "{}", last.sparsity_after);
        assert!(events
            .windows(2)
            .all(|w| w[0].step < w[1].step && w[0].sparsity_after < w[1].sparsity_after));
        let recurrence = sparsity_recurrence();
        assert_eq!(events.len(), recurrence.len());
        let total = m.masks.total_prunable() as f64;
        for (e, s) in events.iter().zip(&recurrence) {
            assert!(
                (e.sparsity_after - s).abs() <= events.len() as f64 / total,
                "{} vs {s}",
                e.sparsity_after
            );
        }
    }

    #[test]
    fn apply_event_rejects_out_of_range() {
        let mut m = init_model::<f64>(&cfg(), 8).unwrap();
        let e = PruneEvent {
            step: 0,
            method: Method::Head,
            units: 1.0,
            sparsity_after: 0.0,
            remaining: 0,
            removed: vec![vec![4], vec![]],
            forced: false,
        };
        assert!(apply_event(&mut m, &e).is_err());
    }
}
