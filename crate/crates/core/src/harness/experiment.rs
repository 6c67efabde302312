//! End-to-end studies: corpora, pretraining trajectories, compression
//! trajectories, distillation.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::container::{read_container, write_container, EmbeddingTensor};
use super::pretrain::{pretrain, pretraining_set, PretrainData, PretrainOptions};
use super::record::{CategoryBias, TrajectoryRecord};
use crate::acoustics::{FeatureConfig, Waveform};
use crate::compression::{
    apply_event, distill_train, replay, run_schedule, teacher_targets, DistillConfig, Finetuner, Method, PruneEvent, PruneSchedule,
    ReplayMode, StudentModel, SPARSITY_EPS,
};
use crate::error::{Error, Result};
use crate::model::{init_model, Real, TransformerModel};
use crate::pipeline::{bias_test, Embedder};
use crate::rng;
use crate::speat::{evaluate, BiasTest, EmbeddingSequence};
use crate::synthcorpus::{build_corpus_with, write_corpus, Corpus, Role};

/// Sparsity points reported for weight pruning.
pub const WEIGHT_GRID: [f64; 7] = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];

/// Every configured category, generated from the root seed.
pub fn build_corpora(cfg: &ExperimentConfig) -> Result<Vec<Corpus>> {
    let cats = cfg.corpus.categories()?;
    cats.iter()
        .map(|c| build_corpus_with(c, &cats, &cfg.corpus.params, cfg.corpus.planted_bias, cfg.seed))
        .collect()
}

/// Writes each corpus to `<out>/<category>/`; returns the manifest paths.
pub fn write_corpora(corpora: &[Corpus], out: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    corpora
        .iter()
        .map(|c| write_corpus(c, out.as_ref().join(c.manifest.category.to_lowercase())))
        .collect()
}

/// Distinct stimuli across corpora (shared attribute sets counted once).
pub fn pooled_waveforms(corpora: &[Corpus]) -> Vec<Waveform> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for c in corpora {
        for (e, w) in c.manifest.stimuli.iter().zip(&c.waveforms) {
            if seen.insert(e.id.clone()) {
                out.push(w.clone());
            }
        }
    }
    out
}

/// Writes one `SPEB` container per stimulus to `<out>/<id>.speb`.
pub fn extract<T: Real>(
    corpus: &Corpus,
    embedder: &Embedder<'_, T>,
    features: &FeatureConfig,
    out: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out = out.as_ref();
    corpus
        .manifest
        .stimuli
        .par_iter()
        .zip(corpus.waveforms.par_iter())
        .map(|(e, w)| {
            let t = EmbeddingTensor::from_f64(&embedder.layers(w, features)?)?;
            let path = out.join(format!("{}.speb", e.id));
            write_container(&t, &path)?;
            Ok(path)
        })
        .collect()
}

/// Reassembles a bias test from a manifest and a directory of containers
/// named `<id>.speb`.
pub fn load_bias_test(manifest: &crate::synthcorpus::CorpusManifest, containers: impl AsRef<Path>) -> Result<BiasTest> {
    let dir = containers.as_ref();
    let seqs: Vec<EmbeddingSequence> = manifest
        .stimuli
        .par_iter()
        .map(|e| {
            let t = read_container(dir.join(format!("{}.speb", e.id)))?;
            EmbeddingSequence::new(t.to_f64(), e.id.clone(), e.group.clone())
        })
        .collect::<Result<_>>()?;
    let mut sets: [Vec<EmbeddingSequence>; 4] = Default::default();
    for (e, s) in manifest.stimuli.iter().zip(seqs) {
        sets[Role::ALL.iter().position(|&r| r == e.role).expect("known role")].push(s);
    }
    let [x, y, a, b] = sets;
    BiasTest::new(manifest.category.clone(), x, y, a, b)
}

/// Bias of every corpus under `embedder`. Permutation draws use the `perm`
/// stream of `seed`.
pub fn evaluate_corpora<T: Real>(
    corpora: &[Corpus],
    embedder: &Embedder<'_, T>,
    features: &FeatureConfig,
    n_perm: usize,
    seed: u64,
) -> Result<Vec<CategoryBias>> {
    let perm_seed = rng::child_seed(seed, "perm");
    corpora
        .iter()
        .map(|c| {
            Ok(CategoryBias::from(&evaluate(
                &bias_test(c, embedder, features)?,
                n_perm,
                perm_seed,
            )?))
        })
        .collect()
}

/// Corpora plus the derived pretraining set for one configuration.
pub struct Study<T> {
    pub cfg: ExperimentConfig,
    pub corpora: Vec<Corpus>,
    pub data: PretrainData<T>,
}

impl<T: Real> Study<T> {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let corpora = build_corpora(cfg)?;
        Self::with_corpora(cfg, corpora)
    }

    pub fn with_corpora(cfg: &ExperimentConfig, corpora: Vec<Corpus>) -> Result<Self> {
        let model = cfg.model_config()?;
        let waves = pooled_waveforms(&corpora);
        let data = pretraining_set(&waves, &cfg.features, model.n_clusters, cfg.seed)?;
        Ok(Self {
            cfg: cfg.clone(),
            corpora,
            data,
        })
    }

    fn embed(&self, model: &TransformerModel<T>) -> Result<Vec<CategoryBias>> {
        evaluate_corpora(
            &self.corpora,
            &Embedder::Model(model),
            &self.cfg.features,
            self.cfg.n_perm,
            self.cfg.seed,
        )
    }

    fn record(&self, series: &str, step: u64, point: f64, model: &TransformerModel<T>, loss: Option<f64>) -> Result<TrajectoryRecord> {
        let r = TrajectoryRecord {
            series: series.into(),
            step,
            point,
            sparsity: model.sparsity(),
            loss,
            nonzero_params: model.unmasked_parameter_count(),
            biases: self.embed(model)?,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn fresh_model(&self) -> Result<TransformerModel<T>> {
        init_model(&self.cfg.model_config()?, rng::child_seed(self.cfg.seed, "init"))
    }

    /// Pretrains from scratch, recording bias at every checkpoint of the
    /// scaled grid. Returns the final model and the `pretrain` series.
    pub fn run_trajectory(&self) -> Result<(TransformerModel<T>, Vec<TrajectoryRecord>)> {
        let mut model = self.fresh_model()?;
        let p = &self.cfg.pretrain;
        let opts = PretrainOptions {
            steps: self.cfg.pretrain_steps(),
            batch_size: p.batch_size,
            lr: p.lr,
            mask: p.mask,
        };
        let grid = self.cfg.checkpoint_grid();
        let mut records = Vec::with_capacity(grid.len());
        pretrain(
            &mut model,
            &self.data.utterances,
            &opts,
            rng::child_seed(self.cfg.seed, "pretrain"),
            &grid,
            |step, m, loss| {
                log::info!("pretrain checkpoint {step}");
                records.push(self.record("pretrain", step, step as f64, m, loss)?);
                Ok(())
            },
        )?;
        Ok((model, records))
    }

    pub fn schedule(&self, method: Method) -> Result<PruneSchedule> {
        let mut s = PruneSchedule::for_method(method, &self.cfg.model_config()?, self.cfg.scale)?;
        s.gate.compare = self.cfg.compression.gate_compare;
        Ok(s)
    }

    fn finetuner(&self, model: &TransformerModel<T>, schedule: &PruneSchedule, method: Method) -> Result<Finetuner<'_, T>> {
        let seed = rng::child_seed(self.cfg.seed, &format!("finetune/{method}"));
        Finetuner::for_schedule(model, &self.data.utterances, self.cfg.pretrain.mask, schedule, seed)
    }

    /// Prunes a copy of `teacher` with `method`'s schedule. The series starts
    /// with the unpruned baseline; head and row series then hold one record
    /// per event (x = units remaining), weight series one record per
    /// reached point of [`WEIGHT_GRID`]. Also returns the event log.
    pub fn run_compression(&self, teacher: &TransformerModel<T>, method: Method) -> Result<(Vec<TrajectoryRecord>, Vec<PruneEvent>)> {
        if method == Method::Distill {
            return Ok((self.run_distillation(teacher)?, Vec::new()));
        }
        let schedule = self.schedule(method)?;
        let mut model = teacher.clone();
        let mut ft = self.finetuner(&model, &schedule, method)?;
        let mut records = vec![self.record(method.as_str(), 0, baseline_point(&model, method), &model, None)?];
        let mut grid = WEIGHT_GRID.iter().copied().peekable();
        let tol = 0.5 / model.masks.total_prunable() as f64 + SPARSITY_EPS;
        let events = run_schedule(&mut model, &schedule, &mut ft, |m, e, at| {
            log::info!("{method} event at step {}: {} remaining", e.step, e.remaining);
            match method {
                Method::Weight => {
                    while let Some(g) = grid.next_if(|&g| e.sparsity_after >= g - tol) {
                        records.push(self.record(method.as_str(), at.step, g, m, at.loss)?);
                    }
                }
                _ => records.push(self.record(method.as_str(), at.step, e.remaining as f64, m, at.loss)?),
            }
            Ok(())
        })?;
        Ok((records, events))
    }

    /// Replays a recorded event log onto `model`, finetuning with this
    /// study's data; `tail_steps` follow the last event. Returns the model
    /// and the events as applied.
    pub fn replay_events(
        &self,
        model: &TransformerModel<T>,
        events: &[PruneEvent],
        mode: ReplayMode,
        tail_steps: u64,
    ) -> Result<(TransformerModel<T>, Vec<PruneEvent>)> {
        let method = events.first().map_or(Method::Weight, |e| e.method);
        if events.iter().any(|e| e.method != method) {
            return Err(Error::InvalidParams("event log mixes methods".into()));
        }
        let schedule = self.schedule(method)?;
        let mut m = model.clone();
        let mut ft = self.finetuner(&m, &schedule, method)?;
        let applied = replay(&mut m, events, mode, &mut ft, tail_steps, |_, _, _| Ok(()))?;
        Ok((m, applied))
    }

    /// Applies logged events without finetuning: the mask pattern only.
    pub fn apply_events(&self, model: &TransformerModel<T>, events: &[PruneEvent]) -> Result<TransformerModel<T>> {
        let mut m = model.clone();
        for e in events {
            apply_event(&mut m, e)?;
        }
        Ok(m)
    }

    pub fn distill_config(&self) -> DistillConfig {
        let c = &self.cfg.compression;
        DistillConfig {
            steps: self.cfg.scaled(c.distill_steps),
            lr: c.distill_lr,
            batch_size: c.distill_batch_size,
            targets: None,
        }
    }

    /// Trains one student per configured depth. The series starts with the
    /// teacher (x = teacher depth), then one record per student (x = depth).
    pub fn run_distillation(&self, teacher: &TransformerModel<T>) -> Result<Vec<TrajectoryRecord>> {
        let dc = self.distill_config();
        let n_l = teacher.config.n_layers;
        let mut records = vec![self.record("distill", 0, n_l as f64, teacher, None)?];
        let inputs: Vec<_> = self.data.utterances.iter().map(|u| u.features.clone()).collect();
        let targets = crate::compression::default_targets(n_l);
        let teacher_reps = teacher_targets(teacher, &inputs, &targets)?;
        for &layers in &self.cfg.compression.student_layers {
            let seed = rng::child_seed(self.cfg.seed, &format!("distill/{layers}"));
            let mut student = StudentModel::from_teacher(teacher, layers, targets.clone(), seed)?;
            let losses = distill_train(&mut student, &inputs, &teacher_reps, &dc, seed)?;
            log::info!("distilled {layers}-layer student, final loss {:?}", losses.last());
            records.push(self.record("distill", dc.steps, layers as f64, &student.model, losses.last().copied())?);
        }
        Ok(records)
    }
}

fn baseline_point<T: Real>(m: &TransformerModel<T>, method: Method) -> f64 {
    match method {
        Method::Head => m.masks.remaining_heads() as f64,
        Method::Row => m.masks.remaining_rows() as f64,
        _ => m.sparsity(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustics::FeatureKind;
    use crate::model::{ModelConfig, Positional};
    use crate::synthcorpus::CorpusParams;

    fn small_cfg() -> ExperimentConfig {
        let mut c = ExperimentConfig::smoke();
        c.corpus.categories = vec!["gender".into()];
        c.corpus.targets_per_group = Some(6);
        c.corpus.params = CorpusParams {
            attribute_count: 4,
            ..CorpusParams::default()
        };
        c.model = super::super::config::ModelChoice::Custom(ModelConfig {
            n_layers: 2,
            hidden_dim: 8,
            ffw_dim: 48,
            n_heads: 2,
            n_clusters: 8,
            input_dim: 80,
            positional: Positional::Conv { kernel: 4, groups: 2 },
        });
        c.scale = 20_000;
        c
    }

    #[test]
    fn container_round_trip_matches_direct_evaluation() {
        let cfg = small_cfg();
        let corpora = build_corpora(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let e = Embedder::<f64>::Feature(FeatureKind::Mfcc);
        let files = extract(&corpora[0], &e, &cfg.features, dir.path()).unwrap();
        assert_eq!(files.len(), 20);
        let t = read_container(&files[0]).unwrap();
        assert_eq!(t.shape().unwrap().0, 1);
        assert_eq!(t.shape().unwrap().2, 13);
        let loaded = load_bias_test(&corpora[0].manifest, dir.path()).unwrap();
        let direct = bias_test(&corpora[0], &e, &cfg.features).unwrap();
        let (a, b) = (
            crate::speat::effect_size(&loaded).unwrap(),
            crate::speat::effect_size(&direct).unwrap(),
        );
        // containers store f32
        assert!((a.d_aggregate - b.d_aggregate).abs() < 1e-4);
    }

    #[test]
    fn tiny_study_end_to_end() {
        let cfg = small_cfg();
        let study = Study::<f64>::prepare(&cfg).unwrap();
        let (model, traj) = study.run_trajectory().unwrap();
        assert_eq!(traj.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 3, 5, 10, 15, 20]);
        let (heads, head_events) = study.run_compression(&model, Method::Head).unwrap();
        assert_eq!(heads.iter().map(|r| r.point).collect::<Vec<_>>(), vec![4.0, 2.0]);
        assert_eq!(head_events.len(), 1);
        let (rows, _) = study.run_compression(&model, Method::Row).unwrap();
        // 48 rows: events of 2, stop at 8 per layer
        assert_eq!(rows.len(), 1 + 20);
        assert_eq!(rows.last().unwrap().point, 16.0);
        let (weights, events) = study.run_compression(&model, Method::Weight).unwrap();
        assert_eq!(weights.iter().skip(1).map(|r| r.point).collect::<Vec<_>>(), WEIGHT_GRID.to_vec());
        let last = events.last().unwrap();
        assert!(last.sparsity_after >= 0.8 - 1e-9);
        let (replayed, _) = study.replay_events(&model, &events, ReplayMode::Indices, 0).unwrap();
        assert_eq!(replayed.masks, study.apply_events(&model, &events).unwrap().masks);
        assert_eq!(replayed.sparsity(), last.sparsity_after);
        let fresh = study.fresh_model().unwrap();
        let (other, applied) = study.replay_events(&fresh, &events, ReplayMode::Schedule, 0).unwrap();
        assert_eq!(
            applied.iter().map(|e| e.step).collect::<Vec<_>>(),
            events.iter().map(|e| e.step).collect::<Vec<_>>()
        );
        assert_eq!(other.sparsity(), last.sparsity_after);
        let distill = study.run_distillation(&model).unwrap();
        assert_eq!(distill.iter().map(|r| r.point).collect::<Vec<_>>(), vec![2.0, 2.0]);
        for r in traj.iter().chain(&heads).chain(&rows).chain(&weights).chain(&distill) {
            r.validate().unwrap();
        }
    }
}
