use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use speatforge::acoustics::FeatureKind;
use speatforge::compression::{read_event_log, write_event_log, Method, ReplayMode};
use speatforge::harness::{
    self, load_bias_test, read_records_csv, write_corpora, write_records_csv, ExperimentConfig, Study, TrajectoryRecord,
};
use speatforge::io::write_atomic;
use speatforge::model::{f64_mode, read_checkpoint, write_checkpoint, Real, TransformerModel};
use speatforge::pipeline::{bias_test, Embedder};
use speatforge::speat::evaluate;
use speatforge::synthcorpus::{Corpus, CorpusManifest};

#[derive(Parser)]
#[command(name = "speatforge", version, about = "Speech embedding association bias under compression")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// Experiment config (JSON); defaults apply otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Divides every step count.
    #[arg(long, global = true)]
    scale: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_method)]
    method: Option<Method>,
    /// Worker threads for extraction and permutations.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: speatforge::Error| e.to_string())
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic bias corpora.
    Synth,
    /// Write one SPEB container per stimulus.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        /// Classic features instead of a model.
        #[arg(long, conflicts_with = "checkpoint")]
        features: Option<FeatureKind>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pretrain and save a checkpoint.
    Pretrain,
    /// Run a prune schedule, or replay a recorded event log.
    Prune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Distil shallow students from a checkpoint.
    Distill {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Effect size (and p-value) for one manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of SPEB containers; otherwise embed on the fly.
        #[arg(long)]
        containers: Option<PathBuf>,
        #[arg(long, conflicts_with = "containers")]
        features: Option<FeatureKind>,
        #[arg(long, conflicts_with_all = ["containers", "features"])]
        checkpoint: Option<PathBuf>,
    },
    /// Pretraining trajectory plus every configured compression trajectory.
    Trajectory,
    /// Report bundle from trajectory CSVs.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(s) = g.scale {
        cfg.scale = s;
    }
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    if let Some(m) = g.method {
        cfg.compression.methods = vec![m];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_series(records: &[TrajectoryRecord], dir: &Path) -> Result<()> {
    write_records_csv(records, dir.join("records.csv"))?;
    write_atomic(dir.join("records.json"), serde_json::to_string_pretty(records)?.as_bytes())?;
    Ok(())
}

fn checkpoint_path(cfg: &ExperimentConfig, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| cfg.out.join("pretrained.spfm"))
}

fn run<T: Real>(cfg: ExperimentConfig, cmd: Cmd) -> Result<()> {
    let out = cfg.out.clone();
    match cmd {
        Cmd::Synth => {
            for p in write_corpora(&harness::build_corpora(&cfg)?, out.join("corpus"))? {
                println!("{}", p.display());
            }
        }
        Cmd::Extract {
            manifest,
            features,
            checkpoint,
        } => {
            let corpus = Corpus::load(&manifest)?;
            let model: Option<TransformerModel<T>> = checkpoint.map(read_checkpoint).transpose()?;
            let embedder = match (&model, features) {
                (Some(m), _) => Embedder::Model(m),
                (None, Some(k)) => Embedder::Feature(k),
                (None, None) => Embedder::Feature(FeatureKind::Mfcc),
            };
            let dir = out.join("embeddings").join(corpus.manifest.category.to_lowercase());
            let files = harness::extract(&corpus, &embedder, &cfg.features, &dir)?;
            println!("{} containers in {}", files.len(), dir.display());
        }
        Cmd::Pretrain => {
            let mut c = cfg.clone();
            c.pretrain.checkpoint_grid.clear();
            let study = Study::<T>::prepare(&c)?;
            let (model, _) = study.run_trajectory()?;
            write_checkpoint(&model, out.join("pretrained.spfm"))?;
            println!("{}", out.join("pretrained.spfm").display());
        }
        Cmd::Prune { checkpoint, replay } => {
            let Some(method) = cfg
                .compression
                .methods
                .first()
                .copied()
                .filter(|_| cfg.compression.methods.len() == 1)
            else {
                bail!("prune needs --method head|row|weight");
            };
            let teacher: TransformerModel<T> = read_checkpoint(checkpoint_path(&cfg, &checkpoint))?;
            let study = Study::<T>::prepare(&cfg)?;
            let dir = out.join(method.as_str());
            match replay {
                Some(log) => {
                    let events = read_event_log(&log)?;
                    let (m, _) = study.replay_events(&teacher, &events, ReplayMode::Schedule, 0)?;
                    write_checkpoint(&m, dir.join("replayed.spfm"))?;
                    println!("replayed {} events, sparsity {}", events.len(), m.sparsity());
                }
                None => {
                    let (records, events) = study.run_compression(&teacher, method)?;
                    write_series(&records, &dir)?;
                    if method != Method::Distill {
                        write_event_log(dir.join("events.jsonl"), &events)?;
                    }
                    println!("{} records, {} events in {}", records.len(), events.len(), dir.display());
                }
            }
        }
        Cmd::Distill { checkpoint } => {
            let teacher: TransformerModel<T> = read_checkpoint(checkpoint_path(&cfg, &checkpoint))?;
            let study = Study::<T>::prepare(&cfg)?;
            let records = study.run_distillation(&teacher)?;
            write_series(&records, &out.join("distill"))?;
        }
        Cmd::Eval {
            manifest,
            containers,
            features,
            checkpoint,
        } => {
            let seed = speatforge::rng::child_seed(cfg.seed, "perm");
            let t = match containers {
                Some(dir) => load_bias_test(&CorpusManifest::from_json_file(&manifest)?, dir)?,
                None => {
                    let corpus = Corpus::load(&manifest)?;
                    let model: Option<TransformerModel<T>> = checkpoint.map(read_checkpoint).transpose()?;
                    let embedder = match &model {
                        Some(m) => Embedder::Model(m),
                        None => Embedder::Feature(features.unwrap_or(FeatureKind::Mfcc)),
                    };
                    bias_test(&corpus, &embedder, &cfg.features)?
                }
            };
            println!("{}", serde_json::to_string_pretty(&evaluate(&t, cfg.n_perm, seed)?)?);
        }
        Cmd::Trajectory => {
            let study = Study::<T>::prepare(&cfg)?;
            let (model, mut all) = study.run_trajectory()?;
            write_checkpoint(&model, out.join("pretrained.spfm"))?;
            write_series(&all, &out.join("pretrain"))?;
            for &method in &cfg.compression.methods {
                let (records, events) = study.run_compression(&model, method)?;
                let dir = out.join(method.as_str());
                write_series(&records, &dir)?;
                if method != Method::Distill {
                    write_event_log(dir.join("events.jsonl"), &events)?;
                }
                all.extend(records);
            }
            harness::report(&all, out.join("report"))?;
            println!("report in {}", out.join("report").display());
        }
        Cmd::Report { inputs } => {
            let mut all = Vec::new();
            for p in &inputs {
                all.extend(read_records_csv(p).with_context(|| format!("reading {}", p.display()))?);
            }
            for f in harness::report(&all, &out)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.global.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cfg = load_config(&cli.global)?;
    if f64_mode() {
        run::<f64>(cfg, cli.cmd)
    } else {
        run::<f32>(cfg, cli.cmd)
    }
}
