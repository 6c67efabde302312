//! The whole desk-scale study: pretraining trajectory, every compression
//! method, and a report bundle. Pass an output directory to keep it.

use speatforge::compression::Method;
use speatforge::harness::{report, ExperimentConfig, Study};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("speatforge_study"));
    let cfg = ExperimentConfig::smoke();
    let study = Study::<f32>::prepare(&cfg)?;
    let (model, mut records) = study.run_trajectory()?;
    for method in [Method::Head, Method::Row, Method::Weight, Method::Distill] {
        let (r, events) = study.run_compression(&model, method)?;
        println!("{method}: {} points, {} events", r.len(), events.len());
        records.extend(r);
    }
    for f in report(&records, &out)? {
        println!("{}", f.display());
    }
    Ok(())
}
