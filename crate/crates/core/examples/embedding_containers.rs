//! Writes a corpus to disk, extracts SPEB containers from MFCC and from a
//! model, and evaluates from the containers alone.

use speatforge::acoustics::{FeatureConfig, FeatureKind};
use speatforge::harness::{extract, load_bias_test, read_container};
use speatforge::model::{init_model, ModelConfig};
use speatforge::pipeline::Embedder;
use speatforge::speat::effect_size;
use speatforge::synthcorpus::{build_corpus, write_corpus, CategorySpec, Corpus};

pub fn main() -> anyhow::Result<()> {
    let root = std::env::temp_dir().join("speatforge_containers");
    let manifest = write_corpus(&build_corpus(&CategorySpec::gender().with_count(6), 1.0, 2)?, root.join("corpus"))?;
    let corpus = Corpus::load(&manifest)?;
    let features = FeatureConfig::default();
    let model = init_model::<f32>(&ModelConfig::tiny(), 2)?;

    for (name, embedder) in [("mfcc", Embedder::Feature(FeatureKind::Mfcc)), ("tiny", Embedder::Model(&model))] {
        let dir = root.join(name);
        let files = extract(&corpus, &embedder, &features, &dir)?;
        let (layers, frames, dim) = read_container(&files[0])?.shape()?;
        let d = effect_size(&load_bias_test(&corpus.manifest, &dir)?)?.d_aggregate;
        println!(
            "{name}: {} containers, first is {layers} x {frames} x {dim}; d = {d:+.3}",
            files.len()
        );
    }
    Ok(())
}
