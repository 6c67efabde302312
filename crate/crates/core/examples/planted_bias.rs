//! Synthetic corpora with and without a planted group/valence coupling,
//! measured on MFCC features.

use speatforge::acoustics::{FeatureConfig, FeatureKind};
use speatforge::pipeline::{bias_test, Embedder};
use speatforge::speat::evaluate;
use speatforge::synthcorpus::{build_corpus, CategorySpec};

pub fn main() -> anyhow::Result<()> {
    let features = FeatureConfig::default();
    let mfcc = Embedder::<f64>::Feature(FeatureKind::Mfcc);
    let cat = CategorySpec::gender();
    for planted in [1.0, 0.5, 0.0] {
        let corpus = build_corpus(&cat, planted, 42)?;
        let r = evaluate(&bias_test(&corpus, &mfcc, &features)?, 200, 42)?;
        println!(
            "planted {planted:.1}: d = {:+.3} ({}), p = {:.4}",
            r.d_aggregate,
            r.classification,
            r.p_value.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
