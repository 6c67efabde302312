//! Renders one synthetic stimulus and runs it through every front-end.

use speatforge::acoustics::{FeatureConfig, FeatureKind};
use speatforge::synthcorpus::{synth_stimulus, Role, StimulusSpec};

pub fn main() -> anyhow::Result<()> {
    let spec = StimulusSpec {
        group: "demo".into(),
        role: Role::TargetX,
        f0: 180.0,
        am_rate: 4.0,
        duration: 1.0,
        noise_level: 0.3,
        gain: 1.0,
        seed: 1,
    };
    let wave = synth_stimulus(&spec)?;
    println!("{} samples at {} Hz", wave.len(), wave.sample_rate);

    let cfg = FeatureConfig::default();
    for kind in [FeatureKind::Spectrogram, FeatureKind::Mel, FeatureKind::LogMel, FeatureKind::Mfcc] {
        let m = cfg.compute(kind, &wave)?;
        println!("{:>12}: {} frames x {} features", kind.name(), m.n_frames(), m.n_features());
    }

    let path = std::env::temp_dir().join("speatforge_stimulus.wav");
    wave.write_wav(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}
