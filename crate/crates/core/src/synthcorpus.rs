//! Synthetic speech-like stimuli with plantable group/valence correlates.
//!
//! Group identity is carried by the fundamental frequency, valence by the
//! amplitude-modulation rate: slow AM reads as attribute A, fast AM as B.
//! Attribute stimuli come in f0/duration-matched A/B pairs so that the
//! attribute sets differ in nothing but modulation.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acoustics::{log_mel_spectrogram, FrameParams, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TargetX,
    TargetY,
    AttrA,
    AttrB,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::TargetX, Role::TargetY, Role::AttrA, Role::AttrB];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::TargetX => "target_x",
            Role::TargetY => "target_y",
            Role::AttrA => "attr_a",
            Role::AttrB => "attr_b",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusSpec {
    pub group: String,
    pub role: Role,
    /// Hz.
    pub f0: f64,
    /// Hz; 0 disables modulation.
    pub am_rate: f64,
    /// Seconds.
    pub duration: f64,
    /// Standard deviation of the additive white noise.
    pub noise_level: f64,
    /// Overall gain applied after modulation.
    #[serde(default = "unit_gain")]
    pub gain: f64,
    pub seed: u64,
}

fn unit_gain() -> f64 {
    1.0
}

pub const F0_RANGE: (f64, f64) = (60.0, 400.0);
pub const MIN_DURATION: f64 = 0.3;
/// Modulation depth of the AM envelope.
pub const AM_DEPTH: f64 = 0.9;
const AMPLITUDE: f64 = 0.3;
const N_HARMONICS: usize = 4;

impl StimulusSpec {
    pub fn validate(&self) -> Result<()> {
        if !(F0_RANGE.0..=F0_RANGE.1).contains(&self.f0) {
            return Err(Error::InvalidParams(format!("f0 {} Hz outside [60, 400]", self.f0)));
        }
        if !(self.duration >= MIN_DURATION) {
            return Err(Error::InvalidParams(format!("duration {} s below 0.3 s", self.duration)));
        }
        if !(self.am_rate >= 0.0) || !(self.noise_level >= 0.0) || !(self.gain > 0.0) {
            return Err(Error::InvalidParams("am_rate, noise_level and gain must be non-negative".into()));
        }
        Ok(())
    }
}

/// Renders `spec` at 16 kHz: f0 plus three harmonics (amplitude 1/h, random
/// phases), a raised-sine AM envelope, and white noise.
pub fn synth_stimulus(spec: &StimulusSpec) -> Result<Waveform> {
    spec.validate()?;
    let sr = f64::from(DEFAULT_SAMPLE_RATE);
    let n = (spec.duration * sr).round() as usize;
    let mut rng = rng::stream(spec.seed, "stimulus");
    let phases: Vec<f64> = (0..N_HARMONICS).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let am_phase = rng.random_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, spec.noise_level.max(f64::MIN_POSITIVE)).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let norm: f64 = (1..=N_HARMONICS).map(|h| 1.0 / h as f64).sum();
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let source: f64 = phases
                .iter()
                .enumerate()
                .map(|(h, ph)| {
                    let h = (h + 1) as f64;
                    (2.0 * PI * h * spec.f0 * t + ph).sin() / h
                })
                .sum::<f64>()
                / norm;
            let env = if spec.am_rate > 0.0 {
                (1.0 + AM_DEPTH * (2.0 * PI * spec.am_rate * t + am_phase).sin()) / (1.0 + AM_DEPTH)
            } else {
                1.0
            };
            let eps = if spec.noise_level > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (spec.gain * env * (AMPLITUDE * source + eps)).clamp(-1.0, 1.0)
        })
        .collect();
    Waveform::new(samples, DEFAULT_SAMPLE_RATE)
}

/// Mean log-mel energy of loudness-normalized stimuli.
pub const REFERENCE_LOG_MEL: f64 = 0.0;

/// Gain that brings the unmodulated rendering of `spec` to a mean log-mel
/// energy of [`REFERENCE_LOG_MEL`]. Without it f0 shifts overall log energy
/// (MFCC c0), the same axis the AM cue moves along, and group identity
/// would leak into valence.
pub fn loudness_gain(spec: &StimulusSpec) -> Result<f64> {
    let flat = StimulusSpec {
        am_rate: 0.0,
        gain: 1.0,
        ..spec.clone()
    };
    let w = synth_stimulus(&flat)?;
    let m = log_mel_spectrogram(&w, &FrameParams::default(), 80)?;
    let mean = m.frames.mean().unwrap_or(REFERENCE_LOG_MEL);
    // a gain g shifts every log-mel value by 2 ln g
    Ok(((REFERENCE_LOG_MEL - mean) / 2.0).exp())
}

/// One bias category: two target groups with distinct f0 ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub group_x: String,
    pub group_y: String,
    /// Stimuli per target group.
    pub count: usize,
    pub f0_x: (f64, f64),
    pub f0_y: (f64, f64),
}

impl CategorySpec {
    pub fn gender() -> Self {
        Self::new("Gender", "Female", "Male", 60, (170.0, 230.0), (100.0, 140.0))
    }

    pub fn native() -> Self {
        Self::new("Native", "US", "Korean", 55, (115.0, 150.0), (160.0, 200.0))
    }

    pub fn age() -> Self {
        Self::new("Age", "Young", "Old", 58, (150.0, 200.0), (100.0, 140.0))
    }

    pub fn standard() -> Vec<Self> {
        vec![Self::gender(), Self::native(), Self::age()]
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Self::standard()
            .into_iter()
            .find(|c| c.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown category {name:?}")))
    }

    fn new(name: &str, x: &str, y: &str, count: usize, f0_x: (f64, f64), f0_y: (f64, f64)) -> Self {
        Self {
            name: name.into(),
            group_x: x.into(),
            group_y: y.into(),
            count,
            f0_x,
            f0_y,
        }
    }

    pub fn with_count(mut self, count: usize) -> Self {
        self.count = count;
        self
    }
}

/// Generator knobs shared by every category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusParams {
    /// Attribute stimuli per set.
    pub attribute_count: usize,
    /// AM rates of A-like (slow) stimuli, Hz.
    pub am_slow: (f64, f64),
    /// AM rates of B-like (fast) stimuli, Hz.
    pub am_fast: (f64, f64),
    pub duration: (f64, f64),
    pub noise_level: f64,
    /// Apply [`loudness_gain`] to every stimulus.
    pub equalize_loudness: bool,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            attribute_count: 30,
            am_slow: (3.0, 5.0),
            am_fast: (25.0, 40.0),
            duration: (0.5, 1.0),
            noise_level: 0.3,
            equalize_loudness: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub path: Option<PathBuf>,
    pub role: Role,
    pub group: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spec: Option<StimulusSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub category: String,
    #[serde(default)]
    pub planted_bias: f64,
    #[serde(default)]
    pub seed: u64,
    pub stimuli: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn count(&self, role: Role) -> usize {
        self.stimuli.iter().filter(|s| s.role == role).count()
    }

    pub fn ids(&self, role: Role) -> impl Iterator<Item = &ManifestEntry> {
        self.stimuli.iter().filter(move |s| s.role == role)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Resolves a stimulus path against the manifest's directory.
    pub fn resolve(&self, entry: &ManifestEntry, manifest_dir: &Path) -> Option<PathBuf> {
        entry
            .path
            .as_ref()
            .map(|p| if p.is_absolute() { p.clone() } else { manifest_dir.join(p) })
    }
}

/// A generated category: manifest plus waveforms in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub waveforms: Vec<Waveform>,
}

impl Corpus {
    /// Reads a manifest and every WAV it lists, resolving relative paths
    /// against the manifest's directory.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let manifest = CorpusManifest::from_json_file(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let waveforms = manifest
            .stimuli
            .par_iter()
            .map(|e| {
                let p = manifest
                    .resolve(e, dir)
                    .ok_or_else(|| Error::InvalidParams(format!("stimulus {} has no path", e.id)))?;
                Waveform::read_wav(p)
            })
            .collect::<Result<_>>()?;
        Ok(Self { manifest, waveforms })
    }

    pub fn waveforms_for(&self, role: Role) -> impl Iterator<Item = (&ManifestEntry, &Waveform)> {
        self.manifest
            .stimuli
            .iter()
            .zip(&self.waveforms)
            .filter(move |(e, _)| e.role == role)
    }
}

fn uniform(rng: &mut rng::Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Attribute specs, drawn from the root seed alone so every category built
/// from one seed shares the same A and B sets. Pair `i` of A and B shares f0
/// and duration; f0 alternates between the pooled target ranges.
pub fn attribute_specs(categories: &[CategorySpec], params: &CorpusParams, seed: u64) -> Vec<StimulusSpec> {
    let mut rng = rng::stream(seed, "attributes");
    let pools: Vec<(f64, f64)> = categories.iter().flat_map(|c| [c.f0_x, c.f0_y]).collect();
    let mut a = Vec::with_capacity(params.attribute_count);
    let mut b = Vec::with_capacity(params.attribute_count);
    for i in 0..params.attribute_count {
        let f0 = uniform(&mut rng, pools[i % pools.len()]);
        let duration = uniform(&mut rng, params.duration);
        let am_a = uniform(&mut rng, params.am_slow);
        let am_b = uniform(&mut rng, params.am_fast);
        let (sa, sb) = (rng.random::<u64>(), rng.random::<u64>());
        let make = |role, group: &str, am_rate, seed| StimulusSpec {
            group: group.into(),
            role,
            f0,
            am_rate,
            duration,
            noise_level: params.noise_level,
            gain: 1.0,
            seed,
        };
        a.push(make(Role::AttrA, "pleasant", am_a, sa));
        b.push(make(Role::AttrB, "unpleasant", am_b, sb));
    }
    a.into_iter().chain(b).collect()
}

/// Target specs for one category. With coupling `p`, an X stimulus takes an
/// A-like (slow) AM rate with probability (1 + p)/2 and a Y stimulus a
/// B-like rate with the same probability; `p = 0` makes AM independent of
/// group.
pub fn target_specs(cat: &CategorySpec, params: &CorpusParams, planted_bias: f64, seed: u64) -> Vec<StimulusSpec> {
    let mut rng = rng::stream(seed, &format!("corpus/{}", cat.name));
    let toward = (1.0 + planted_bias) / 2.0;
    let mut out = Vec::with_capacity(2 * cat.count);
    for (role, group, f0_range, aligned, other) in [
        (Role::TargetX, &cat.group_x, cat.f0_x, params.am_slow, params.am_fast),
        (Role::TargetY, &cat.group_y, cat.f0_y, params.am_fast, params.am_slow),
    ] {
        for _ in 0..cat.count {
            let f0 = uniform(&mut rng, f0_range);
            let duration = uniform(&mut rng, params.duration);
            let am_range = if rng.random_bool(toward) { aligned } else { other };
            let am_rate = uniform(&mut rng, am_range);
            out.push(StimulusSpec {
                group: group.clone(),
                role,
                f0,
                am_rate,
                duration,
                noise_level: params.noise_level,
                gain: 1.0,
                seed: rng.random(),
            });
        }
    }
    out
}

/// Generates targets for `cat` and the shared attribute sets. Rendering
/// fans out over the rayon pool; output order is fixed.
pub fn build_corpus_with(
    cat: &CategorySpec,
    all_categories: &[CategorySpec],
    params: &CorpusParams,
    planted_bias: f64,
    seed: u64,
) -> Result<Corpus> {
    if !(0.0..=1.0).contains(&planted_bias) {
        return Err(Error::InvalidParams(format!("planted_bias {planted_bias} outside [0, 1]")));
    }
    if cat.count < 2 || params.attribute_count < 2 {
        return Err(Error::InvalidParams("every role needs at least two stimuli".into()));
    }
    let mut specs = target_specs(cat, params, planted_bias, seed);
    specs.extend(attribute_specs(all_categories, params, seed));
    if params.equalize_loudness {
        specs.par_iter_mut().try_for_each(|s| -> Result<()> {
            s.gain = loudness_gain(s)?;
            Ok(())
        })?;
    }
    let waveforms = specs.par_iter().map(synth_stimulus).collect::<Result<Vec<_>>>()?;
    let mut counters = [0usize; 4];
    let stimuli = specs
        .into_iter()
        .map(|spec| {
            let slot = Role::ALL.iter().position(|&r| r == spec.role).expect("known role");
            let id = match spec.role {
                Role::TargetX | Role::TargetY => format!("{}_{}_{:03}", cat.name.to_lowercase(), spec.role.as_str(), counters[slot]),
                _ => format!("{}_{:03}", spec.role.as_str(), counters[slot]),
            };
            counters[slot] += 1;
            ManifestEntry {
                id,
                path: None,
                role: spec.role,
                group: spec.group.clone(),
                spec: Some(spec),
            }
        })
        .collect();
    Ok(Corpus {
        manifest: CorpusManifest {
            category: cat.name.clone(),
            planted_bias,
            seed,
            stimuli,
        },
        waveforms,
    })
}

/// [`build_corpus_with`] using the standard categories and default knobs.
pub fn build_corpus(cat: &CategorySpec, planted_bias: f64, seed: u64) -> Result<Corpus> {
    build_corpus_with(cat, &CategorySpec::standard(), &CorpusParams::default(), planted_bias, seed)
}

/// Writes `<dir>/wav/<id>.wav` for every stimulus and `<dir>/manifest.json`
/// with relative paths. Returns the manifest path.
pub fn write_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let wav_dir = dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut manifest = corpus.manifest.clone();
    for (entry, wave) in manifest.stimuli.iter_mut().zip(&corpus.waveforms) {
        let rel = PathBuf::from("wav").join(format!("{}.wav", entry.id));
        wave.write_wav(dir.join(&rel))?;
        entry.path = Some(rel);
    }
    let path = dir.join("manifest.json");
    write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustics::{mel_spectrogram, spectrogram, FrameParams};

    fn spec(f0: f64, am_rate: f64, noise_level: f64) -> StimulusSpec {
        StimulusSpec {
            group: "g".into(),
            role: Role::TargetX,
            f0,
            am_rate,
            duration: 0.5,
            noise_level,
            gain: 1.0,
            seed: 11,
        }
    }

    #[test]
    fn load_rejects_missing_paths() {
        let dir = tempfile::tempdir().unwrap();
        let m = CorpusManifest {
            category: "Gender".into(),
            planted_bias: 0.0,
            seed: 0,
            stimuli: vec![ManifestEntry {
                id: "x".into(),
                path: None,
                role: Role::TargetX,
                group: "Female".into(),
                spec: None,
            }],
        };
        let p = dir.path().join("manifest.json");
        std::fs::write(&p, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(Corpus::load(&p).is_err());
    }

    #[test]
    fn pure_stack_peaks_at_f0() {
        let w = synth_stimulus(&spec(250.0, 0.0, 0.0)).unwrap();
        let params = FrameParams::default();
        let s = spectrogram(&w, &params).unwrap();
        let total = s.frames.sum_axis(ndarray::Axis(0));
        let peak = total
            .iter()
            .enumerate()
            .fold((0, 0.0), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
            .0;
        let bin_hz = 16_000.0 / params.n_fft as f64;
        assert!((peak as f64 * bin_hz - 250.0).abs() <= bin_hz, "peak bin {peak}");
    }

    #[test]
    fn deterministic() {
        let s = spec(130.0, 4.0, 0.05);
        assert_eq!(synth_stimulus(&s).unwrap(), synth_stimulus(&s).unwrap());
    }

    fn mel_centroid(w: &Waveform) -> f64 {
        let m = mel_spectrogram(w, &FrameParams::default(), 80).unwrap();
        let e = m.frames.sum_axis(ndarray::Axis(0));
        e.iter().enumerate().map(|(i, v)| i as f64 * v).sum::<f64>() / e.sum()
    }

    #[test]
    fn octave_apart_centroids_differ() {
        let lo = mel_centroid(&synth_stimulus(&spec(110.0, 0.0, 0.0)).unwrap());
        let hi = mel_centroid(&synth_stimulus(&spec(220.0, 0.0, 0.0)).unwrap());
        assert!(hi - lo > 3.0, "{lo} vs {hi}");
    }

    #[test]
    fn spec_validation() {
        assert!(synth_stimulus(&spec(40.0, 0.0, 0.0)).is_err());
        let mut s = spec(120.0, 0.0, 0.0);
        s.duration = 0.2;
        assert!(synth_stimulus(&s).is_err());
    }

    #[test]
    fn gender_corpus_counts_and_roles() {
        let c = build_corpus(&CategorySpec::gender(), 0.5, 3).unwrap();
        assert_eq!(c.manifest.count(Role::TargetX), 60);
        assert_eq!(c.manifest.count(Role::TargetY), 60);
        assert_eq!(c.manifest.count(Role::AttrA), 30);
        assert_eq!(c.manifest.count(Role::AttrB), 30);
        let mut ids: Vec<_> = c.manifest.stimuli.iter().map(|s| &s.id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), c.manifest.stimuli.len());
        for (e, w) in c.manifest.stimuli.iter().zip(&c.waveforms) {
            let d = w.duration_seconds();
            assert!((0.5..=1.0).contains(&d), "{} lasts {d}", e.id);
        }
    }

    #[test]
    fn attributes_shared_across_categories() {
        let g = build_corpus(&CategorySpec::gender(), 1.0, 8).unwrap();
        let a = build_corpus(&CategorySpec::age(), 1.0, 8).unwrap();
        let attrs = |c: &Corpus| c.waveforms_for(Role::AttrA).map(|(_, w)| w.clone()).collect::<Vec<_>>();
        assert_eq!(attrs(&g), attrs(&a));
    }

    #[test]
    fn full_coupling_aligns_am_with_group() {
        let p = CorpusParams::default();
        let specs = target_specs(&CategorySpec::native(), &p, 1.0, 4);
        for s in specs {
            let slow = s.am_rate < p.am_slow.1;
            assert_eq!(slow, s.role == Role::TargetX);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(build_corpus(&CategorySpec::gender(), 1.5, 0).is_err());
        assert!(build_corpus(&CategorySpec::gender().with_count(1), 0.0, 0).is_err());
    }

    #[test]
    fn written_corpus_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let c = build_corpus(&CategorySpec::gender().with_count(2), 0.0, 1).unwrap();
        let c = Corpus {
            manifest: CorpusManifest {
                stimuli: c.manifest.stimuli[..6].to_vec(),
                ..c.manifest
            },
            waveforms: c.waveforms[..6].to_vec(),
        };
        let path = write_corpus(&c, dir.path()).unwrap();
        let m = CorpusManifest::from_json_file(&path).unwrap();
        assert_eq!(m.stimuli.len(), 6);
        let p = m.resolve(&m.stimuli[0], dir.path()).unwrap();
        let back = Waveform::read_wav(p).unwrap();
        assert_eq!(back, c.waveforms[0].quantized());
    }
}
