//! Classic acoustic front-ends: STFT, power spectrogram, mel filterbank
//! energies and MFCCs.
//!
//! All front-ends are pure functions of the waveform and the framing
//! parameters. Frame `i` covers samples `[i * hop, i * hop + window)`, which
//! is Hann (or rectangular) weighted and zero-padded to `n_fft` before the
//! transform, giving `1 + (len - window) / hop` frames.

use std::path::Path;

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
/// Floor added to mel energies before taking the log.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidParams("sample_rate must be positive".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Integer-factor decimation with a boxcar anti-alias filter.
    pub fn decimate(&self, factor: u32) -> Result<Waveform> {
        if factor == 0 || !self.sample_rate.is_multiple_of(factor) {
            return Err(Error::InvalidParams(format!("cannot decimate {} Hz by {factor}", self.sample_rate)));
        }
        let f = factor as usize;
        let samples = self.samples.chunks_exact(f).map(|c| c.iter().sum::<f64>() / f as f64).collect();
        Waveform::new(samples, self.sample_rate / factor)
    }

    /// Reads mono 16-bit PCM. Rates that are integer multiples of 16 kHz are
    /// decimated to 16 kHz.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
        let mut reader = hound::WavReader::open(path.as_ref())?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::Format(format!(
                "{}: expected mono 16-bit PCM, got {} ch / {} bit",
                path.as_ref().display(),
                spec.channels,
                spec.bits_per_sample
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let wave = Waveform::new(samples, spec.sample_rate)?;
        if spec.sample_rate > DEFAULT_SAMPLE_RATE && spec.sample_rate % DEFAULT_SAMPLE_RATE == 0 {
            wave.decimate(spec.sample_rate / DEFAULT_SAMPLE_RATE)
        } else {
            Ok(wave)
        }
    }

    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
        for &s in &self.samples {
            writer.write_sample(pcm16(s))?;
        }
        writer.finalize()?;
        Ok(())
    }

    /// The waveform as it reads back after a 16-bit PCM round trip.
    pub fn quantized(&self) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|&s| f64::from(pcm16(s)) / 32768.0).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

fn pcm16(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Hann,
    Rectangular,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameParams {
    pub window_samples: usize,
    pub hop_samples: usize,
    pub n_fft: usize,
    pub window: WindowKind,
}

impl Default for FrameParams {
    /// 25 ms Hann window, 10 ms hop, 512-point FFT at 16 kHz.
    fn default() -> Self {
        Self::for_rate(DEFAULT_SAMPLE_RATE)
    }
}

impl FrameParams {
    pub fn for_rate(sample_rate: u32) -> Self {
        let sr = sample_rate as usize;
        Self {
            window_samples: sr / 40,
            hop_samples: sr / 100,
            n_fft: 512,
            window: WindowKind::Hann,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.window_samples {
            0
        } else {
            1 + (len - self.window_samples) / self.hop_samples
        }
    }

    fn validate(&self, len: usize) -> Result<()> {
        if self.window_samples == 0 || self.hop_samples == 0 {
            return Err(Error::InvalidParams("window and hop must be positive".into()));
        }
        if self.n_fft < self.window_samples {
            return Err(Error::InvalidParams(format!(
                "n_fft {} shorter than window {}",
                self.n_fft, self.window_samples
            )));
        }
        if len < self.window_samples {
            return Err(Error::SignalTooShort {
                len,
                window: self.window_samples,
            });
        }
        Ok(())
    }

    fn window_coefficients(&self) -> Vec<f64> {
        let n = self.window_samples;
        match self.window {
            WindowKind::Rectangular => vec![1.0; n],
            // periodic Hann
            WindowKind::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    StftComplex,
    Spectrogram,
    Mel,
    LogMel,
    Mfcc,
}

impl FeatureKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::StftComplex => "stft",
            FeatureKind::Spectrogram => "spectrogram",
            FeatureKind::Mel => "mel",
            FeatureKind::LogMel => "log_mel",
            FeatureKind::Mfcc => "mfcc",
        }
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "stft" | "stft_complex" => FeatureKind::StftComplex,
            "spectrogram" => FeatureKind::Spectrogram,
            "mel" => FeatureKind::Mel,
            "log_mel" => FeatureKind::LogMel,
            "mfcc" => FeatureKind::Mfcc,
            other => return Err(Error::InvalidParams(format!("unknown feature kind {other:?}"))),
        })
    }
}

/// Real-valued frame features. STFT frames stored here interleave the real
/// and imaginary part of every bin.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    pub frames: Array2<f64>,
    pub kind: FeatureKind,
    pub hop_seconds: f64,
    pub window_seconds: f64,
}

impl FrameMatrix {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.frames.ncols()
    }

    /// Per-feature zero mean / unit variance over time. Constant features are
    /// only centred.
    pub fn standardized(&self) -> FrameMatrix {
        let mut frames = self.frames.clone();
        let n = frames.nrows().max(1) as f64;
        for mut col in frames.axis_iter_mut(Axis(1)) {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
            col.mapv_inplace(|v| (v - mean) * scale);
        }
        FrameMatrix {
            frames,
            kind: self.kind,
            hop_seconds: self.hop_seconds,
            window_seconds: self.window_seconds,
        }
    }
}

/// Complex STFT, `n_frames x (n_fft / 2 + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StftFrames {
    pub bins: Array2<Complex64>,
    pub hop_seconds: f64,
    pub window_seconds: f64,
}

impl StftFrames {
    pub fn to_frame_matrix(&self) -> FrameMatrix {
        let (rows, cols) = self.bins.dim();
        let mut frames = Array2::zeros((rows, 2 * cols));
        for ((r, c), z) in self.bins.indexed_iter() {
            frames[[r, 2 * c]] = z.re;
            frames[[r, 2 * c + 1]] = z.im;
        }
        FrameMatrix {
            frames,
            kind: FeatureKind::StftComplex,
            hop_seconds: self.hop_seconds,
            window_seconds: self.window_seconds,
        }
    }
}

fn timing(w: &Waveform, p: &FrameParams) -> (f64, f64) {
    let sr = f64::from(w.sample_rate);
    (p.hop_samples as f64 / sr, p.window_samples as f64 / sr)
}

pub fn stft(w: &Waveform, params: &FrameParams) -> Result<StftFrames> {
    params.validate(w.len())?;
    let n_frames = params.n_frames(w.len());
    let n_bins = params.n_bins();
    let window = params.window_coefficients();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(params.n_fft);
    let mut bins = Array2::zeros((n_frames, n_bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); params.n_fft];
    for (i, mut row) in bins.axis_iter_mut(Axis(0)).enumerate() {
        let start = i * params.hop_samples;
        buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        for (j, (&x, &c)) in w.samples[start..start + params.window_samples].iter().zip(&window).enumerate() {
            buf[j] = Complex64::new(x * c, 0.0);
        }
        fft.process(&mut buf);
        for (dst, src) in row.iter_mut().zip(&buf[..n_bins]) {
            *dst = *src;
        }
    }
    let (hop_seconds, window_seconds) = timing(w, params);
    Ok(StftFrames {
        bins,
        hop_seconds,
        window_seconds,
    })
}

/// Bin-wise squared STFT magnitude.
pub fn spectrogram(w: &Waveform, params: &FrameParams) -> Result<FrameMatrix> {
    let s = stft(w, params)?;
    Ok(FrameMatrix {
        frames: s.bins.mapv(|z| z.norm_sqr()),
        kind: FeatureKind::Spectrogram,
        hop_seconds: s.hop_seconds,
        window_seconds: s.window_seconds,
    })
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// HTK-style triangular filterbank, `n_mels x (n_fft / 2 + 1)`, spanning
/// `[0, sample_rate / 2]` with unit-peak triangles. Adjacent triangles sum to
/// one between the first and last centre frequency.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Result<Array2<f64>> {
    let n_bins = n_fft / 2 + 1;
    if n_mels == 0 {
        return Err(Error::InvalidParams("n_mels must be at least 1".into()));
    }
    if n_mels > n_bins {
        return Err(Error::TooManyMels { n_mels, n_bins });
    }
    let sr = f64::from(sample_rate);
    let mel_max = hz_to_mel(sr / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut bank = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sr / n_fft as f64;
            let rise = (f - lo) / (mid - lo);
            let fall = (hi - f) / (hi - mid);
            bank[[m, k]] = rise.min(fall).max(0.0);
        }
    }
    Ok(bank)
}

pub fn mel_spectrogram(w: &Waveform, params: &FrameParams, n_mels: usize) -> Result<FrameMatrix> {
    let bank = mel_filterbank(n_mels, params.n_fft, w.sample_rate)?;
    let spec = spectrogram(w, params)?;
    Ok(FrameMatrix {
        frames: spec.frames.dot(&bank.t()),
        kind: FeatureKind::Mel,
        hop_seconds: spec.hop_seconds,
        window_seconds: spec.window_seconds,
    })
}

/// `ln(mel + LOG_FLOOR)`; the model input.
pub fn log_mel_spectrogram(w: &Waveform, params: &FrameParams, n_mels: usize) -> Result<FrameMatrix> {
    let mut mel = mel_spectrogram(w, params, n_mels)?;
    mel.frames.mapv_inplace(|v| (v + LOG_FLOOR).ln());
    mel.kind = FeatureKind::LogMel;
    Ok(mel)
}

/// Orthonormal DCT-II basis, `n_coeffs x n`.
pub fn dct_basis(n: usize, n_coeffs: usize) -> Array2<f64> {
    let nf = n as f64;
    Array2::from_shape_fn((n_coeffs, n), |(k, i)| {
        let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        scale * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * nf)).cos()
    })
}

pub fn mfcc(w: &Waveform, params: &FrameParams, n_mels: usize, n_coeffs: usize) -> Result<FrameMatrix> {
    if n_coeffs == 0 || n_coeffs > n_mels {
        return Err(Error::InvalidParams(format!("n_coeffs {n_coeffs} must be in 1..={n_mels}")));
    }
    let log_mel = log_mel_spectrogram(w, params, n_mels)?;
    let basis = dct_basis(n_mels, n_coeffs);
    // coefficient-by-coefficient so truncation never changes earlier values
    let frames = Array2::from_shape_fn((log_mel.n_frames(), n_coeffs), |(t, k)| basis.row(k).dot(&log_mel.frames.row(t)));
    Ok(FrameMatrix {
        frames,
        kind: FeatureKind::Mfcc,
        hop_seconds: log_mel.hop_seconds,
        window_seconds: log_mel.window_seconds,
    })
}

/// Front-end settings shared by feature extraction and the model input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub frame: FrameParams,
    pub n_mels: usize,
    pub n_mfcc: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            frame: FrameParams::default(),
            n_mels: 80,
            n_mfcc: 13,
        }
    }
}

impl FeatureConfig {
    pub fn compute(&self, kind: FeatureKind, w: &Waveform) -> Result<FrameMatrix> {
        match kind {
            FeatureKind::StftComplex => Ok(stft(w, &self.frame)?.to_frame_matrix()),
            FeatureKind::Spectrogram => spectrogram(w, &self.frame),
            FeatureKind::Mel => mel_spectrogram(w, &self.frame, self.n_mels),
            FeatureKind::LogMel => log_mel_spectrogram(w, &self.frame, self.n_mels),
            FeatureKind::Mfcc => mfcc(w, &self.frame, self.n_mels, self.n_mfcc),
        }
    }
}
