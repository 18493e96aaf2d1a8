//! Audio ingestion and magnitude-spectrogram features.
//!
//! Frames never extend past the signal edges: frame `t` covers samples
//! `[t * shift, t * shift + window)`, so a waveform of `len` samples yields
//! `floor((len - window) / shift) + 1` frames. Each frame is tapered, zero
//! padded to `fft_size` and transformed; the spectrogram keeps the
//! `fft_size / 2 + 1` non-negative-frequency magnitudes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_from;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("malformed audio file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("unsupported audio encoding in {path}: {reason}")]
    Unsupported { path: String, reason: String },
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("invalid frame parameters: {0}")]
    InvalidParams(String),
    #[error("waveform of {len} samples is shorter than one {window}-sample window")]
    TooShort { len: usize, window: usize },
    #[error("sample rate {found} Hz does not match the expected {expected} Hz")]
    SampleRateMismatch { expected: u32, found: u32 },
    #[error("malformed spectrogram dump: {0}")]
    BadDump(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DspError>;

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(DspError::InvalidWaveform("no samples".into()));
        }
        if sample_rate == 0 {
            return Err(DspError::InvalidWaveform("sample rate is zero".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(DspError::InvalidWaveform(format!(
                "sample {i} is not finite"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn rms(&self) -> f64 {
        let energy: f64 = self.samples.iter().map(|s| s * s).sum();
        (energy / self.samples.len() as f64).sqrt()
    }
}

/// Reads a PCM16 or PCM32 RIFF/WAVE file. Multi-channel audio is averaged
/// down to mono; integer samples are divided by the integer full scale.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let shown = path.display().to_string();
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(e, &shown))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(DspError::Unsupported {
            path: shown,
            reason: "IEEE float samples (only PCM16/PCM32 are accepted)".into(),
        });
    }
    if spec.bits_per_sample != 16 && spec.bits_per_sample != 32 {
        return Err(DspError::Unsupported {
            path: shown,
            reason: format!("{}-bit PCM", spec.bits_per_sample),
        });
    }
    let channels = spec.channels.max(1) as usize;
    let full_scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
    let raw: Vec<i32> = reader
        .into_samples::<i32>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| map_hound(e, &shown))?;
    if !raw.len().is_multiple_of(channels) {
        return Err(DspError::Format {
            path: shown,
            reason: "sample count is not a multiple of the channel count".into(),
        });
    }
    let samples: Vec<f64> = raw
        .chunks_exact(channels)
        .map(|frame| {
            let sum: f64 = frame.iter().map(|&s| s as f64 / full_scale).sum();
            sum / channels as f64
        })
        .collect();
    if samples.is_empty() {
        return Err(DspError::Format {
            path: shown,
            reason: "no audio frames".into(),
        });
    }
    Waveform::new(samples, spec.sample_rate)
}

fn map_hound(err: hound::Error, path: &str) -> DspError {
    match err {
        hound::Error::IoError(e) if e.kind() == std::io::ErrorKind::NotFound => DspError::Io(e),
        hound::Error::IoError(e) => DspError::Format {
            path: path.to_string(),
            reason: e.to_string(),
        },
        hound::Error::Unsupported => DspError::Unsupported {
            path: path.to_string(),
            reason: "codec not supported".into(),
        },
        other => DspError::Format {
            path: path.to_string(),
            reason: other.to_string(),
        },
    }
}

/// Writes mono PCM16. Samples outside [-1, 1] are clipped.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let shown = path.display().to_string();
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(e, &shown))?;
    for &s in &wave.samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(|e| map_hound(e, &shown))?;
    }
    writer.finalize().map_err(|e| map_hound(e, &shown))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowFn {
    #[default]
    PeriodicHann,
    Rectangular,
}

impl WindowFn {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            WindowFn::PeriodicHann => (0..len)
                .map(|n| {
                    0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos()
                })
                .collect(),
            WindowFn::Rectangular => vec![1.0; len],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameParams {
    pub fft_size: usize,
    pub window_ms: f64,
    pub shift_ms: f64,
    pub window_fn: WindowFn,
    /// Apply `ln(1 + x)` to every magnitude.
    pub log_compress: bool,
}

impl Default for FrameParams {
    fn default() -> Self {
        Self {
            fft_size: 2048,
            window_ms: 50.0,
            shift_ms: 30.0,
            window_fn: WindowFn::PeriodicHann,
            log_compress: false,
        }
    }
}

impl FrameParams {
    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn shift_samples(&self, sample_rate: u32) -> usize {
        (self.shift_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.fft_size == 0 || !self.fft_size.is_power_of_two() {
            return Err(DspError::InvalidParams(format!(
                "fft_size {} is not a power of two",
                self.fft_size
            )));
        }
        if !(self.window_ms > 0.0 && self.shift_ms > 0.0) {
            return Err(DspError::InvalidParams(
                "window and shift must be positive".into(),
            ));
        }
        if self.shift_ms > self.window_ms {
            return Err(DspError::InvalidParams(format!(
                "shift {} ms exceeds window {} ms",
                self.shift_ms, self.window_ms
            )));
        }
        let window = self.window_samples(sample_rate);
        if window == 0 || self.shift_samples(sample_rate) == 0 {
            return Err(DspError::InvalidParams(format!(
                "window or shift rounds to zero samples at {sample_rate} Hz"
            )));
        }
        if window > self.fft_size {
            return Err(DspError::InvalidParams(format!(
                "window of {window} samples exceeds fft_size {}",
                self.fft_size
            )));
        }
        Ok(())
    }

    /// Frame count for a waveform of `len` samples, or `None` if it is
    /// shorter than one window.
    pub fn frame_count(&self, len: usize, sample_rate: u32) -> Option<usize> {
        let window = self.window_samples(sample_rate);
        let shift = self.shift_samples(sample_rate);
        (len >= window && shift > 0).then(|| (len - window) / shift + 1)
    }
}

/// Frames x bins magnitude matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    data: Vec<f32>,
}

impl Spectrogram {
    pub fn from_vec(frames: usize, bins: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(DspError::InvalidParams(format!(
                "{} values do not fill {frames}x{bins}",
                data.len()
            )));
        }
        if data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(DspError::InvalidParams(
                "spectrogram entries must be finite and non-negative".into(),
            ));
        }
        Ok(Self { frames, bins, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn get(&self, t: usize, k: usize) -> f32 {
        self.data[t * self.bins + k]
    }

    /// `n_frames` consecutive frames starting at `offset`, wrapping around
    /// the end of the spectrogram.
    pub fn cyclic_window(&self, offset: usize, n_frames: usize) -> Spectrogram {
        let mut data = Vec::with_capacity(n_frames * self.bins);
        for i in 0..n_frames {
            data.extend_from_slice(self.frame((offset + i) % self.frames));
        }
        Spectrogram {
            frames: n_frames,
            bins: self.bins,
            data,
        }
    }

    const MAGIC: &'static [u8; 7] = b"ACSPEC1";

    /// Binary dump: magic, u64 frames, u64 bins, row-major f32, all
    /// little-endian.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(Self::MAGIC)?;
        out.write_all(&(self.frames as u64).to_le_bytes())?;
        out.write_all(&(self.bins as u64).to_le_bytes())?;
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 7];
        input
            .read_exact(&mut magic)
            .map_err(|_| DspError::BadDump("missing magic".into()))?;
        if &magic != Self::MAGIC {
            return Err(DspError::BadDump("wrong magic".into()));
        }
        let mut word = [0u8; 8];
        input
            .read_exact(&mut word)
            .map_err(|_| DspError::BadDump("missing frame count".into()))?;
        let frames = u64::from_le_bytes(word) as usize;
        input
            .read_exact(&mut word)
            .map_err(|_| DspError::BadDump("missing bin count".into()))?;
        let bins = u64::from_le_bytes(word) as usize;
        let count = frames
            .checked_mul(bins)
            .ok_or_else(|| DspError::BadDump("dimensions overflow".into()))?;
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() != count * 4 {
            return Err(DspError::BadDump(format!(
                "expected {} payload bytes, found {}",
                count * 4,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Spectrogram::from_vec(frames, bins, data).map_err(|e| DspError::BadDump(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Short-time Fourier transform magnitudes.
pub fn stft_magnitude(wave: &Waveform, params: &FrameParams) -> Result<Spectrogram> {
    let sr = wave.sample_rate();
    params.validate(sr)?;
    let window = params.window_samples(sr);
    let shift = params.shift_samples(sr);
    let frames = params
        .frame_count(wave.len(), sr)
        .ok_or(DspError::TooShort {
            len: wave.len(),
            window,
        })?;
    let taper = params.window_fn.coefficients(window);
    let bins = params.bins();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(params.fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); params.fft_size];
    let mut data = Vec::with_capacity(frames * bins);
    let samples = wave.samples();
    for t in 0..frames {
        let start = t * shift;
        for (i, slot) in buf.iter_mut().enumerate() {
            let v = if i < window { samples[start + i] * taper[i] } else { 0.0 };
            *slot = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for c in &buf[..bins] {
            let mag = c.norm();
            let v = if params.log_compress { mag.ln_1p() } else { mag };
            data.push(v as f32);
        }
    }
    Ok(Spectrogram { frames, bins, data })
}

/// Feature front end bound to one sample rate; waveforms at any other rate
/// are rejected.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub sample_rate: u32,
    pub params: FrameParams,
}

impl FeatureExtractor {
    pub fn new(sample_rate: u32, params: FrameParams) -> Result<Self> {
        params.validate(sample_rate)?;
        Ok(Self {
            sample_rate,
            params,
        })
    }

    pub fn extract(&self, wave: &Waveform) -> Result<Spectrogram> {
        if wave.sample_rate() != self.sample_rate {
            return Err(DspError::SampleRateMismatch {
                expected: self.sample_rate,
                found: wave.sample_rate(),
            });
        }
        stft_magnitude(wave, &self.params)
    }

    pub fn extract_file(&self, path: &Path) -> Result<Spectrogram> {
        self.extract(&read_wav(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    /// Uniform start offset drawn from a stream seeded with the value.
    Random(u64),
    Center,
    /// Start at frame 0, repeating the source cyclically if needed.
    Tile,
}

/// Exactly `n_frames` frames. Sources shorter than `n_frames` are always
/// tiled cyclically from frame 0.
pub fn crop_frames(spec: &Spectrogram, n_frames: usize, mode: CropMode) -> Spectrogram {
    assert!(n_frames > 0, "crop length must be positive");
    if spec.frames() <= n_frames {
        return spec.cyclic_window(0, n_frames);
    }
    let slack = spec.frames() - n_frames;
    let offset = match mode {
        CropMode::Random(seed) => rng_from(seed).random_range(0..=slack),
        CropMode::Center => slack / 2,
        CropMode::Tile => 0,
    };
    spec.cyclic_window(offset, n_frames)
}
