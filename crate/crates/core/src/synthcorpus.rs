//! Seeded synthetic corpus with explicit recording channels and a replay
//! simulator.
//!
//! Every random quantity is drawn from a stream derived from the corpus
//! seed and a textual tag naming what it is for (a speaker voice, a channel,
//! one utterance). Utterances can therefore be generated in any order and
//! regenerated independently.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{self, DspError, Waveform};
use crate::losses::Class;
use crate::seed::{derive_seed, derived_rng, rng_from};

pub const MAX_IR_TAPS: usize = 256;
const TARGET_RMS: f64 = 0.1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus spec: {0}")]
    Spec(String),
    #[error("invalid acoustic config: {0}")]
    Config(String),
    #[error("manifest {path}, line {line}: {reason}")]
    Manifest { path: String, line: usize, reason: String },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.display().to_string(), source }
}

/// One simulated recording step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticConfig {
    pub impulse_response: Vec<f64>,
    /// Signal-to-noise ratio in dB; `None` adds no noise.
    pub noise_db: Option<f64>,
    /// Fourth-order Butterworth cutoff.
    pub lowpass_hz: Option<f64>,
    pub gain_db: f64,
}

impl AcousticConfig {
    pub fn identity() -> Self {
        Self { impulse_response: vec![1.0], noise_db: None, lowpass_hz: None, gain_db: 0.0 }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let ir = &self.impulse_response;
        if ir.is_empty() || ir.len() > MAX_IR_TAPS {
            return Err(CorpusError::Config(format!("impulse response has {} taps (1..={MAX_IR_TAPS})", ir.len())));
        }
        if ir.iter().any(|t| !t.is_finite()) {
            return Err(CorpusError::Config("impulse response has non-finite taps".into()));
        }
        if let Some(db) = self.noise_db {
            if !(0.0..=60.0).contains(&db) {
                return Err(CorpusError::Config(format!("SNR {db} dB outside [0, 60]")));
            }
        }
        if let Some(hz) = self.lowpass_hz {
            let nyquist = sample_rate as f64 / 2.0;
            if !(hz > 0.0 && hz < nyquist) {
                return Err(CorpusError::Config(format!("lowpass {hz} Hz outside (0, {nyquist})")));
            }
        }
        if !self.gain_db.is_finite() {
            return Err(CorpusError::Config("gain is not finite".into()));
        }
        Ok(())
    }
}

/// Linear convolution truncated to the input length.
fn convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|n| {
            let kmax = h.len().min(n + 1);
            (0..kmax).map(|k| h[k] * x[n - k]).sum()
        })
        .collect()
}

/// Direct-form-I biquad from the RBJ lowpass prototype.
fn biquad_lowpass(x: &mut [f64], cutoff: f64, sample_rate: f64, q: f64) {
    let w0 = 2.0 * PI * cutoff / sample_rate;
    let alpha = w0.sin() / (2.0 * q);
    let cos = w0.cos();
    let a0 = 1.0 + alpha;
    let b0 = (1.0 - cos) / 2.0 / a0;
    let b1 = (1.0 - cos) / a0;
    let b2 = b0;
    let a1 = -2.0 * cos / a0;
    let a2 = (1.0 - alpha) / a0;
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for s in x.iter_mut() {
        let y = b0 * *s + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = *s;
        y2 = y1;
        y1 = y;
        *s = y;
    }
}

/// Fourth-order Butterworth as two cascaded biquads.
fn butterworth4_lowpass(x: &mut [f64], cutoff: f64, sample_rate: f64) {
    for k in 0..2 {
        let q = 1.0 / (2.0 * (PI * (2 * k + 1) as f64 / 8.0).cos());
        biquad_lowpass(x, cutoff, sample_rate, q);
    }
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Convolution, low-pass, gain, then white Gaussian noise scaled so that
/// the sample SNR against the processed signal is exactly `noise_db`.
pub fn apply_channel(w: &Waveform, c: &AcousticConfig, seed: u64) -> Result<Waveform> {
    c.validate(w.sample_rate())?;
    let sr = w.sample_rate() as f64;
    let mut y = if c.impulse_response == [1.0] {
        w.samples().to_vec()
    } else {
        convolve_truncated(w.samples(), &c.impulse_response)
    };
    if let Some(hz) = c.lowpass_hz {
        butterworth4_lowpass(&mut y, hz, sr);
    }
    if c.gain_db != 0.0 {
        let g = 10f64.powf(c.gain_db / 20.0);
        y.iter_mut().for_each(|v| *v *= g);
    }
    if let Some(db) = c.noise_db {
        let mut rng = rng_from(seed);
        let noise: Vec<f64> = (0..y.len()).map(|_| rng.sample(StandardNormal)).collect();
        let (ps, pn) = (power(&y), power(&noise));
        if ps > 0.0 && pn > 0.0 {
            let scale = (ps / pn / 10f64.powf(db / 10.0)).sqrt();
            for (v, n) in y.iter_mut().zip(&noise) {
                *v += scale * n;
            }
        }
    }
    Ok(Waveform::new(y, w.sample_rate())?)
}

/// Playback through one channel, then re-recording through another.
pub fn simulate_replay(w: &Waveform, playback: &AcousticConfig, rerecord: &AcousticConfig, seed: u64) -> Result<Waveform> {
    let played = apply_channel(w, playback, derive_seed(seed, "playback"))?;
    apply_channel(&played, rerecord, derive_seed(seed, "rerecord"))
}

/// Speaker-level voice parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerVoice {
    pub f0_hz: f64,
    /// Formant centres as fractions of the Nyquist frequency.
    pub formants: [f64; 3],
    pub breathiness: f64,
}

impl SpeakerVoice {
    pub fn derive(corpus_seed: u64, speaker_id: &str) -> Self {
        let mut rng = derived_rng(corpus_seed, &format!("voice/{speaker_id}"));
        let tract = rng.random_range(0.85..1.15);
        Self {
            f0_hz: rng.random_range(60.0..140.0),
            formants: [0.12 * tract, 0.35 * tract, 0.62 * tract],
            breathiness: rng.random_range(0.01..0.05),
        }
    }

    /// Harmonic source with syllable-level formant and pitch movement and
    /// occasional unvoiced bursts, normalised to RMS 0.1.
    pub fn utterance(&self, duration_s: f64, sample_rate: u32, seed: u64) -> Result<Waveform> {
        let n = (duration_s * sample_rate as f64).round() as usize;
        if n == 0 {
            return Err(CorpusError::Spec(format!("duration {duration_s} s yields no samples")));
        }
        let sr = sample_rate as f64;
        let nyquist = sr / 2.0;
        let mut rng = rng_from(seed);
        let jitter = Normal::<f64>::new(0.0, 1.0).expect("unit normal");
        let mut out = vec![0.0; n];
        let mut phase = 0.0f64;
        let mut f0 = self.f0_hz;
        let mut pos = 0;
        while pos < n {
            let syl = ((rng.random_range(0.12..0.35) * sr) as usize).max(1).min(n - pos);
            let voiced = rng.random_bool(0.85);
            let target_f0 = self.f0_hz * (0.08 * jitter.sample(&mut rng)).exp();
            let centres: Vec<f64> = self
                .formants
                .iter()
                .map(|f| (f * (0.15 * jitter.sample(&mut rng)).exp()).clamp(0.05, 0.95) * nyquist)
                .collect();
            let width = 0.12 * nyquist;
            let level = rng.random_range(0.4..1.0);
            for i in 0..syl {
                let env = (PI * (i as f64 + 0.5) / syl as f64).sin().powi(2) * level;
                let s = if voiced {
                    f0 += 0.002 * (target_f0 - f0) + 0.05 * jitter.sample(&mut rng);
                    phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
                    let mut acc = 0.0;
                    let mut k = 1;
                    while k as f64 * f0 < 0.95 * nyquist {
                        let fk = k as f64 * f0;
                        let amp: f64 = centres
                            .iter()
                            .map(|c| (-((fk - c) / width).powi(2)).exp())
                            .sum::<f64>()
                            + 0.02;
                        acc += amp * (k as f64 * phase).sin();
                        k += 1;
                    }
                    acc
                } else {
                    0.5 * rng.sample::<f64, _>(StandardNormal)
                };
                out[pos + i] = env * s + self.breathiness * rng.sample::<f64, _>(StandardNormal);
            }
            pos += syl;
            let gap = ((rng.random_range(0.02..0.12) * sr) as usize).min(n - pos);
            for i in 0..gap {
                out[pos + i] = self.breathiness * rng.sample::<f64, _>(StandardNormal);
            }
            pos += gap;
        }
        let rms = power(&out).sqrt();
        out.iter_mut().for_each(|v| *v *= TARGET_RMS / rms);
        Ok(Waveform::new(out, sample_rate)?)
    }
}

pub fn make_source_utterance(speaker_id: &str, duration_s: f64, sample_rate: u32, seed: u64) -> Result<Waveform> {
    SpeakerVoice::derive(seed, speaker_id).utterance(duration_s, sample_rate, derive_seed(seed, "utterance"))
}

/// Families of channels the generator draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelKind {
    /// Microphone in a room.
    Recording,
    /// Loudspeaker used to replay an utterance.
    Playback,
}

/// Draws a random channel. Recording channels are a short microphone
/// colouration plus a decaying room tail; playback channels add the
/// band-limiting of a small loudspeaker.
pub fn draw_config(rng: &mut ChaCha8Rng, kind: ChannelKind, sample_rate: u32) -> AcousticConfig {
    let sr = sample_rate as f64;
    let nyquist = sr / 2.0;
    let taps = (rng.random_range(0.01..0.06) * sr).round().clamp(4.0, MAX_IR_TAPS as f64) as usize;
    let mut ir = vec![0.0; taps];
    ir[0] = 1.0;
    let colour_taps = rng.random_range(2..5).min(taps);
    for t in ir.iter_mut().take(colour_taps).skip(1) {
        *t = rng.random_range(-0.6..0.6);
    }
    let tail_level = rng.random_range(0.0..0.3);
    let decay = rng.random_range(3.0..12.0) / taps as f64;
    for (i, t) in ir.iter_mut().enumerate().skip(colour_taps) {
        *t += tail_level * (-decay * i as f64).exp() * rng.sample::<f64, _>(StandardNormal);
    }
    match kind {
        ChannelKind::Recording => AcousticConfig {
            impulse_response: ir,
            noise_db: Some(rng.random_range(20.0..50.0)),
            lowpass_hz: rng.random_bool(0.3).then(|| rng.random_range(0.8..0.97) * nyquist),
            gain_db: rng.random_range(-6.0..6.0),
        },
        ChannelKind::Playback => {
            // small drivers lose the low end: first-difference high-pass
            let hp = rng.random_range(0.5..0.9);
            let mut shaped = convolve_truncated(&ir, &[1.0, -hp]);
            shaped.push(-hp * ir[ir.len() - 1]);
            shaped.truncate(MAX_IR_TAPS);
            AcousticConfig {
                impulse_response: shaped,
                noise_db: Some(rng.random_range(25.0..50.0)),
                lowpass_hz: Some(rng.random_range(0.35..0.7) * nyquist),
                gain_db: rng.random_range(-3.0..9.0),
            }
        }
    }
}

/// Generator knobs. The top-level counts describe the pre-training corpus;
/// `main` describes the spoofing corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub configs_per_speaker: usize,
    pub utterances_per_config: usize,
    pub utterance_seconds: [f64; 2],
    /// This many of the `n_speakers` pre-training speakers form the dev split.
    pub pretrain_dev_speakers: usize,
    pub sample_rate: u32,
    pub seed: u64,
    pub main: MainCorpusSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MainCorpusSpec {
    pub train_speakers: usize,
    pub dev_speakers: usize,
    pub eval_speakers: usize,
    pub utterances_per_speaker: usize,
    pub spoofs_per_bonafide: usize,
    pub utterance_seconds: [f64; 2],
    /// Recording environments and loudspeakers in the train pools. Every
    /// split draws its own pools, so dev and eval channels are unseen.
    pub recording_configs: usize,
    pub playback_configs: usize,
    /// Pool size of each kind for dev and eval.
    pub heldout_configs: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_speakers: 24,
            configs_per_speaker: 4,
            utterances_per_config: 2,
            utterance_seconds: [7.0, 9.0],
            pretrain_dev_speakers: 4,
            sample_rate: 1000,
            seed: 0,
            main: MainCorpusSpec::default(),
        }
    }
}

impl Default for MainCorpusSpec {
    fn default() -> Self {
        Self {
            train_speakers: 4,
            dev_speakers: 4,
            eval_speakers: 8,
            utterances_per_speaker: 3,
            spoofs_per_bonafide: 9,
            utterance_seconds: [4.0, 6.0],
            recording_configs: 3,
            playback_configs: 3,
            heldout_configs: 8,
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
        return Err(CorpusError::Spec(format!("{name} must satisfy 0 < min <= max, got {r:?}")));
    }
    Ok(())
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_speakers", self.n_speakers),
            ("configs_per_speaker", self.configs_per_speaker),
            ("utterances_per_config", self.utterances_per_config),
            ("main.train_speakers", self.main.train_speakers),
            ("main.dev_speakers", self.main.dev_speakers),
            ("main.eval_speakers", self.main.eval_speakers),
            ("main.utterances_per_speaker", self.main.utterances_per_speaker),
            ("main.recording_configs", self.main.recording_configs),
            ("main.playback_configs", self.main.playback_configs),
            ("main.heldout_configs", self.main.heldout_configs),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(CorpusError::Spec(format!("{name} must be at least 1")));
            }
        }
        if self.pretrain_dev_speakers >= self.n_speakers {
            return Err(CorpusError::Spec(format!(
                "pretrain_dev_speakers ({}) must leave training speakers out of {}",
                self.pretrain_dev_speakers, self.n_speakers
            )));
        }
        check_range("utterance_seconds", self.utterance_seconds)?;
        check_range("main.utterance_seconds", self.main.utterance_seconds)?;
        if self.sample_rate < 500 {
            return Err(CorpusError::Spec(format!("sample rate {} Hz is too low", self.sample_rate)));
        }
        Ok(())
    }

    pub fn pretrain_utterance_count(&self) -> usize {
        self.n_speakers * self.configs_per_speaker * self.utterances_per_config
    }

    pub fn pretrain_train_speakers(&self) -> usize {
        self.n_speakers - self.pretrain_dev_speakers
    }

    /// Same corpus with `count` pre-training training speakers. Speakers are
    /// generated by id, so a larger corpus contains every utterance of a
    /// smaller one.
    pub fn with_pretrain_train_speakers(&self, count: usize) -> Self {
        Self { n_speakers: count + self.pretrain_dev_speakers, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "dev" => Some(Split::Dev),
            "eval" => Some(Split::Eval),
            _ => None,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub config_id: String,
    pub class: Class,
    pub split: Split,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, root: PathBuf) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.utterance_id.as_str()) {
                return Err(CorpusError::Spec(format!("duplicate utterance id {}", e.utterance_id)));
            }
        }
        Ok(Self { entries, root })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, split: Split) -> Manifest {
        Manifest {
            entries: self.entries.iter().filter(|e| e.split == split).cloned().collect(),
            root: self.root.clone(),
        }
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Utterance ids grouped by speaker, both in first-appearance order.
    pub fn by_speaker(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<(String, Vec<usize>)> = Vec::new();
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            match index.get(e.speaker_id.as_str()) {
                Some(&k) => order[k].1.push(i),
                None => {
                    index.insert(&e.speaker_id, order.len());
                    order.push((e.speaker_id.clone(), vec![i]));
                }
            }
        }
        order
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.entries {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                e.utterance_id,
                e.speaker_id,
                e.config_id,
                e.class.as_str(),
                e.split,
                e.path.display()
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        self.write(&mut w).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))
    }

    /// Reads a manifest; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let bad = |line: usize, reason: String| CorpusError::Manifest { path: path.display().to_string(), line, reason };
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad(i + 1, format!("expected 6 fields, found {}", f.len())));
            }
            entries.push(ManifestEntry {
                utterance_id: f[0].to_string(),
                speaker_id: f[1].to_string(),
                config_id: f[2].to_string(),
                class: Class::parse(f[3]).ok_or_else(|| bad(i + 1, format!("unknown class {:?}", f[3])))?,
                split: Split::parse(f[4]).ok_or_else(|| bad(i + 1, format!("unknown split {:?}", f[4])))?,
                path: PathBuf::from(f[5]),
            });
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::new(entries, root).map_err(|e| bad(0, e.to_string()))
    }
}

pub const PRETRAIN_MANIFEST: &str = "pretrain.tsv";
pub const MAIN_MANIFEST: &str = "main.tsv";

#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub pretrain: Manifest,
    pub main: Manifest,
}

fn duration(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

struct Writer<'a> {
    root: &'a Path,
    spec: &'a CorpusSpec,
}

impl Writer<'_> {
    fn put(&self, sub: &str, utt: &str, wave: &Waveform) -> Result<PathBuf> {
        let rel = PathBuf::from(sub).join(format!("{utt}.wav"));
        let full = self.root.join(&rel);
        dsp::write_wav(&full, wave)?;
        Ok(rel)
    }

    fn utt_seed(&self, utt: &str) -> u64 {
        derive_seed(self.spec.seed, &format!("utt/{utt}"))
    }

    fn config(&self, id: &str, kind: ChannelKind) -> AcousticConfig {
        draw_config(&mut derived_rng(self.spec.seed, &format!("config/{id}")), kind, self.spec.sample_rate)
    }
}

/// Pre-training utterance: one speaker, one channel, one recording.
fn pretrain_corpus(w: &Writer) -> Result<Manifest> {
    let spec = w.spec;
    let mut entries = Vec::with_capacity(spec.pretrain_utterance_count());
    let n_train = spec.n_speakers - spec.pretrain_dev_speakers;
    // separate id ranges keep a larger corpus a superset of a smaller one
    let speakers = (0..n_train)
        .map(|s| (format!("pspk{s:04}"), Split::Train))
        .chain((0..spec.pretrain_dev_speakers).map(|s| (format!("pdev{s:04}"), Split::Dev)));
    for (speaker, split) in speakers {
        let voice = SpeakerVoice::derive(spec.seed, &speaker);
        for c in 0..spec.configs_per_speaker {
            let config_id = format!("{speaker}_cfg{c}");
            // varied sources: half the channels look like consumer playback chains
            let kind = if derived_rng(spec.seed, &format!("kind/{config_id}")).random_bool(0.5) {
                ChannelKind::Playback
            } else {
                ChannelKind::Recording
            };
            let config = w.config(&config_id, kind);
            for u in 0..spec.utterances_per_config {
                let utt = format!("{config_id}_u{u}");
                let seed = w.utt_seed(&utt);
                let mut rng = rng_from(seed);
                let source = voice.utterance(duration(&mut rng, spec.utterance_seconds), spec.sample_rate, derive_seed(seed, "source"))?;
                let wave = apply_channel(&source, &config, derive_seed(seed, "channel"))?;
                let path = w.put("pretrain", &utt, &wave)?;
                entries.push(ManifestEntry {
                    utterance_id: utt,
                    speaker_id: speaker.clone(),
                    config_id: config_id.clone(),
                    class: Class::Bonafide,
                    split,
                    path,
                });
            }
        }
    }
    Manifest::new(entries, w.root.to_path_buf())
}

/// Spoofing corpus: each source utterance yields one bona fide recording and
/// `spoofs_per_bonafide` replays through loudspeakers of the split's pool.
fn main_corpus(w: &Writer) -> Result<Manifest> {
    let spec = &w.spec.main;
    let mut entries = Vec::new();
    let mut speaker_no = 0;
    for split in Split::ALL {
        let speakers = match split {
            Split::Train => spec.train_speakers,
            Split::Dev => spec.dev_speakers,
            Split::Eval => spec.eval_speakers,
        };
        let (n_rec, n_pb) = match split {
            Split::Train => (spec.recording_configs, spec.playback_configs),
            _ => (spec.heldout_configs, spec.heldout_configs),
        };
        let rec: Vec<(String, AcousticConfig)> = (0..n_rec)
            .map(|i| {
                let id = format!("{split}_rec{i}");
                let c = w.config(&id, ChannelKind::Recording);
                (id, c)
            })
            .collect();
        let pb: Vec<(String, AcousticConfig)> = (0..n_pb)
            .map(|i| {
                let id = format!("{split}_pb{i}");
                let c = w.config(&id, ChannelKind::Playback);
                (id, c)
            })
            .collect();
        for _ in 0..speakers {
            let speaker = format!("mspk{speaker_no:04}");
            speaker_no += 1;
            let voice = SpeakerVoice::derive(w.spec.seed, &speaker);
            for u in 0..spec.utterances_per_speaker {
                let base = format!("{speaker}_u{u}");
                let seed = w.utt_seed(&base);
                let mut rng = rng_from(seed);
                let source = voice.utterance(duration(&mut rng, spec.utterance_seconds), w.spec.sample_rate, derive_seed(seed, "source"))?;
                let (rec_id, rec_cfg) = &rec[rng.random_range(0..rec.len())];
                let bona = format!("{base}_bona");
                let wave = apply_channel(&source, rec_cfg, derive_seed(seed, "bona"))?;
                entries.push(ManifestEntry {
                    path: w.put("main", &bona, &wave)?,
                    utterance_id: bona,
                    speaker_id: speaker.clone(),
                    config_id: rec_id.clone(),
                    class: Class::Bonafide,
                    split,
                });
                for k in 0..spec.spoofs_per_bonafide {
                    let (pb_id, pb_cfg) = &pb[rng.random_range(0..pb.len())];
                    let (rr_id, rr_cfg) = &rec[rng.random_range(0..rec.len())];
                    let utt = format!("{base}_spoof{k}");
                    let wave = simulate_replay(&source, pb_cfg, rr_cfg, derive_seed(seed, &format!("spoof{k}")))?;
                    entries.push(ManifestEntry {
                        path: w.put("main", &utt, &wave)?,
                        utterance_id: utt,
                        speaker_id: speaker.clone(),
                        config_id: format!("{pb_id}+{rr_id}"),
                        class: Class::Spoof,
                        split,
                    });
                }
            }
        }
    }
    Manifest::new(entries, w.root.to_path_buf())
}

/// Writes WAV files under `out_dir/pretrain` and `out_dir/main` plus the
/// two manifests.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<GeneratedCorpus> {
    spec.validate()?;
    for sub in ["pretrain", "main"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let w = Writer { root: out_dir, spec };
    let pretrain = pretrain_corpus(&w)?;
    pretrain.save(&out_dir.join(PRETRAIN_MANIFEST))?;
    let main = main_corpus(&w)?;
    main.save(&out_dir.join(MAIN_MANIFEST))?;
    Ok(GeneratedCorpus { pretrain, main })
}
