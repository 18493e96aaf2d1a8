//! Experiment configuration and the two-phase training pipeline.
//!
//! A run is fully determined by its [`ExperimentConfig`] and a run seed.
//! The run seed also fixes the synthetic corpus: `corpus.seed` is replaced
//! by a value derived from it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dsp::{DspError, FeatureExtractor, FrameParams, Spectrogram};
use crate::evalkit::{self, compute_eer, det_curve, write_det_csv, EvalError, ScoreRecord, ScoreSet};
use crate::losses::{cross_entropy_batch, pair_loss_batch, Class, LossError};
use crate::nn::{DeskNetConfig, Mode, Network, NnError, Tensor4};
use crate::optim::{AdamConfig, AdamState, OptimError};
use crate::pairs::{sample_pairs, PairBudget, PairError, PairIndex, UtteranceInfo};
use crate::seed::{derive_seed, derived_rng};
use crate::synthcorpus::{self, CorpusError, CorpusSpec, MainCorpusSpec, Manifest, Split, MAIN_MANIFEST, PRETRAIN_MANIFEST};
use crate::transfer::{self, Checkpoint, CheckpointMeta, Phase, TransferError};

pub const MAX_EPOCHS: usize = 100;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl ExperimentError {
    /// Process exit status: 1 configuration, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 1,
            ExperimentError::Data(_) => 2,
            ExperimentError::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

impl From<CorpusError> for ExperimentError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Spec(_) | CorpusError::Config(_) => ExperimentError::Config(e.to_string()),
            _ => ExperimentError::Data(e.to_string()),
        }
    }
}

impl From<DspError> for ExperimentError {
    fn from(e: DspError) -> Self {
        match e {
            DspError::InvalidParams(_) => ExperimentError::Config(e.to_string()),
            _ => ExperimentError::Data(e.to_string()),
        }
    }
}

impl From<NnError> for ExperimentError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::NonFinite { .. } => ExperimentError::Numeric(e.to_string()),
            NnError::Spec(_) | NnError::Shape { .. } => ExperimentError::Config(e.to_string()),
            _ => ExperimentError::Data(e.to_string()),
        }
    }
}

impl From<LossError> for ExperimentError {
    fn from(e: LossError) -> Self {
        ExperimentError::Numeric(e.to_string())
    }
}

impl From<OptimError> for ExperimentError {
    fn from(e: OptimError) -> Self {
        match e {
            OptimError::Hyper(_) => ExperimentError::Config(e.to_string()),
            OptimError::Contract(_) => ExperimentError::Numeric(e.to_string()),
        }
    }
}

impl From<PairError> for ExperimentError {
    fn from(e: PairError) -> Self {
        match e {
            PairError::Budget(_) => ExperimentError::Config(e.to_string()),
            _ => ExperimentError::Data(e.to_string()),
        }
    }
}

impl From<TransferError> for ExperimentError {
    fn from(e: TransferError) -> Self {
        match e {
            TransferError::Incompatible { .. } => ExperimentError::Config(e.to_string()),
            _ => ExperimentError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for ExperimentError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Nn(n) => n.into(),
            _ => ExperimentError::Data(e.to_string()),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Data(format!("{}: {e}", path.display()))
}

/// How the pre-training checkpoint handed to main training is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointSelection {
    /// Lowest dev pair loss.
    DevPairLoss,
    /// Main-train from every epoch checkpoint and keep the best dev EER.
    DownstreamSweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairSettings {
    pub pairs_per_speaker: usize,
    pub target_fraction: f64,
    pub dev_pairs_per_speaker: usize,
    pub resample_each_epoch: bool,
}

impl Default for PairSettings {
    fn default() -> Self {
        Self { pairs_per_speaker: 100, target_fraction: 0.5, dev_pairs_per_speaker: 20, resample_each_epoch: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub features: FrameParams,
    pub net: DeskNetConfig,
    pub pairs: PairSettings,
    pub pre_crop_frames: usize,
    pub main_crop_frames: usize,
    pub pre_lr: f64,
    pub main_lr: f64,
    /// Pairs per pre-training batch.
    pub pre_batch: usize,
    pub main_batch: usize,
    pub pre_epochs: usize,
    pub main_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Freeze transferred layers up to this spec index during main training.
    pub freeze_upto: Option<usize>,
    /// Fraction of the pre-training training speakers actually used.
    pub pretrain_speaker_fraction: f64,
    pub checkpoint_selection: CheckpointSelection,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        // desk-scale benchmark: a low sample rate keeps 5 seeds x 2 arms
        // within a CPU budget of minutes on one core
        let features = FrameParams { fft_size: 32, log_compress: true, ..FrameParams::default() };
        let corpus = CorpusSpec {
            n_speakers: 20,
            configs_per_speaker: 8,
            utterances_per_config: 1,
            sample_rate: 600,
            main: MainCorpusSpec { dev_speakers: 6, eval_speakers: 20, utterances_per_speaker: 4, ..MainCorpusSpec::default() },
            ..CorpusSpec::default()
        };
        Self {
            corpus,
            net: DeskNetConfig {
                input_bins: features.bins(),
                nominal_frames: 120,
                conv1_channels: 4,
                block_channels: vec![4, 8, 16],
                embedding_dim: 64,
                ..DeskNetConfig::default()
            },
            features,
            pairs: PairSettings::default(),
            pre_crop_frames: 200,
            main_crop_frames: 120,
            pre_lr: 1e-4,
            main_lr: 5e-4,
            pre_batch: 16,
            main_batch: 32,
            pre_epochs: 16,
            main_epochs: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            freeze_upto: None,
            pretrain_speaker_fraction: 1.0,
            checkpoint_selection: CheckpointSelection::DevPairLoss,
            seeds: vec![1],
            output_dir: PathBuf::from("acp-out"),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ExperimentError::Config(format!("{name} must be positive, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        FeatureExtractor::new(self.corpus.sample_rate, self.features.clone())?;
        if self.net.input_bins != self.features.bins() {
            return Err(ExperimentError::Config(format!(
                "net.input_bins is {} but features.fft_size {} gives {} bins",
                self.net.input_bins,
                self.features.fft_size,
                self.features.bins()
            )));
        }
        let spec = self.net.classifier_spec();
        spec.validate()?;
        for (name, v) in [
            ("pre_batch", self.pre_batch),
            ("main_batch", self.main_batch),
            ("pre_crop_frames", self.pre_crop_frames),
            ("main_crop_frames", self.main_crop_frames),
            ("main_epochs", self.main_epochs),
            ("pre_epochs", self.pre_epochs),
        ] {
            if v == 0 {
                return Err(ExperimentError::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [("pre_epochs", self.pre_epochs), ("main_epochs", self.main_epochs)] {
            if v > MAX_EPOCHS {
                return Err(ExperimentError::Config(format!("{name} is capped at {MAX_EPOCHS}, got {v}")));
            }
        }
        for frames in [self.pre_crop_frames, self.main_crop_frames] {
            spec.shapes_for(frames)?;
        }
        positive("pre_lr", self.pre_lr)?;
        positive("main_lr", self.main_lr)?;
        self.adam(self.pre_lr).validate()?;
        if !(self.pretrain_speaker_fraction > 0.0 && self.pretrain_speaker_fraction <= 1.0) {
            return Err(ExperimentError::Config(format!(
                "pretrain_speaker_fraction must lie in (0, 1], got {}",
                self.pretrain_speaker_fraction
            )));
        }
        self.pair_budget(0).validate()?;
        PairBudget { pairs_per_speaker: self.pairs.dev_pairs_per_speaker, ..self.pair_budget(0) }.validate()?;
        if let Some(f) = self.freeze_upto {
            if f > spec.embedding_layer {
                return Err(ExperimentError::Config(format!(
                    "freeze_upto {f} is past the transferred layers (last {})",
                    spec.embedding_layer
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }

    fn pair_budget(&self, seed: u64) -> PairBudget {
        PairBudget { pairs_per_speaker: self.pairs.pairs_per_speaker, target_fraction: self.pairs.target_fraction, seed }
    }

    pub fn corpus_for(&self, seed: u64) -> CorpusSpec {
        CorpusSpec { seed: derive_seed(seed, "corpus"), ..self.corpus.clone() }
    }

    pub fn extractor(&self) -> Result<FeatureExtractor> {
        Ok(FeatureExtractor::new(self.corpus.sample_rate, self.features.clone())?)
    }

    /// Parses a config file. Keys are merged into the defaults at every
    /// depth, so a partial `corpus` object keeps the benchmark's other
    /// corpus settings. Unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| ExperimentError::Config(format!("config: {e}")))?;
        let mut doc = serde_json::to_value(Self::default()).expect("config serialises");
        merge(&mut doc, user, "")?;
        serde_json::from_value(doc).map_err(|e| ExperimentError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Applies `key=value` overrides on dotted paths. Values are parsed as
    /// JSON when possible and taken as strings otherwise.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(self).expect("config serialises");
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| ExperimentError::Config(format!("override {item:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut doc;
            for part in key.split('.') {
                slot = match slot {
                    Value::Object(map) if map.contains_key(part) => map.get_mut(part).expect("checked"),
                    Value::Array(items) => match part.parse::<usize>().ok().and_then(|i| items.get_mut(i)) {
                        Some(v) => v,
                        None => return Err(ExperimentError::Config(format!("no index {part} in {key}"))),
                    },
                    _ => return Err(ExperimentError::Config(format!("unknown config key {key}"))),
                };
            }
            *slot = value;
        }
        serde_json::from_value(doc).map_err(|e| ExperimentError::Config(format!("override: {e}")))
    }
}

fn merge(base: &mut Value, user: Value, path: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => return Err(ExperimentError::Config(format!("unknown config key {key}"))),
                }
            }
        }
        (slot, v) => *slot = v,
    }
    Ok(())
}

/// Spectrograms of one manifest, held in memory.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    pub infos: Vec<UtteranceInfo>,
    pub classes: Vec<Class>,
    pub splits: Vec<Split>,
    pub specs: Vec<Spectrogram>,
}

impl FeatureBank {
    pub fn load(manifest: &Manifest, features: &FeatureExtractor) -> Result<Self> {
        let mut bank = FeatureBank { infos: Vec::new(), classes: Vec::new(), splits: Vec::new(), specs: Vec::new() };
        for e in &manifest.entries {
            let spec = features.extract_file(&manifest.resolve(e))?;
            bank.infos.push(UtteranceInfo { id: e.utterance_id.clone(), speaker: e.speaker_id.clone(), frames: spec.frames() });
            bank.classes.push(e.class);
            bank.splits.push(e.split);
            bank.specs.push(spec);
        }
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Entries of `split`, keeping only the first `keep` speakers when given.
    pub fn subset(&self, split: Split, keep: Option<usize>) -> FeatureBank {
        let mut speakers: Vec<&str> = Vec::new();
        let mut out = FeatureBank { infos: Vec::new(), classes: Vec::new(), splits: Vec::new(), specs: Vec::new() };
        for i in 0..self.len() {
            if self.splits[i] != split {
                continue;
            }
            let spk = self.infos[i].speaker.as_str();
            if !speakers.contains(&spk) {
                speakers.push(spk);
            }
            if keep.is_some_and(|k| speakers.iter().position(|s| *s == spk).expect("pushed") >= k) {
                continue;
            }
            out.infos.push(self.infos[i].clone());
            out.classes.push(self.classes[i]);
            out.splits.push(self.splits[i]);
            out.specs.push(self.specs[i].clone());
        }
        out
    }

    pub fn speaker_count(&self) -> usize {
        let mut s: Vec<&str> = self.infos.iter().map(|i| i.speaker.as_str()).collect();
        s.sort_unstable();
        s.dedup();
        s.len()
    }
}

fn stack(crops: &[Spectrogram]) -> Tensor4<f32> {
    let (t, f) = (crops[0].frames(), crops[0].bins());
    let mut data = Vec::with_capacity(crops.len() * t * f);
    for c in crops {
        data.extend_from_slice(c.data());
    }
    Tensor4::from_vec([crops.len(), t, f, 1], data)
}

fn pair_batch(pairs: &[PairIndex], bank: &FeatureBank, crop: usize) -> (Tensor4<f32>, Vec<crate::losses::PairLabel>) {
    let mut a = Vec::with_capacity(pairs.len() * 2);
    let mut b = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (x, y) = crate::pairs::materialize(p, &bank.specs, crop);
        a.push(x);
        b.push(y);
    }
    a.extend(b);
    (stack(&a), pairs.iter().map(|p| p.label).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub history: Vec<PretrainEpoch>,
    pub best_epoch: usize,
    pub best: PathBuf,
    pub last: PathBuf,
    /// Every epoch's checkpoint, kept for downstream selection.
    pub epochs: Vec<PathBuf>,
}

/// Mean pair loss over `pairs` with running batch-norm statistics.
pub fn pair_loss_eval(net: &Network<f32>, bank: &FeatureBank, pairs: &[PairIndex], batch: usize, crop: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in pairs.chunks(batch) {
        let (x, labels) = pair_batch(chunk, bank, crop);
        let out = net.infer(&x)?.output;
        total += pair_loss_batch(&out, &labels)?.0 * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Self-supervised phase: cosine pair loss on same-utterance and
/// different-utterance crops of one speaker.
pub fn pretrain(cfg: &ExperimentConfig, seed: u64, bank: &FeatureBank, out_dir: &Path) -> Result<PretrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let train_all = bank.subset(Split::Train, None);
    let keep = ((train_all.speaker_count() as f64 * cfg.pretrain_speaker_fraction).round() as usize).max(1);
    let train = bank.subset(Split::Train, Some(keep));
    let dev = bank.subset(Split::Dev, None);
    if train.is_empty() || dev.is_empty() {
        return Err(ExperimentError::Data("pre-training needs train and dev utterances".into()));
    }
    log::info!("pre-training on {} utterances of {} speakers", train.len(), train.speaker_count());
    let crop = cfg.pre_crop_frames;
    let spec = cfg.net.embedder_spec();
    let mut net = Network::<f32>::build(&spec, derive_seed(seed, "pretrain/init"))?;
    let mut adam = AdamState::new(cfg.adam(cfg.pre_lr), net.params());
    let dev_budget = PairBudget { pairs_per_speaker: cfg.pairs.dev_pairs_per_speaker, ..cfg.pair_budget(derive_seed(seed, "pretrain/dev-pairs")) };
    let dev_pairs = sample_pairs(&dev.infos, &dev_budget, crop)?;
    let mut pairs = sample_pairs(&train.infos, &cfg.pair_budget(derive_seed(seed, "pretrain/pairs")), crop)?;

    let mut history = Vec::new();
    let mut epochs = Vec::new();
    let (best, last) = (out_dir.join("best.ckpt"), out_dir.join("last.ckpt"));
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut log_file = fs::File::create(out_dir.join("pretrain_log.tsv")).map_err(io(out_dir))?;
    writeln!(log_file, "epoch\ttrain_pair_loss\tdev_pair_loss").map_err(io(out_dir))?;
    for epoch in 0..cfg.pre_epochs {
        if cfg.pairs.resample_each_epoch && epoch > 0 {
            pairs = sample_pairs(&train.infos, &cfg.pair_budget(derive_seed(seed, &format!("pretrain/pairs/{epoch}"))), crop)?;
        }
        let mut order = pairs.clone();
        order.shuffle(&mut derived_rng(seed, &format!("pretrain/order/{epoch}")));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.pre_batch) {
            let (x, labels) = pair_batch(chunk, &train, crop);
            let pass = net.forward(&x, Mode::Train)?;
            let (loss, grad) = pair_loss_batch(&pass.output, &labels)?;
            let grads = net.backward(&pass, &grad, false)?;
            adam.step(net.params_mut(), &grads.params)?;
            total += loss * chunk.len() as f64;
        }
        let row = PretrainEpoch {
            epoch,
            train_loss: total / order.len() as f64,
            dev_loss: pair_loss_eval(&net, &dev, &dev_pairs, cfg.pre_batch, crop)?,
        };
        log::info!("pretrain epoch {epoch}: train {:.4} dev {:.4}", row.train_loss, row.dev_loss);
        writeln!(log_file, "{}\t{:.6}\t{:.6}", row.epoch, row.train_loss, row.dev_loss).map_err(io(out_dir))?;
        let meta = CheckpointMeta { phase: Phase::Pretrain, seed, epoch, frozen_upto: None };
        if cfg.checkpoint_selection == CheckpointSelection::DownstreamSweep {
            let p = out_dir.join(format!("epoch{epoch:03}.ckpt"));
            transfer::save_checkpoint(&net, Some(&adam), &meta, &p)?;
            epochs.push(p);
        }
        if row.dev_loss < best_loss {
            best_loss = row.dev_loss;
            best_epoch = epoch;
            transfer::save_checkpoint(&net, Some(&adam), &meta, &best)?;
        }
        history.push(row);
    }
    let meta = CheckpointMeta { phase: Phase::Pretrain, seed, epoch: cfg.pre_epochs - 1, frozen_upto: None };
    transfer::save_checkpoint(&net, Some(&adam), &meta, &last)?;
    Ok(PretrainOutcome { history, best_epoch, best, last, epochs })
}

#[derive(Debug, Clone)]
pub enum Init {
    Random,
    Pretrained(Box<Checkpoint>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_eer: f64,
}

#[derive(Debug, Clone)]
pub struct MainOutcome {
    pub history: Vec<MainEpoch>,
    pub best_epoch: usize,
    pub best_dev_eer: f64,
    pub best: PathBuf,
}

/// Scores every utterance of a bank on its full length.
pub fn score_bank(net: &Network<f32>, bank: &FeatureBank) -> Result<ScoreSet> {
    let mut records = Vec::with_capacity(bank.len());
    for i in 0..bank.len() {
        let score = evalkit::score_spectrogram(net, &bank.specs[i])?;
        records.push(ScoreRecord { trial_id: bank.infos[i].id.clone(), truth: bank.classes[i], score });
    }
    Ok(ScoreSet::new(records)?)
}

/// Supervised phase: two-class cross-entropy on random fixed-length crops.
/// The checkpoint with the lowest dev EER is kept.
pub fn train_main(cfg: &ExperimentConfig, seed: u64, bank: &FeatureBank, init: &Init, out_dir: &Path) -> Result<MainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let train = bank.subset(Split::Train, None);
    let dev = bank.subset(Split::Dev, None);
    if train.is_empty() || dev.is_empty() {
        return Err(ExperimentError::Data("main training needs train and dev utterances".into()));
    }
    let crop = cfg.main_crop_frames;
    let mut net = Network::<f32>::build(&cfg.net.classifier_spec(), derive_seed(seed, "main/init"))?;
    let frozen = match init {
        Init::Random => None,
        Init::Pretrained(ck) => {
            transfer::transfer_weights(ck, &mut net, cfg.freeze_upto)?;
            cfg.freeze_upto
        }
    };
    let mut adam = AdamState::new(cfg.adam(cfg.main_lr), net.params());
    let best = out_dir.join("best.ckpt");
    let mut history = Vec::new();
    let mut best_eer = f64::INFINITY;
    let mut best_epoch = 0;
    let mut log_file = fs::File::create(out_dir.join("train_log.tsv")).map_err(io(out_dir))?;
    writeln!(log_file, "epoch\ttrain_ce\tdev_eer").map_err(io(out_dir))?;
    for epoch in 0..cfg.main_epochs {
        let mut rng = derived_rng(seed, &format!("main/epoch/{epoch}"));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.main_batch) {
            let crops: Vec<Spectrogram> = chunk
                .iter()
                .map(|&i| {
                    let s = &train.specs[i];
                    let offset = if s.frames() > crop { rng.random_range(0..=s.frames() - crop) } else { 0 };
                    s.cyclic_window(offset, crop)
                })
                .collect();
            let classes: Vec<Class> = chunk.iter().map(|&i| train.classes[i]).collect();
            let pass = net.forward(&stack(&crops), Mode::Train)?;
            let (loss, grad) = cross_entropy_batch(&pass.output, &classes)?;
            let grads = net.backward(&pass, &grad, false)?;
            adam.step(net.params_mut(), &grads.params)?;
            total += loss * chunk.len() as f64;
        }
        let dev_eer = compute_eer(&score_bank(&net, &dev)?)?.eer;
        let row = MainEpoch { epoch, train_loss: total / train.len() as f64, dev_eer };
        log::info!("main epoch {epoch}: train {:.4} dev EER {:.4}", row.train_loss, row.dev_eer);
        writeln!(log_file, "{}\t{:.6}\t{:.6}", row.epoch, row.train_loss, row.dev_eer).map_err(io(out_dir))?;
        if dev_eer < best_eer {
            best_eer = dev_eer;
            best_epoch = epoch;
            let meta = CheckpointMeta { phase: Phase::Maintrain, seed, epoch, frozen_upto: frozen };
            transfer::save_checkpoint(&net, Some(&adam), &meta, &best)?;
        }
        history.push(row);
    }
    Ok(MainOutcome { history, best_epoch, best_dev_eer: best_eer, best })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub eer: f64,
    pub threshold: f64,
    pub scores: ScoreSet,
}

/// Scores `split` with a checkpoint and writes `scores.tsv` and `det.csv`
/// into `out_dir`.
pub fn evaluate(ckpt: &Checkpoint, bank: &FeatureBank, split: Split, out_dir: &Path) -> Result<Evaluation> {
    if !ckpt.network.spec().is_classifier() {
        return Err(ExperimentError::Config("evaluation needs a main-training checkpoint with a 2-way head".into()));
    }
    let subset = bank.subset(split, None);
    if subset.is_empty() {
        return Err(ExperimentError::Data(format!("split {split} is empty")));
    }
    let scores = score_bank(&ckpt.network, &subset)?;
    let eer = compute_eer(&scores)?;
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    scores.save(&out_dir.join(format!("{split}_scores.tsv")))?;
    let det = det_curve(&scores)?;
    let path = out_dir.join(format!("{split}_det.csv"));
    let mut f = std::io::BufWriter::new(fs::File::create(&path).map_err(io(&path))?);
    write_det_csv(&det, &mut f).map_err(io(&path))?;
    f.flush().map_err(io(&path))?;
    Ok(Evaluation { eer: eer.eer, threshold: eer.threshold, scores })
}

/// Directory layout of one run.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Self {
        Self { root: cfg.output_dir.join(format!("seed{seed}")) }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn pretrain(&self) -> PathBuf {
        self.root.join("pretrain")
    }

    pub fn train(&self, tag: &str) -> PathBuf {
        self.root.join(format!("train_{tag}"))
    }

    pub fn eval(&self, tag: &str) -> PathBuf {
        self.root.join(format!("eval_{tag}"))
    }
}

pub fn generate_data(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<synthcorpus::GeneratedCorpus> {
    cfg.validate()?;
    Ok(synthcorpus::generate_corpus(&cfg.corpus_for(seed), dir)?)
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    if !path.exists() {
        return Err(ExperimentError::Config(format!("manifest {} does not exist; run gen-data first", path.display())));
    }
    Ok(Manifest::load(path)?)
}

pub fn load_bank(cfg: &ExperimentConfig, data_dir: &Path, which: &str) -> Result<FeatureBank> {
    let name = match which {
        "pretrain" => PRETRAIN_MANIFEST,
        _ => MAIN_MANIFEST,
    };
    FeatureBank::load(&load_manifest(&data_dir.join(name))?, &cfg.extractor()?)
}

/// Main-trains from every pre-training epoch checkpoint and returns the one
/// whose main training reached the lowest dev EER.
pub fn sweep_pretrain_checkpoints(cfg: &ExperimentConfig, seed: u64, main: &FeatureBank, candidates: &[PathBuf], work: &Path) -> Result<PathBuf> {
    let mut best: Option<(f64, PathBuf)> = None;
    for (i, path) in candidates.iter().enumerate() {
        let ck = transfer::load_checkpoint(path)?;
        let outcome = train_main(cfg, seed, main, &Init::Pretrained(Box::new(ck)), &work.join(format!("sweep{i:03}")))?;
        if best.as_ref().is_none_or(|(e, _)| outcome.best_dev_eer < *e) {
            best = Some((outcome.best_dev_eer, path.clone()));
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| ExperimentError::Data("no pre-training checkpoints to sweep".into()))
}

/// Result of one full pipeline for one seed.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub pretrain: Option<PretrainOutcome>,
    pub main: MainOutcome,
    pub dev: Evaluation,
    pub eval: Evaluation,
}

/// gen-data, pre-training (unless `pretrained` is false), main training and
/// evaluation, all under `RunPaths::new(cfg, seed)`.
pub fn run_pipeline(cfg: &ExperimentConfig, seed: u64, pretrained: bool) -> Result<PipelineOutcome> {
    let paths = RunPaths::new(cfg, seed);
    generate_data(cfg, seed, &paths.data())?;
    let main_bank = load_bank(cfg, &paths.data(), "main")?;
    let (init, pre) = if pretrained {
        let pre_bank = load_bank(cfg, &paths.data(), "pretrain")?;
        let outcome = pretrain(cfg, seed, &pre_bank, &paths.pretrain())?;
        let chosen = match cfg.checkpoint_selection {
            CheckpointSelection::DevPairLoss => outcome.best.clone(),
            CheckpointSelection::DownstreamSweep => {
                sweep_pretrain_checkpoints(cfg, seed, &main_bank, &outcome.epochs, &paths.root.join("sweep"))?
            }
        };
        (Init::Pretrained(Box::new(transfer::load_checkpoint(&chosen)?)), Some(outcome))
    } else {
        (Init::Random, None)
    };
    let tag = if pretrained { "pretrained" } else { "random" };
    let main = train_main(cfg, seed, &main_bank, &init, &paths.train(tag))?;
    let ck = transfer::load_checkpoint(&main.best)?;
    let dev = evaluate(&ck, &main_bank, Split::Dev, &paths.eval(tag))?;
    let eval = evaluate(&ck, &main_bank, Split::Eval, &paths.eval(tag))?;
    Ok(PipelineOutcome { pretrain: pre, main, dev, eval })
}

/// Experiment grids: learning rates, pre-training data scale, pair budget and initialisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAxis {
    LrGrid,
    DataScale,
    PairDoubling,
    InitMode,
}

impl GridAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lr-grid" => Some(GridAxis::LrGrid),
            "data-scale" => Some(GridAxis::DataScale),
            "pair-doubling" => Some(GridAxis::PairDoubling),
            "init-mode" => Some(GridAxis::InitMode),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GridAxis::LrGrid => "lr-grid",
            GridAxis::DataScale => "data-scale",
            GridAxis::PairDoubling => "pair-doubling",
            GridAxis::InitMode => "init-mode",
        }
    }
}

/// One grid row: labelled settings, then per-seed results.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub labels: Vec<(String, String)>,
    pub dev_eer: Vec<f64>,
    pub eval_eer: Vec<f64>,
    pub failures: Vec<String>,
}

impl GridCell {
    fn mean(v: &[f64]) -> Option<f64> {
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_dev(&self) -> Option<f64> {
        Self::mean(&self.dev_eer)
    }

    pub fn mean_eval(&self) -> Option<f64> {
        Self::mean(&self.eval_eer)
    }
}

#[derive(Debug, Clone)]
pub struct GridReport {
    pub axis: GridAxis,
    pub cells: Vec<GridCell>,
}

impl GridReport {
    pub fn failed(&self) -> usize {
        self.cells.iter().map(|c| c.failures.len()).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if let Some(first) = self.cells.first() {
            let keys: Vec<&str> = first.labels.iter().map(|(k, _)| k.as_str()).collect();
            out.push_str(&format!("{},dev_eer,eval_eer,runs,failures\n", keys.join(",")));
        }
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "NA".into());
        for c in &self.cells {
            let vals: Vec<&str> = c.labels.iter().map(|(_, v)| v.as_str()).collect();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                vals.join(","),
                fmt(c.mean_dev()),
                fmt(c.mean_eval()),
                c.eval_eer.len(),
                c.failures.len()
            ));
        }
        out
    }

    /// Fixed-width table with EER in percent.
    pub fn to_text(&self) -> String {
        let mut rows: Vec<Vec<String>> = Vec::new();
        if let Some(first) = self.cells.first() {
            let mut h: Vec<String> = first.labels.iter().map(|(k, _)| k.clone()).collect();
            h.extend(["dev %".to_string(), "eval %".to_string()]);
            rows.push(h);
        }
        let pct = |v: Option<f64>| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "failed".into());
        for c in &self.cells {
            let mut r: Vec<String> = c.labels.iter().map(|(_, v)| v.clone()).collect();
            r.extend([pct(c.mean_dev()), pct(c.mean_eval())]);
            rows.push(r);
        }
        let widths: Vec<usize> = (0..rows.first().map_or(0, |r| r.len()))
            .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
            .collect();
        let mut out = format!("{}\n", self.axis.name());
        for r in &rows {
            let line: Vec<String> = r.iter().zip(&widths).map(|(v, w)| format!("{v:>w$}")).collect();
            out.push_str(&line.join("  "));
            out.push('\n');
        }
        out
    }
}

fn lr_label(v: f64) -> String {
    format!("{v:.0e}")
}

struct CellPlan {
    labels: Vec<(String, String)>,
    cfg: ExperimentConfig,
    /// Pre-training variant key; `None` trains from random weights.
    pretrain: Option<String>,
}

/// Runs every cell of `axis` for every configured seed. Cell failures are
/// recorded and the grid continues.
pub fn run_grid(cfg: &ExperimentConfig, axis: GridAxis) -> Result<GridReport> {
    cfg.validate()?;
    let mut plans: Vec<CellPlan> = Vec::new();
    let label = |pairs: &[(&str, String)]| pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect::<Vec<_>>();
    let base_speakers = cfg.corpus.pretrain_train_speakers();
    match axis {
        GridAxis::LrGrid => {
            for batch in [32, 16] {
                for lr in [1e-4, 5e-4] {
                    let c = ExperimentConfig { main_lr: lr, main_batch: batch, ..cfg.clone() };
                    plans.push(CellPlan {
                        labels: label(&[("system", "baseline".into()), ("pre_lr", "-".into()), ("main_lr", lr_label(lr)), ("batch", batch.to_string())]),
                        cfg: c,
                        pretrain: None,
                    });
                }
            }
            for batch in [32, 16] {
                for pre_lr in [1e-4, 5e-4, 1e-3] {
                    for lr in [1e-4, 5e-4] {
                        let c = ExperimentConfig { pre_lr, main_lr: lr, main_batch: batch, ..cfg.clone() };
                        plans.push(CellPlan {
                            labels: label(&[("system", "pretrained".into()), ("pre_lr", lr_label(pre_lr)), ("main_lr", lr_label(lr)), ("batch", batch.to_string())]),
                            cfg: c,
                            pretrain: Some(format!("prelr{pre_lr:e}")),
                        });
                    }
                }
            }
        }
        GridAxis::DataScale => {
            // the double-size corpus contains the base corpus as a prefix
            let corpus = cfg.corpus.with_pretrain_train_speakers(2 * base_speakers);
            for (name, frac) in [("half", 0.25), ("base", 0.5), ("double", 1.0)] {
                for lr in [1e-4, 5e-4] {
                    let c = ExperimentConfig { corpus: corpus.clone(), pretrain_speaker_fraction: frac, main_lr: lr, ..cfg.clone() };
                    let speakers = ((2 * base_speakers) as f64 * frac).round() as usize;
                    plans.push(CellPlan {
                        labels: label(&[("dataset", format!("{name} ({speakers})")), ("pre_lr", lr_label(cfg.pre_lr)), ("main_lr", lr_label(lr))]),
                        cfg: c,
                        pretrain: Some(format!("scale-{name}")),
                    });
                }
            }
        }
        GridAxis::PairDoubling => {
            for (name, factor) in [("base", 1), ("doubled", 2)] {
                let pairs = PairSettings { pairs_per_speaker: cfg.pairs.pairs_per_speaker * factor, ..cfg.pairs.clone() };
                plans.push(CellPlan {
                    labels: label(&[("pairs", name.into()), ("pairs_per_speaker", pairs.pairs_per_speaker.to_string())]),
                    cfg: ExperimentConfig { pairs, ..cfg.clone() },
                    pretrain: Some(format!("pairs-{name}")),
                });
            }
        }
        GridAxis::InitMode => {
            plans.push(CellPlan { labels: label(&[("init", "random".into())]), cfg: cfg.clone(), pretrain: None });
            plans.push(CellPlan { labels: label(&[("init", "pretrained".into())]), cfg: cfg.clone(), pretrain: Some("base".into()) });
            let frozen = cfg.net.last_block_layer();
            plans.push(CellPlan {
                labels: label(&[("init", format!("pretrained+freeze{frozen}"))]),
                cfg: ExperimentConfig { freeze_upto: Some(frozen), ..cfg.clone() },
                pretrain: Some("base".into()),
            });
        }
    }

    let mut cells: Vec<GridCell> = plans
        .iter()
        .map(|p| GridCell { labels: p.labels.clone(), dev_eer: Vec::new(), eval_eer: Vec::new(), failures: Vec::new() })
        .collect();
    let root = cfg.output_dir.join(format!("grid_{}", axis.name()));
    for &seed in &cfg.seeds {
        let seed_dir = root.join(format!("seed{seed}"));
        let data = seed_dir.join("data");
        // every cell of a grid shares one corpus per seed
        let corpus_cfg = &plans[0].cfg;
        let banks = generate_data(corpus_cfg, seed, &data)
            .and_then(|_| Ok((load_bank(corpus_cfg, &data, "pretrain")?, load_bank(corpus_cfg, &data, "main")?)));
        let (pre_bank, main_bank) = match banks {
            Ok(b) => b,
            Err(e) => {
                for c in &mut cells {
                    c.failures.push(format!("seed {seed}: {e}"));
                }
                continue;
            }
        };
        let mut pretrained: Vec<(String, std::result::Result<Checkpoint, String>)> = Vec::new();
        for (i, plan) in plans.iter().enumerate() {
            let cell_dir = seed_dir.join(format!("cell{i:02}"));
            let init = match &plan.pretrain {
                None => Ok(Init::Random),
                Some(key) => {
                    if !pretrained.iter().any(|(k, _)| k == key) {
                        let r = pretrain(&plan.cfg, seed, &pre_bank, &seed_dir.join(format!("pretrain_{key}")))
                            .and_then(|o| Ok(transfer::load_checkpoint(&o.best)?))
                            .map_err(|e| e.to_string());
                        pretrained.push((key.clone(), r));
                    }
                    let (_, r) = pretrained.iter().find(|(k, _)| k == key).expect("inserted");
                    r.clone().map(|c| Init::Pretrained(Box::new(c)))
                }
            };
            let result = init
                .map_err(ExperimentError::Data)
                .and_then(|init| train_main(&plan.cfg, seed, &main_bank, &init, &cell_dir))
                .and_then(|m| {
                    let ck = transfer::load_checkpoint(&m.best)?;
                    let dev = evaluate(&ck, &main_bank, Split::Dev, &cell_dir)?;
                    let eval = evaluate(&ck, &main_bank, Split::Eval, &cell_dir)?;
                    Ok((dev.eer, eval.eer))
                });
            match result {
                Ok((d, e)) => {
                    cells[i].dev_eer.push(d);
                    cells[i].eval_eer.push(e);
                }
                Err(e) => {
                    log::warn!("grid cell {i} seed {seed} failed: {e}");
                    cells[i].failures.push(format!("seed {seed}: {e}"));
                }
            }
        }
    }
    let report = GridReport { axis, cells };
    fs::create_dir_all(&root).map_err(io(&root))?;
    fs::write(root.join("results.csv"), report.to_csv()).map_err(io(&root))?;
    fs::write(root.join("results.txt"), report.to_text()).map_err(io(&root))?;
    Ok(report)
}
