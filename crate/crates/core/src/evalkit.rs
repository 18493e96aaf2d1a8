//! Trial scoring and equal error rate.
//!
//! Scores are `logit(bonafide) - logit(spoof)`, so higher means more
//! bona fide. At threshold `t` a trial is accepted when `score >= t`.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::dsp::{FeatureExtractor, Spectrogram};
use crate::losses::Class;
use crate::nn::{Network, NnError, Tensor4};
use crate::synthcorpus::{Manifest, Split};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("EER is undefined without both classes ({bonafide} bona fide, {spoof} spoof)")]
    SingleClass { bonafide: usize, spoof: usize },
    #[error("invalid score set: {0}")]
    Invalid(String),
    #[error("score file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub trial_id: String,
    pub truth: Class,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    records: Vec<ScoreRecord>,
}

impl ScoreSet {
    pub fn new(records: Vec<ScoreRecord>) -> Result<Self> {
        let mut ids = HashSet::new();
        for r in &records {
            if !r.score.is_finite() {
                return Err(EvalError::Invalid(format!("score of {} is not finite", r.trial_id)));
            }
            if !ids.insert(r.trial_id.as_str()) {
                return Err(EvalError::Invalid(format!("duplicate trial id {}", r.trial_id)));
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[ScoreRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One `trial_id truth score` line per record, score in `%.8e`. Reading
    /// parses scores at f32 precision.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.records {
            writeln!(out, "{}\t{}\t{:.8e}", r.trial_id, r.truth.as_str(), r.score)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| EvalError::Parse { line: i + 1, reason };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad(format!("expected 3 fields, found {}", f.len())));
            }
            let truth = Class::parse(f[1]).ok_or_else(|| bad(format!("unknown class {:?}", f[1])))?;
            // scores are produced in f32 and nine digits round-trip f32 exactly
            let score = f[2].parse::<f32>().map_err(|_| bad(format!("bad score {:?}", f[2])))? as f64;
            records.push(ScoreRecord { trial_id: f[0].to_string(), truth, score });
        }
        Self::new(records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// One operating point of the detection-error trade-off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

fn class_counts(s: &ScoreSet) -> (usize, usize) {
    let bona = s.records.iter().filter(|r| r.truth == Class::Bonafide).count();
    (bona, s.records.len() - bona)
}

/// Operating points at the lowest score, every midpoint between distinct
/// consecutive scores, and `+inf`.
pub fn det_curve(s: &ScoreSet) -> Result<Vec<OperatingPoint>> {
    let (n_bona, n_spoof) = class_counts(s);
    if n_bona == 0 || n_spoof == 0 {
        return Err(EvalError::SingleClass { bonafide: n_bona, spoof: n_spoof });
    }
    let mut sorted: Vec<(f64, Class)> = s.records.iter().map(|r| (r.score, r.truth)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::with_capacity(sorted.len() + 1);
    // everything below the threshold is rejected
    let (mut bona_below, mut spoof_below) = (0usize, 0usize);
    let point = |t: f64, bb: usize, sb: usize| OperatingPoint {
        threshold: t,
        far: (n_spoof - sb) as f64 / n_spoof as f64,
        frr: bb as f64 / n_bona as f64,
    };
    points.push(point(sorted[0].0, 0, 0));
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            match sorted[i].1 {
                Class::Bonafide => bona_below += 1,
                Class::Spoof => spoof_below += 1,
            }
            i += 1;
        }
        let t = if i < sorted.len() { v + (sorted[i].0 - v) / 2.0 } else { f64::INFINITY };
        points.push(point(t, bona_below, spoof_below));
    }
    Ok(points)
}

/// Equal error rate, linearly interpolated between the two operating points
/// that bracket the FAR/FRR crossing.
pub fn compute_eer(s: &ScoreSet) -> Result<Eer> {
    let points = det_curve(s)?;
    let d = |p: &OperatingPoint| p.far - p.frr;
    let k = points
        .iter()
        .position(|p| d(p) <= 0.0)
        .expect("the last operating point has FAR 0 and FRR 1");
    let hi = &points[k];
    if d(hi) == 0.0 {
        return Ok(Eer { eer: hi.far, threshold: hi.threshold });
    }
    let lo = &points[k - 1];
    let alpha = d(lo) / (d(lo) - d(hi));
    let eer = lo.far + alpha * (hi.far - lo.far);
    let threshold = if hi.threshold.is_finite() {
        lo.threshold + alpha * (hi.threshold - lo.threshold)
    } else {
        lo.threshold
    };
    Ok(Eer { eer, threshold })
}

pub fn write_det_csv<W: Write>(points: &[OperatingPoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "threshold,far,frr")?;
    for p in points {
        writeln!(out, "{:.8e},{:.6},{:.6}", p.threshold, p.far, p.frr)?;
    }
    Ok(())
}

/// Score of one full-length spectrogram.
pub fn score_spectrogram(net: &Network<f32>, spec: &Spectrogram) -> Result<f64> {
    let x = Tensor4::from_vec([1, spec.frames(), spec.bins(), 1], spec.data().to_vec());
    let out = net.infer(&x)?.output;
    let z = out.item(0);
    Ok((z[0] - z[1]) as f64)
}

#[derive(Debug, Clone)]
pub struct ScoringOutcome {
    pub scores: ScoreSet,
    /// Utterances that could not be scored, with the reason.
    pub failures: Vec<(String, String)>,
}

/// Scores every utterance of `split` on its whole spectrogram. Utterances
/// that cannot be featurised or are shorter than the network's receptive
/// minimum are reported as failures and skipped.
pub fn score_trials(net: &Network<f32>, manifest: &Manifest, split: Split, features: &FeatureExtractor) -> Result<ScoringOutcome> {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for e in manifest.entries.iter().filter(|e| e.split == split) {
        let spec = match features.extract_file(&manifest.resolve(e)) {
            Ok(s) => s,
            Err(err) => {
                failures.push((e.utterance_id.clone(), err.to_string()));
                continue;
            }
        };
        match score_spectrogram(net, &spec) {
            Ok(score) => records.push(ScoreRecord { trial_id: e.utterance_id.clone(), truth: e.class, score }),
            Err(EvalError::Nn(NnError::InputMismatch { .. })) => {
                failures.push((e.utterance_id.clone(), format!("{} frames is too short", spec.frames())));
            }
            Err(err) => return Err(err),
        }
    }
    if !failures.is_empty() {
        log::warn!("{} utterance(s) of the {split} split could not be scored", failures.len());
    }
    Ok(ScoringOutcome { scores: ScoreSet::new(records)?, failures })
}
