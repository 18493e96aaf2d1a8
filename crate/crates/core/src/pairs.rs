//! Same-utterance / different-utterance segment pairs.
//!
//! Pairs are kept as indices and frame offsets into a list of utterances;
//! segments are cut only when a batch is assembled.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::Spectrogram;
use crate::losses::PairLabel;
use crate::seed::rng_from;

#[derive(Debug, Error, PartialEq)]
pub enum PairError {
    #[error("speaker {speaker} has {count} utterance(s); at least 2 are needed")]
    InsufficientUtterances { speaker: String, count: usize },
    #[error("utterances {a} and {b} belong to different speakers")]
    CrossSpeaker { a: String, b: String },
    #[error("invalid pair budget: {0}")]
    Budget(String),
    #[error("utterance {0} has a single frame, so two distinct offsets do not exist")]
    TooShort(String),
}

pub type Result<T> = std::result::Result<T, PairError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairBudget {
    pub pairs_per_speaker: usize,
    pub target_fraction: f64,
    pub seed: u64,
}

impl Default for PairBudget {
    fn default() -> Self {
        Self { pairs_per_speaker: 100, target_fraction: 0.5, seed: 0 }
    }
}

impl PairBudget {
    pub fn validate(&self) -> Result<()> {
        if self.pairs_per_speaker < 2 {
            return Err(PairError::Budget(format!("pairs_per_speaker must be at least 2, got {}", self.pairs_per_speaker)));
        }
        if !(self.target_fraction > 0.0 && self.target_fraction < 1.0) {
            return Err(PairError::Budget(format!("target_fraction must lie in (0, 1), got {}", self.target_fraction)));
        }
        Ok(())
    }

    pub fn positives_per_speaker(&self) -> usize {
        (self.target_fraction * self.pairs_per_speaker as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceInfo {
    pub id: String,
    pub speaker: String,
    pub frames: usize,
}

/// +1 for the same utterance, -1 for two utterances of one speaker.
pub fn pair_label(a: &UtteranceInfo, b: &UtteranceInfo) -> Result<PairLabel> {
    if a.speaker != b.speaker {
        return Err(PairError::CrossSpeaker { a: a.id.clone(), b: b.id.clone() });
    }
    Ok(if a.id == b.id { PairLabel::Same } else { PairLabel::Different })
}

/// Two crops given as utterance indices and start frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairIndex {
    pub utt_a: usize,
    pub offset_a: usize,
    pub utt_b: usize,
    pub offset_b: usize,
    pub label: PairLabel,
}

/// Valid start frames: every non-wrapping offset, or every frame when the
/// utterance is too short and the crop wraps around.
fn offsets(frames: usize, crop: usize) -> usize {
    if frames > crop {
        frames - crop + 1
    } else {
        frames
    }
}

fn group_by_speaker(utts: &[UtteranceInfo]) -> Vec<(&str, Vec<usize>)> {
    let mut groups: Vec<(&str, Vec<usize>)> = Vec::new();
    for (i, u) in utts.iter().enumerate() {
        match groups.iter_mut().find(|(s, _)| *s == u.speaker) {
            Some((_, v)) => v.push(i),
            None => groups.push((&u.speaker, vec![i])),
        }
    }
    groups
}

/// Exactly `pairs_per_speaker` pairs for every speaker, of which
/// `round(target_fraction * pairs_per_speaker)` are positive. Positive pairs
/// use two distinct offsets; negative pairs use two distinct utterances.
/// The returned list is shuffled across speakers.
pub fn sample_pairs(utts: &[UtteranceInfo], budget: &PairBudget, crop: usize) -> Result<Vec<PairIndex>> {
    budget.validate()?;
    assert!(crop > 0, "crop length must be positive");
    let groups = group_by_speaker(utts);
    for (speaker, members) in &groups {
        if members.len() < 2 {
            return Err(PairError::InsufficientUtterances { speaker: speaker.to_string(), count: members.len() });
        }
        if let Some(&i) = members.iter().find(|&&i| utts[i].frames < 2) {
            return Err(PairError::TooShort(utts[i].id.clone()));
        }
    }
    let mut rng = rng_from(budget.seed);
    let positives = budget.positives_per_speaker();
    let mut pairs = Vec::with_capacity(groups.len() * budget.pairs_per_speaker);
    for (_, members) in &groups {
        for k in 0..budget.pairs_per_speaker {
            if k < positives {
                let u = members[rng.random_range(0..members.len())];
                let n = offsets(utts[u].frames, crop);
                // n >= 2 because every utterance has at least two frames
                let a = rng.random_range(0..n);
                let b = (a + rng.random_range(1..n)) % n;
                pairs.push(PairIndex { utt_a: u, offset_a: a, utt_b: u, offset_b: b, label: PairLabel::Same });
            } else {
                let i = rng.random_range(0..members.len());
                let j = (i + rng.random_range(1..members.len())) % members.len();
                let (ua, ub) = (members[i], members[j]);
                pairs.push(PairIndex {
                    utt_a: ua,
                    offset_a: rng.random_range(0..offsets(utts[ua].frames, crop)),
                    utt_b: ub,
                    offset_b: rng.random_range(0..offsets(utts[ub].frames, crop)),
                    label: PairLabel::Different,
                });
            }
        }
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

/// Cuts the two crops of a pair.
pub fn materialize(pair: &PairIndex, specs: &[Spectrogram], crop: usize) -> (Spectrogram, Spectrogram) {
    (
        specs[pair.utt_a].cyclic_window(pair.offset_a, crop),
        specs[pair.utt_b].cyclic_window(pair.offset_b, crop),
    )
}

/// One line per pair: `utt_a offset_a utt_b offset_b label`, tab separated.
pub fn export_pairs<W: Write>(pairs: &[PairIndex], utts: &[UtteranceInfo], mut out: W) -> std::io::Result<()> {
    for p in pairs {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            utts[p.utt_a].id,
            p.offset_a,
            utts[p.utt_b].id,
            p.offset_b,
            p.label.value()
        )?;
    }
    Ok(())
}
