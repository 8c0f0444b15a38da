//! Synthetic tone corpus and edit-pair simulation.

mod corpus;
mod edit;

pub use corpus::{read_corpus, read_pairs, write_corpus, Corpus, CorpusManifest, Split, StoredPair};
pub use edit::{span_mask, make_edit_pair, segment_targets, simulate_edit_pair, EditAction, EditPair, EditSpec, DEFAULT_SEGMENT_THRESHOLD_DB};

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditions::{Event, EventRoll};
use crate::dsp::{AudioClip, DEFAULT_SAMPLE_RATE};
use crate::error::{ensure, Error, Result};
use crate::model::{band_frequency, CODEC_BINS, DEFAULT_LABELS};

pub const RAMP_SECONDS: f64 = 0.01;
pub const PEAK: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCorpusSpec {
    pub n_clips: usize,
    pub duration: f64,
    /// Label `i` sounds as a sine at codec band `i`.
    pub labels: Vec<String>,
    pub min_events: usize,
    pub max_events: usize,
    pub min_event_len: f64,
    pub max_event_len: f64,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            n_clips: 512,
            duration: 3.0,
            labels: DEFAULT_LABELS.iter().map(|s| s.to_string()).collect(),
            min_events: 1,
            max_events: 3,
            min_event_len: 0.4,
            max_event_len: 2.0,
            seed: 0,
        }
    }
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.duration > 0.0 && self.duration.is_finite(), InvalidArgument, "duration must be positive");
        ensure!(!self.labels.is_empty(), InvalidArgument, "label vocabulary is empty");
        ensure!(self.labels.len() <= CODEC_BINS.len(), InvalidArgument, "at most {} labels have a tone signature", CODEC_BINS.len());
        let mut sorted = self.labels.clone();
        sorted.sort();
        sorted.dedup();
        ensure!(sorted.len() == self.labels.len(), InvalidArgument, "labels must be distinct");
        ensure!(
            self.labels.iter().all(|l| !l.trim().is_empty() && !l.contains(':')),
            InvalidArgument,
            "labels must be non-empty and free of ':'"
        );
        ensure!(
            1 <= self.min_events && self.min_events <= self.max_events && self.max_events <= self.labels.len(),
            InvalidArgument,
            "event count range {}..={} invalid for {} labels",
            self.min_events,
            self.max_events,
            self.labels.len()
        );
        ensure!(
            0.0 < self.min_event_len && self.min_event_len <= self.max_event_len && self.max_event_len <= self.duration,
            InvalidArgument,
            "event length range [{}, {}] invalid for duration {}",
            self.min_event_len,
            self.max_event_len,
            self.duration
        );
        Ok(())
    }

    pub fn samples(&self) -> usize {
        (self.duration * DEFAULT_SAMPLE_RATE as f64).round() as usize
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown label {label:?}")))
    }

    /// Tone frequency of a label.
    pub fn frequency(&self, label: &str) -> Result<f64> {
        Ok(band_frequency(self.label_index(label)?))
    }
}

/// A generated clip with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyClip {
    pub id: String,
    pub roll: EventRoll,
    pub caption: Vec<String>,
    pub audio: AudioClip,
}

fn raised_cosine_gain(t: f64, on: f64, off: f64) -> f64 {
    let ramp = RAMP_SECONDS.min((off - on) / 2.0);
    let x = if t < on + ramp {
        (t - on) / ramp
    } else if t > off - ramp {
        (off - t) / ramp
    } else {
        1.0
    };
    let x = x.clamp(0.0, 1.0);
    0.5 - 0.5 * (PI * x).cos()
}

/// Render a roll: each event's tone over its intervals with 10 ms raised-cosine
/// ramps, summed, then peak-normalised to 0.9 (silence stays silent).
pub fn synth_toy_clip(spec: &ToyCorpusSpec, roll: &EventRoll) -> Result<AudioClip> {
    roll.validate()?;
    let sr = DEFAULT_SAMPLE_RATE as f64;
    let n = ((roll.duration * sr).round() as usize).max(1);
    let mut x = vec![0.0; n];
    for e in &roll.events {
        let w = 2.0 * PI * spec.frequency(&e.label)? / sr;
        for &(on, off) in &e.intervals {
            let (a, b) = ((on * sr).floor() as usize, ((off * sr).ceil() as usize).min(n));
            for (i, v) in x.iter_mut().enumerate().take(b).skip(a) {
                let t = i as f64 / sr;
                *v += raised_cosine_gain(t, on, off) * (w * i as f64).sin();
            }
        }
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= PEAK / peak);
    }
    AudioClip::new(x, DEFAULT_SAMPLE_RATE)
}

fn round_ms(t: f64) -> f64 {
    (t * 1000.0).round() / 1000.0
}

/// 1–3 events with distinct labels, one interval each.
pub fn random_roll(spec: &ToyCorpusSpec, rng: &mut impl Rng) -> Result<EventRoll> {
    spec.validate()?;
    let count = rng.random_range(spec.min_events..=spec.max_events);
    let mut picks = sample(rng, spec.labels.len(), count).into_vec();
    picks.sort_unstable();
    let events = picks
        .into_iter()
        .map(|i| {
            let len = rng.random_range(spec.min_event_len..=spec.max_event_len);
            let on = round_ms(rng.random_range(0.0..=spec.duration - len));
            let off = round_ms(on + len).min(spec.duration);
            Event {
                label: spec.labels[i].clone(),
                intervals: vec![(on, off)],
            }
        })
        .collect();
    EventRoll::new(spec.duration, events)
}

/// Deterministic corpus of `spec.n_clips` clips.
pub fn simulate_corpus(spec: &ToyCorpusSpec) -> Result<Vec<ToyClip>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.n_clips)
        .map(|i| {
            let roll = random_roll(spec, &mut rng)?;
            Ok(ToyClip {
                id: format!("clip{i:05}"),
                caption: roll.labels(),
                audio: synth_toy_clip(spec, &roll)?,
                roll,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
