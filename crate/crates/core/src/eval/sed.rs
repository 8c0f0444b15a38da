use serde::{Deserialize, Serialize};

use crate::conditions::{Event, EventRoll};
use crate::data::ToyCorpusSpec;
use crate::dsp::{AudioClip, BandBank, FrameSpec};
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SedConfig {
    pub frame: FrameSpec,
    /// Band level (dB) mapped to probability 0.
    pub floor_db: f64,
    /// Level span (dB) from probability 0 to 1.
    pub range_db: f64,
    pub threshold: f64,
    /// Odd median-filter length in frames over the thresholded activity.
    pub median: usize,
}

impl Default for SedConfig {
    fn default() -> Self {
        Self {
            frame: FrameSpec { frame_length: 2048, hop: 256 },
            floor_db: -50.0,
            range_db: 40.0,
            threshold: 0.5,
            median: 5,
        }
    }
}

impl SedConfig {
    pub fn validate(&self) -> Result<()> {
        self.frame.validate()?;
        ensure!(self.range_db > 0.0, InvalidArgument, "range_db must be positive");
        ensure!((0.0..=1.0).contains(&self.threshold), InvalidArgument, "threshold must be in [0, 1]");
        ensure!(self.median % 2 == 1, InvalidArgument, "median length must be odd");
        Ok(())
    }
}

/// Detected intervals and frame probabilities per label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub duration: f64,
    pub labels: Vec<String>,
    pub intervals: Vec<Vec<(f64, f64)>>,
    /// `labels × frames`, empty when built from a roll.
    pub probabilities: Vec<Vec<f64>>,
    /// Centre time of each probability frame.
    pub frame_times: Vec<f64>,
}

impl DetectionResult {
    /// A perfect detector's output for `roll`.
    pub fn from_roll(roll: &EventRoll) -> Self {
        let labels = roll.labels();
        Self {
            duration: roll.duration,
            intervals: labels.iter().map(|l| roll.intervals_of(l)).collect(),
            labels,
            probabilities: Vec::new(),
            frame_times: Vec::new(),
        }
    }

    pub fn intervals_of(&self, label: &str) -> &[(f64, f64)] {
        self.labels
            .iter()
            .position(|l| l == label)
            .map_or(&[], |i| self.intervals[i].as_slice())
    }

    pub fn probability_of(&self, label: &str) -> Option<&[f64]> {
        let i = self.labels.iter().position(|l| l == label)?;
        self.probabilities.get(i).map(Vec::as_slice)
    }

    pub fn to_roll(&self) -> Result<EventRoll> {
        let events = self
            .labels
            .iter()
            .zip(&self.intervals)
            .filter(|(_, iv)| !iv.is_empty())
            .map(|(l, iv)| Event {
                label: l.clone(),
                intervals: iv.clone(),
            })
            .collect();
        EventRoll::new(self.duration, events)
    }
}

fn median_filter(x: &[bool], len: usize) -> Vec<bool> {
    let half = len / 2;
    (0..x.len())
        .map(|i| {
            let (a, b) = (i.saturating_sub(half), (i + half + 1).min(x.len()));
            // shrink the window symmetrically at the edges
            let r = (i - a).min(b - 1 - i);
            let w = &x[i - r..=i + r];
            2 * w.iter().filter(|&&v| v).count() > w.len()
        })
        .collect()
}

/// Band-energy detector for the tone vocabulary: per label, the level of its
/// tone per frame maps to a probability, which is thresholded, median
/// filtered and turned into intervals.
pub fn toy_sed(clip: &AudioClip, vocab: &ToyCorpusSpec, cfg: &SedConfig) -> Result<DetectionResult> {
    cfg.validate()?;
    vocab.validate()?;
    ensure!(!clip.is_empty(), InvalidInput, "cannot run detection on an empty clip");
    let sr = clip.sample_rate();
    let freqs = vocab.labels.iter().map(|l| vocab.frequency(l)).collect::<Result<Vec<_>>>()?;
    let bank = BandBank::new(cfg.frame, &freqs, sr)?;
    let amps = bank.analyze(clip.samples());
    let n = amps.len();
    let duration = clip.duration();
    let frame_times: Vec<f64> = (0..n).map(|i| cfg.frame.frame_center(i, sr)).collect();
    let half_hop = cfg.frame.hop as f64 / (2.0 * sr as f64);
    let mut probabilities = Vec::with_capacity(freqs.len());
    let mut intervals = Vec::with_capacity(freqs.len());
    for b in 0..freqs.len() {
        let p: Vec<f64> = amps
            .iter()
            .map(|a| {
                let db = 20.0 * (a[b] + 1e-10).log10();
                ((db - cfg.floor_db) / cfg.range_db).clamp(0.0, 1.0)
            })
            .collect();
        let active = median_filter(&p.iter().map(|&v| v >= cfg.threshold).collect::<Vec<_>>(), cfg.median);
        let mut iv = Vec::new();
        let mut i = 0;
        while i < n {
            if !active[i] {
                i += 1;
                continue;
            }
            let a = i;
            while i < n && active[i] {
                i += 1;
            }
            let on = if a == 0 { 0.0 } else { frame_times[a] - half_hop };
            let off = if i == n { duration } else { frame_times[i - 1] + half_hop };
            let (on, off) = (on.clamp(0.0, duration), off.clamp(0.0, duration));
            if on < off {
                iv.push((on, off));
            }
        }
        probabilities.push(p);
        intervals.push(iv);
    }
    Ok(DetectionResult {
        duration,
        labels: vocab.labels.clone(),
        intervals,
        probabilities,
        frame_times,
    })
}

#[cfg(test)]
pub(super) fn median_filter_for_tests(x: &[bool], len: usize) -> Vec<bool> {
    median_filter(x, len)
}
