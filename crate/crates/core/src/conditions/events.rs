use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::text::{embed_label, TEXT_WIDTH};
use super::{ConditionKind, ConditionSequence};
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// One sound event: a label and the intervals (seconds) where it is active.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub label: String,
    pub intervals: Vec<(f64, f64)>,
}

/// Per-label onset/offset intervals over a clip. Different labels may overlap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRoll {
    pub duration: f64,
    pub events: Vec<Event>,
}

impl EventRoll {
    pub fn new(duration: f64, events: Vec<Event>) -> Result<Self> {
        let roll = Self { duration, events };
        roll.validate()?;
        Ok(roll)
    }

    pub fn empty(duration: f64) -> Result<Self> {
        Self::new(duration, Vec::new())
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.duration > 0.0 && self.duration.is_finite(),
            InvalidInput,
            "roll duration {} must be positive",
            self.duration
        );
        for e in &self.events {
            ensure!(!e.label.trim().is_empty(), InvalidInput, "event label is empty");
            for &(on, off) in &e.intervals {
                ensure!(
                    on.is_finite() && off.is_finite() && 0.0 <= on && on < off && off <= self.duration,
                    InvalidInput,
                    "interval [{on}, {off}] of {:?} is not inside [0, {}] with onset < offset",
                    e.label,
                    self.duration
                );
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let roll: Self = serde_json::from_str(text)?;
        roll.validate()?;
        Ok(roll)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }

    /// Distinct labels in sorted order.
    pub fn labels(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.events.iter().map(|e| e.label.as_str()).collect();
        set.into_iter().map(str::to_owned).collect()
    }

    /// Number of frames at `frame_rate`: `round(duration · frame_rate)`, at least 1.
    pub fn frames(&self, frame_rate: f64) -> usize {
        ((self.duration * frame_rate).round() as usize).max(1)
    }

    /// Frame `t` is active for an interval iff it covers `(t + 0.5) / frame_rate`.
    pub fn event_activity(event: &Event, frames: usize, frame_rate: f64) -> Vec<bool> {
        (0..frames)
            .map(|t| {
                let time = (t as f64 + 0.5) / frame_rate;
                event.intervals.iter().any(|&(on, off)| on <= time && time < off)
            })
            .collect()
    }

    /// Activity of every event carrying `label`.
    pub fn label_activity(&self, label: &str, frame_rate: f64) -> Vec<bool> {
        let frames = self.frames(frame_rate);
        let mut out = vec![false; frames];
        for e in self.events.iter().filter(|e| e.label == label) {
            for (o, a) in out.iter_mut().zip(Self::event_activity(e, frames, frame_rate)) {
                *o |= a;
            }
        }
        out
    }

    /// Intervals of `label`, merged and sorted.
    pub fn intervals_of(&self, label: &str) -> Vec<(f64, f64)> {
        let mut iv: Vec<(f64, f64)> = self
            .events
            .iter()
            .filter(|e| e.label == label)
            .flat_map(|e| e.intervals.iter().copied())
            .collect();
        iv.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::new();
        for (on, off) in iv {
            match merged.last_mut() {
                Some(last) if on <= last.1 => last.1 = last.1.max(off),
                _ => merged.push((on, off)),
            }
        }
        merged
    }
}

/// `T × 64` matrix whose row `t` is the sum of the label embeddings of all
/// events active at frame `t`.
pub fn event_indicator(roll: &EventRoll, frame_rate: f64) -> Result<Tensor> {
    roll.validate()?;
    ensure!(frame_rate > 0.0, InvalidArgument, "frame rate must be positive");
    let frames = roll.frames(frame_rate);
    let mut data = vec![0.0; frames * TEXT_WIDTH];
    for e in &roll.events {
        let emb = embed_label(&e.label)?;
        for (t, active) in EventRoll::event_activity(e, frames, frame_rate).into_iter().enumerate() {
            if active {
                for (d, v) in data[t * TEXT_WIDTH..(t + 1) * TEXT_WIDTH].iter_mut().zip(&emb) {
                    *d += v;
                }
            }
        }
    }
    Tensor::new(&[frames, TEXT_WIDTH], data)
}

/// Project the summed label embeddings with `w: [64, D]`.
pub fn eventroll_to_condition(roll: &EventRoll, frame_rate: f64, w: &Tensor) -> Result<ConditionSequence> {
    ensure!(
        w.rank() == 2 && w.shape()[0] == TEXT_WIDTH,
        Shape,
        "event projection must be [{TEXT_WIDTH}, D], got {:?}",
        w.shape()
    );
    let ind = event_indicator(roll, frame_rate)?;
    let (frames, d) = (ind.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; frames * d];
    for t in 0..frames {
        let row = &ind.data()[t * TEXT_WIDTH..(t + 1) * TEXT_WIDTH];
        if row.iter().all(|v| *v == 0.0) {
            continue;
        }
        for (k, r) in row.iter().enumerate() {
            for j in 0..d {
                out[t * d + j] += r * w.data()[k * d + j];
            }
        }
    }
    ConditionSequence::new(ConditionKind::Event, Tensor::new(&[frames, d], out)?, frame_rate)
}
