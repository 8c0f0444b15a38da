use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{random_roll, synth_toy_clip, ToyCorpusSpec};
use crate::conditions::{Event, EventRoll, DEFAULT_FRAME_RATE};
use crate::dsp::{frame_rms, AudioClip, FrameSpec};
use crate::error::{ensure, Error, Result};

pub const DEFAULT_SEGMENT_THRESHOLD_DB: f64 = -40.0;
pub const MIN_TARGET_SECONDS: f64 = 0.5;
pub const MAX_TARGET_SECONDS: f64 = 4.0;
/// Inserted targets sit this far above the background RMS.
pub const INSERT_GAIN_DB: f64 = 3.0;

const SEGMENT_FRAME: usize = 1024;
const GRAMMAR: &str = "expected `action: label: start: end`, e.g. `insert: clap: 2.0: 2.5`";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditAction {
    Insert,
    Remove,
}

impl EditAction {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Insert => "insert",
            Self::Remove => "remove",
        }
    }
}

impl fmt::Display for EditAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EditAction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "insert" => Ok(Self::Insert),
            "remove" => Ok(Self::Remove),
            other => Err(Error::InvalidArgument(format!("unknown edit action {other:?}; {GRAMMAR}"))),
        }
    }
}

/// An editing instruction on the wire: `action: label: start: end` (seconds).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSpec {
    pub action: EditAction,
    pub label: String,
    pub start: f64,
    pub end: f64,
}

impl EditSpec {
    pub fn new(action: EditAction, label: &str, start: f64, end: f64) -> Result<Self> {
        let spec = Self {
            action,
            label: label.trim().to_string(),
            start,
            end,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.label.is_empty() && !self.label.contains(':') && self.label.trim() == self.label,
            InvalidArgument,
            "edit label {:?} must be non-empty, trimmed and free of ':'",
            self.label
        );
        ensure!(
            self.start.is_finite() && self.end.is_finite() && 0.0 <= self.start && self.start < self.end,
            InvalidArgument,
            "edit span [{}, {}] needs 0 <= start < end",
            self.start,
            self.end
        );
        Ok(())
    }

    /// Checks the span against a clip length.
    pub fn check_duration(&self, duration: f64) -> Result<()> {
        ensure!(self.end <= duration + 1e-9, InvalidArgument, "edit span ends at {} s but the clip lasts {duration} s", self.end);
        Ok(())
    }

    /// Natural-language form, e.g. "insert clap sound: from 2.0 s to 2.5 s".
    pub fn prose(&self) -> String {
        format!("{} {} sound: from {:.1} s to {:.1} s", self.action, self.label, self.start, self.end)
    }
}

impl fmt::Display for EditSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {:?}: {:?}", self.action, self.label, self.start, self.end)
    }
}

impl FromStr for EditSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let [action, label, start, end] = parts.as_slice() else {
            return Err(Error::InvalidArgument(format!("malformed edit spec {s:?}; {GRAMMAR}")));
        };
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("{v:?} is not a number in edit spec {s:?}; {GRAMMAR}")))
        };
        Self::new(action.parse()?, label, num(start)?, num(end)?)
    }
}

/// Runs of frames at or above `threshold_db` RMS, as `(start, end)` seconds,
/// split into pieces of at most 4 s; pieces shorter than 0.5 s are dropped.
pub fn segment_targets(clip: &AudioClip, threshold_db: f64) -> Result<Vec<(f64, f64)>> {
    let spec = FrameSpec::new(SEGMENT_FRAME, SEGMENT_FRAME)?;
    let rms = frame_rms(clip.samples(), spec)?;
    let sr = clip.sample_rate() as f64;
    let dur = clip.duration();
    let loud: Vec<bool> = rms.iter().map(|r| *r > 0.0 && 20.0 * r.log10() >= threshold_db).collect();
    // frames past the last full one cover the tail
    let tail = clip.len().saturating_sub(rms.len() * SEGMENT_FRAME);
    let mut out = Vec::new();
    let mut i = 0;
    while i < loud.len() {
        if !loud[i] {
            i += 1;
            continue;
        }
        let a = i;
        while i < loud.len() && loud[i] {
            i += 1;
        }
        let start = (a * SEGMENT_FRAME) as f64 / sr;
        let mut end = ((i * SEGMENT_FRAME) as f64 / sr).min(dur);
        if i == loud.len() && tail > 0 {
            end = dur;
        }
        let len = end - start;
        if len < MIN_TARGET_SECONDS {
            continue;
        }
        let pieces = (len / MAX_TARGET_SECONDS).ceil().max(1.0) as usize;
        let step = len / pieces as f64;
        for p in 0..pieces {
            let s = start + p as f64 * step;
            let e = if p + 1 == pieces { end } else { start + (p + 1) as f64 * step };
            out.push((s, e));
        }
    }
    Ok(out)
}

/// One simulated editing example.
#[derive(Clone, Debug, PartialEq)]
pub struct EditPair {
    pub background: AudioClip,
    pub caption_labels: Vec<String>,
    pub target: AudioClip,
    pub target_label: String,
    pub action: EditAction,
    pub span: (f64, f64),
    pub input: AudioClip,
    pub output: AudioClip,
    /// Frames at `mask_rate` whose centre lies inside the span.
    pub edit_mask: Vec<bool>,
    pub mask_rate: f64,
    pub spec: EditSpec,
}

/// Frames (centre sampling) that fall inside `span`.
pub fn span_mask(span: (f64, f64), frames: usize, rate: f64) -> Vec<bool> {
    (0..frames)
        .map(|f| {
            let c = (f as f64 + 0.5) / rate;
            span.0 <= c && c < span.1
        })
        .collect()
}

impl EditPair {
    pub fn mask_at(&self, frames: usize, rate: f64) -> Vec<bool> {
        span_mask(self.span, frames, rate)
    }

    /// The type invariants; used by the fuzz tests.
    pub fn validate(&self) -> Result<()> {
        let d = self.target.duration();
        ensure!((MIN_TARGET_SECONDS - 1e-9..=MAX_TARGET_SECONDS + 1e-9).contains(&d), InvalidInput, "target lasts {d} s");
        ensure!(!self.caption_labels.contains(&self.target_label), InvalidInput, "target label {} is in the caption", self.target_label);
        let dur = self.background.duration();
        ensure!(0.0 <= self.span.0 && self.span.0 < self.span.1 && self.span.1 <= dur + 1e-9, InvalidInput, "span {:?} outside [0, {dur}]", self.span);
        let n = self.background.len();
        ensure!(self.input.len() == n && self.output.len() == n, InvalidInput, "pair audio lengths differ");
        ensure!(self.edit_mask.iter().any(|&m| m), InvalidInput, "edit mask is empty");
        ensure!(self.spec.action == self.action && self.spec.label == self.target_label, InvalidInput, "spec disagrees with pair");
        self.spec.validate()
    }
}

/// Mix `target` into `background` at a random position and build the pair.
pub fn make_edit_pair(
    background: &AudioClip,
    caption_labels: &[String],
    target: &AudioClip,
    target_label: &str,
    action: EditAction,
    rng: &mut impl Rng,
) -> Result<EditPair> {
    ensure!(
        !caption_labels.iter().any(|l| l == target_label),
        InvalidArgument,
        "target label {target_label:?} already appears in the caption"
    );
    ensure!(background.sample_rate() == target.sample_rate(), InvalidArgument, "sample rates differ");
    ensure!(target.len() <= background.len(), InvalidArgument, "target ({} s) is longer than the background ({} s)", target.duration(), background.duration());
    let d = target.duration();
    ensure!(
        (MIN_TARGET_SECONDS - 1e-9..=MAX_TARGET_SECONDS + 1e-9).contains(&d),
        InvalidArgument,
        "target lasts {d} s, outside [{MIN_TARGET_SECONDS}, {MAX_TARGET_SECONDS}]"
    );
    let (n, m) = (background.len(), target.len());
    let offset = rng.random_range(0..=n - m);
    let (bg, tg) = (background.samples(), target.samples());

    let (bg_rms, tg_rms) = (background.rms(), target.rms());
    let mut gain = if bg_rms > 0.0 && tg_rms > 0.0 {
        bg_rms * 10f64.powf(INSERT_GAIN_DB / 20.0) / tg_rms
    } else {
        1.0
    };
    for (i, &t) in tg.iter().enumerate() {
        if t != 0.0 {
            gain = gain.min((1.0 - bg[offset + i].abs()) / t.abs());
        }
    }
    let mut mixed = bg.to_vec();
    for (i, &t) in tg.iter().enumerate() {
        mixed[offset + i] = (bg[offset + i] + gain * t).clamp(-1.0, 1.0);
    }
    let mixed = AudioClip::new(mixed, background.sample_rate())?;
    let sr = background.sample_rate() as f64;
    let span = (offset as f64 / sr, (offset + m) as f64 / sr);
    let (input, output) = match action {
        EditAction::Insert => (background.clone(), mixed),
        EditAction::Remove => (mixed, background.clone()),
    };
    let frames = ((background.duration() * DEFAULT_FRAME_RATE).round() as usize).max(1);
    Ok(EditPair {
        background: background.clone(),
        caption_labels: caption_labels.to_vec(),
        target: target.clone(),
        target_label: target_label.to_string(),
        action,
        span,
        input,
        output,
        edit_mask: span_mask(span, frames, DEFAULT_FRAME_RATE),
        mask_rate: DEFAULT_FRAME_RATE,
        spec: EditSpec::new(action, target_label, span.0, span.1)?,
    })
}

/// Random background plus a segmented single-label target whose label is
/// not in the background caption.
pub fn simulate_edit_pair(spec: &ToyCorpusSpec, action: EditAction, rng: &mut impl Rng) -> Result<EditPair> {
    let roll = random_roll(spec, rng)?;
    let caption = roll.labels();
    let background = synth_toy_clip(spec, &roll)?;
    let label = loop {
        let l = &spec.labels[rng.random_range(0..spec.labels.len())];
        if !caption.contains(l) {
            break l.clone();
        }
    };
    let hi = spec.max_event_len.min(spec.duration).min(MAX_TARGET_SECONDS);
    let lo = (MIN_TARGET_SECONDS + 0.1).max(spec.min_event_len).min(hi);
    let len = rng.random_range(lo..=hi);
    let on = ((spec.duration - len) / 2.0 * 1000.0).floor() / 1000.0;
    let source_roll = EventRoll::new(
        spec.duration,
        vec![Event {
            label: label.clone(),
            intervals: vec![(on, (on + len).min(spec.duration))],
        }],
    )?;
    let source = synth_toy_clip(spec, &source_roll)?;
    let segments = segment_targets(&source, DEFAULT_SEGMENT_THRESHOLD_DB)?;
    let &(s, e) = segments
        .iter()
        .max_by(|a, b| (a.1 - a.0).total_cmp(&(b.1 - b.0)))
        .ok_or_else(|| Error::InvalidInput("target source produced no segment".into()))?;
    let sr = source.sample_rate() as f64;
    let target = source.slice((s * sr).round() as usize, ((e * sr).round() as usize).min(source.len()))?;
    make_edit_pair(&background, &caption, &target, &label, action, rng)
}
