//! Time-aligned control sequences built from audio and annotations.

mod events;
mod loudness;
mod pitch;
pub(crate) mod text;

pub use events::{event_indicator, eventroll_to_condition, Event, EventRoll};
pub use loudness::{extract_loudness, loudness_to_condition, LoudnessConfig, LoudnessCurve};
pub use pitch::{
    extract_pitch, fit_pitch_stats, pitch_features, pitch_to_condition, PitchCode, PitchConfig,
};
pub use text::{caption_embedding, embed_label, TEXT_WIDTH};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Default condition frame rate in frames per second.
pub const DEFAULT_FRAME_RATE: f64 = 43.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionKind {
    Loudness,
    Pitch,
    Event,
    Edit,
}

impl ConditionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Loudness => "loudness",
            Self::Pitch => "pitch",
            Self::Event => "event",
            Self::Edit => "edit",
        }
    }
}

impl std::str::FromStr for ConditionKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loudness" => Ok(Self::Loudness),
            "pitch" => Ok(Self::Pitch),
            "event" | "events" => Ok(Self::Event),
            "edit" => Ok(Self::Edit),
            _ => Err(crate::Error::InvalidArgument(format!(
                "unknown condition kind {s:?} (expected loudness, pitch, event or edit)"
            ))),
        }
    }
}

impl std::fmt::Display for ConditionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A `T × D` control matrix at a fixed frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSequence {
    kind: ConditionKind,
    values: Tensor,
    frame_rate: f64,
}

impl ConditionSequence {
    pub fn new(kind: ConditionKind, values: Tensor, frame_rate: f64) -> Result<Self> {
        ensure!(values.rank() == 2, Shape, "condition must be T×D, got {:?}", values.shape());
        ensure!(values.shape()[0] >= 1 && values.shape()[1] >= 1, Shape, "condition {:?} is empty", values.shape());
        ensure!(values.is_finite(), InvalidInput, "condition values must be finite");
        ensure!(frame_rate > 0.0 && frame_rate.is_finite(), InvalidArgument, "frame rate {frame_rate} must be positive");
        Ok(Self {
            kind,
            values,
            frame_rate,
        })
    }

    pub fn zeros(kind: ConditionKind, frames: usize, width: usize, frame_rate: f64) -> Result<Self> {
        Self::new(kind, Tensor::zeros(&[frames, width]), frame_rate)
    }

    pub fn kind(&self) -> ConditionKind {
        self.kind
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// Nearest-frame resampling to `frames` rows.
    pub fn resample(&self, frames: usize) -> Result<Self> {
        let values = resample_rows(&self.values, frames)?;
        let rate = self.frame_rate * frames as f64 / self.len() as f64;
        Self::new(self.kind, values, rate)
    }
}

/// Nearest-frame resampling of the rows of a 2-D tensor:
/// destination row `t` takes source row `floor((t + 0.5) · T_src / T_dst)`.
pub fn resample_rows(values: &Tensor, frames: usize) -> Result<Tensor> {
    ensure!(values.rank() == 2, Shape, "expected a 2-D tensor, got {:?}", values.shape());
    ensure!(frames >= 1, InvalidArgument, "cannot resample to zero frames");
    let (src, width) = (values.shape()[0], values.shape()[1]);
    if src == frames {
        return Ok(values.clone());
    }
    let mut data = Vec::with_capacity(frames * width);
    for t in 0..frames {
        let s = (((t as f64 + 0.5) * src as f64 / frames as f64).floor() as usize).min(src - 1);
        data.extend_from_slice(&values.data()[s * width..(s + 1) * width]);
    }
    Tensor::new(&[frames, width], data)
}
