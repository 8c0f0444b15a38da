//! Signal-processing primitives shared by the condition extractors.
//!
//! Everything here is a pure function of its inputs.

mod bands;
mod cwt;
mod quantize;
mod rms;
mod savgol;
mod yin;

pub use bands::{hann_window, BandBank};
pub use cwt::{ricker, ricker_cwt, CwtPadding, Scalogram};
pub use quantize::{dequantize_uniform, quantize_uniform, QuantizerStats};
pub use rms::{frame_count, frame_rms, rms_to_db, DEFAULT_DB_EPS};
pub use savgol::{savgol_coefficients, savgol_filter, savgol_filter_with, EdgeMode};
pub use yin::{estimate_f0, F0Track, YinConfig};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        ensure!(sample_rate > 0, InvalidInput, "sample rate must be positive");
        ensure!(!samples.is_empty(), InvalidInput, "audio clip is empty");
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(crate::Error::InvalidInput(format!(
                "sample {i} is not finite"
            )));
        }
        if let Some(i) = samples.iter().position(|s| s.abs() > 1.0) {
            return Err(crate::Error::InvalidInput(format!(
                "sample {i} = {} is outside [-1, 1]",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// All-zero clip of the given length.
    pub fn silence(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
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

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Root-mean-square over the whole clip.
    pub fn rms(&self) -> f64 {
        rms_of(&self.samples)
    }

    /// Copy of samples `[start, end)`, clamped to the clip.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let end = end.min(self.samples.len());
        ensure!(start < end, InvalidArgument, "empty slice {start}..{end}");
        Self::new(self.samples[start..end].to_vec(), self.sample_rate)
    }
}

pub(crate) fn rms_of(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Analysis framing: window length and hop, both in samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub frame_length: usize,
    pub hop: usize,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self {
            frame_length: 4096,
            hop: 1025,
        }
    }
}

impl FrameSpec {
    pub fn new(frame_length: usize, hop: usize) -> Result<Self> {
        let spec = Self { frame_length, hop };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.frame_length >= 1, InvalidArgument, "frame length must be >= 1");
        ensure!(
            self.hop >= 1 && self.hop <= self.frame_length,
            InvalidArgument,
            "hop {} must lie in [1, {}]",
            self.hop,
            self.frame_length
        );
        Ok(())
    }

    /// Frames per second at `sample_rate`.
    pub fn frame_rate(&self, sample_rate: u32) -> f64 {
        sample_rate as f64 / self.hop as f64
    }

    /// Time in seconds of the centre of frame `index`.
    pub fn frame_center(&self, index: usize, sample_rate: u32) -> f64 {
        (index * self.hop) as f64 / sample_rate as f64
            + self.frame_length as f64 / (2.0 * sample_rate as f64)
    }

    /// Zero-padded window of `x` for frame `index`.
    pub(crate) fn frame<'a>(&self, x: &'a [f64], index: usize, buf: &'a mut Vec<f64>) -> &'a [f64] {
        let start = index * self.hop;
        let end = start + self.frame_length;
        if end <= x.len() {
            &x[start..end]
        } else {
            buf.clear();
            buf.extend_from_slice(&x[start.min(x.len())..]);
            buf.resize(self.frame_length, 0.0);
            buf
        }
    }
}
