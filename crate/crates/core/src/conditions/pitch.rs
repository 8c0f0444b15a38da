use serde::{Deserialize, Serialize};

use super::{ConditionKind, ConditionSequence};
use crate::dsp::{
    estimate_f0, quantize_uniform, ricker_cwt, AudioClip, CwtPadding, F0Track, FrameSpec,
    QuantizerStats, Scalogram, YinConfig,
};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PitchConfig {
    pub frame: FrameSpec,
    pub yin: YinConfig,
    pub scales: Vec<f64>,
    pub n_bins: usize,
    pub padding: CwtPadding,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            frame: FrameSpec::default(),
            yin: YinConfig::default(),
            scales: (1..=32).map(f64::from).collect(),
            n_bins: 256,
            padding: CwtPadding::Edge,
        }
    }
}

/// Quantized wavelet pitch features, `frames × scales`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitchCode {
    pub bins: Vec<usize>,
    pub frames: usize,
    pub scales: usize,
    pub n_bins: usize,
    pub frame_rate: f64,
}

impl PitchCode {
    pub fn row(&self, t: usize) -> &[usize] {
        &self.bins[t * self.scales..(t + 1) * self.scales]
    }
}

/// f0 track and the Ricker scalogram of its gap-filled log.
pub fn pitch_features(clip: &AudioClip, config: &PitchConfig) -> Result<(F0Track, Scalogram)> {
    let track = estimate_f0(clip, config.frame, config.yin)?;
    let log_f0: Vec<f64> = track.interpolated(config.yin.fmin).iter().map(|f| f.ln()).collect();
    let scalogram = ricker_cwt(&log_f0, &config.scales, config.padding)?;
    Ok((track, scalogram))
}

/// Quantizer range over the scalograms of a set of clips.
pub fn fit_pitch_stats<'a>(
    clips: impl IntoIterator<Item = &'a AudioClip>,
    config: &PitchConfig,
) -> Result<QuantizerStats> {
    let mut all = Vec::new();
    for clip in clips {
        let (_, s) = pitch_features(clip, config)?;
        all.extend(s.values.into_iter().flatten());
    }
    QuantizerStats::fit(&all)
}

pub fn extract_pitch(clip: &AudioClip, config: &PitchConfig, stats: &QuantizerStats) -> Result<PitchCode> {
    let (_, s) = pitch_features(clip, config)?;
    let (frames, scales) = (s.len(), s.n_scales());
    let mut bins = vec![0; frames * scales];
    for (k, row) in s.values.iter().enumerate() {
        let q = quantize_uniform(row, config.n_bins, stats.lo, stats.hi)?;
        for (t, b) in q.into_iter().enumerate() {
            bins[t * scales + k] = b;
        }
    }
    Ok(PitchCode {
        bins,
        frames,
        scales,
        n_bins: config.n_bins,
        frame_rate: config.frame.frame_rate(clip.sample_rate()),
    })
}

/// Per frame, the mean of the codebook rows selected at every scale.
pub fn pitch_to_condition(code: &PitchCode, codebook: &Tensor) -> Result<ConditionSequence> {
    ensure!(
        codebook.rank() == 2 && codebook.shape()[0] == code.n_bins,
        Shape,
        "codebook must be [{}, D], got {:?}",
        code.n_bins,
        codebook.shape()
    );
    ensure!(code.frames >= 1 && code.scales >= 1, InvalidInput, "pitch code is empty");
    let d = codebook.shape()[1];
    let mut out = vec![0.0; code.frames * d];
    for t in 0..code.frames {
        for &b in code.row(t) {
            ensure!(b < code.n_bins, InvalidInput, "pitch bin {b} out of range 0..{}", code.n_bins);
            for j in 0..d {
                out[t * d + j] += codebook.data()[b * d + j];
            }
        }
        out[t * d..(t + 1) * d].iter_mut().for_each(|v| *v /= code.scales as f64);
    }
    ConditionSequence::new(ConditionKind::Pitch, Tensor::new(&[code.frames, d], out)?, code.frame_rate)
}
