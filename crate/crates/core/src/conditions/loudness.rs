use serde::{Deserialize, Serialize};

use super::{ConditionKind, ConditionSequence};
use crate::dsp::{frame_rms, rms_to_db, savgol_filter_with, AudioClip, EdgeMode, FrameSpec, DEFAULT_DB_EPS};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoudnessConfig {
    pub frame: FrameSpec,
    pub savgol_window: usize,
    pub savgol_order: usize,
    pub eps: f64,
    pub edge_mode: EdgeMode,
}

impl Default for LoudnessConfig {
    fn default() -> Self {
        Self {
            frame: FrameSpec::default(),
            savgol_window: 11,
            savgol_order: 3,
            eps: DEFAULT_DB_EPS,
            edge_mode: EdgeMode::Interp,
        }
    }
}

impl LoudnessConfig {
    pub fn floor_db(&self) -> f64 {
        20.0 * self.eps.log10()
    }
}

/// Smoothed frame loudness in dB.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoudnessCurve {
    pub db: Vec<f64>,
    pub frame_rate: f64,
}

impl LoudnessCurve {
    pub fn len(&self) -> usize {
        self.db.len()
    }

    pub fn is_empty(&self) -> bool {
        self.db.is_empty()
    }
}

/// RMS in dB, Savitzky-Golay smoothed, floored at `20·log10(eps)`.
///
/// The smoother can undershoot next to sharp onsets; the floor keeps the
/// curve inside the range the dB conversion can produce.
pub fn extract_loudness(clip: &AudioClip, config: &LoudnessConfig) -> Result<LoudnessCurve> {
    let rms = frame_rms(clip.samples(), config.frame)?;
    let db = rms_to_db(&rms, config.eps)?;
    let floor = config.floor_db();
    let smooth = savgol_filter_with(&db, config.savgol_window, config.savgol_order, config.edge_mode)?;
    Ok(LoudnessCurve {
        db: smooth.into_iter().map(|v| v.max(floor)).collect(),
        frame_rate: config.frame.frame_rate(clip.sample_rate()),
    })
}

/// Map `[-100, 0]` dB affinely onto `[-1, 1]` and repeat across `width` columns.
pub fn loudness_to_condition(curve: &LoudnessCurve, width: usize) -> Result<ConditionSequence> {
    ensure!(width >= 1, InvalidArgument, "condition width must be >= 1");
    ensure!(!curve.is_empty(), InvalidInput, "loudness curve is empty");
    let mut data = Vec::with_capacity(curve.len() * width);
    for db in &curve.db {
        let v = db / 50.0 + 1.0;
        data.extend(std::iter::repeat_n(v, width));
    }
    ConditionSequence::new(
        ConditionKind::Loudness,
        Tensor::new(&[curve.len(), width], data)?,
        curve.frame_rate,
    )
}
