//! Detection oracle, F1 metrics, feature errors and reports.

mod f1;
mod sed;

pub use f1::{event_f1, segment_f1, F1Report, F1Scores, Prf, DEFAULT_COLLAR, DEFAULT_SEGMENT};
pub use sed::{toy_sed, DetectionResult, SedConfig};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditions::{extract_loudness, LoudnessConfig, LoudnessCurve};
use crate::data::ToyCorpusSpec;
use crate::dsp::{estimate_f0, AudioClip, F0Track, FrameSpec, YinConfig};
use crate::error::{ensure, Error, Result};

/// Mean absolute dB difference between the loudness of `gen` and `target`.
pub fn loudness_mae(gen: &AudioClip, target: &LoudnessCurve, config: &LoudnessConfig) -> Result<f64> {
    let got = extract_loudness(gen, config)?;
    curve_mae(&got.db, &target.db)
}

/// MAE of two frame sequences whose lengths differ by at most one frame.
pub fn curve_mae(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure!(!a.is_empty() && !b.is_empty(), InvalidInput, "cannot compare empty curves");
    ensure!(a.len().abs_diff(b.len()) <= 1, Shape, "curves have {} and {} frames", a.len(), b.len());
    let n = a.len().min(b.len());
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64)
}

/// Mean |Δf0| in Hz over frames voiced in both; `None` when no frame is.
pub fn pitch_mae(gen: &AudioClip, target: &F0Track, frame: FrameSpec, yin: YinConfig) -> Result<Option<f64>> {
    let got = estimate_f0(gen, frame, yin)?;
    ensure!(got.len().abs_diff(target.len()) <= 1, Shape, "tracks have {} and {} frames", got.len(), target.len());
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..got.len().min(target.len()) {
        if got.voiced[i] && target.voiced[i] {
            sum += (got.f0[i] - target.f0[i]).abs();
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Mean detector probability of `label` over the frames centred inside `span`.
pub fn edit_score(gen: &AudioClip, label: &str, span: (f64, f64), vocab: &ToyCorpusSpec, cfg: &SedConfig) -> Result<f64> {
    vocab.label_index(label)?;
    ensure!(
        0.0 <= span.0 && span.0 < span.1 && span.1 <= gen.duration() + 1e-9,
        InvalidArgument,
        "span [{}, {}] is not inside the {} s clip",
        span.0,
        span.1,
        gen.duration()
    );
    let det = toy_sed(gen, vocab, cfg)?;
    let p = det.probability_of(label).expect("vocabulary label");
    let inside: Vec<f64> = det
        .frame_times
        .iter()
        .zip(p)
        .filter(|(t, _)| span.0 <= **t && **t < span.1)
        .map(|(_, v)| *v)
        .collect();
    if inside.is_empty() {
        // span shorter than a hop: take the frame nearest its middle
        let mid = 0.5 * (span.0 + span.1);
        let k = det
            .frame_times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - mid).abs().total_cmp(&(b.1 - mid).abs()))
            .map(|(k, _)| k)
            .expect("at least one frame");
        return Ok(p[k]);
    }
    Ok(inside.iter().sum::<f64>() / inside.len() as f64)
}

/// Metrics of one evaluated item; `None` marks a metric that is undefined for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub id: String,
    pub metrics: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Option<f64>,
    pub count: usize,
    pub undefined: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub items: Vec<ItemMetrics>,
    pub aggregate: BTreeMap<String, Aggregate>,
}

impl EvalReport {
    pub fn new(items: Vec<ItemMetrics>) -> Self {
        let mut acc: BTreeMap<String, (f64, usize, usize)> = BTreeMap::new();
        for it in &items {
            for (k, v) in &it.metrics {
                let e = acc.entry(k.clone()).or_default();
                match v {
                    Some(x) => {
                        e.0 += x;
                        e.1 += 1;
                    }
                    None => e.2 += 1,
                }
            }
        }
        let aggregate = acc
            .into_iter()
            .map(|(k, (s, n, u))| {
                let mean = (n > 0).then(|| s / n as f64);
                (k, Aggregate { mean, count: n, undefined: u })
            })
            .collect();
        Self { items, aggregate }
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.aggregate.get(metric).and_then(|a| a.mean)
    }

    /// Any defined metric that is NaN.
    pub fn has_nan(&self) -> bool {
        self.items.iter().any(|i| i.metrics.values().any(|v| v.is_some_and(f64::is_nan)))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::file(path, e))
    }

    /// One row per item plus a final `mean` row; undefined cells are empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let names: Vec<&String> = self.aggregate.keys().collect();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let cell = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let mut header = vec!["id".to_string()];
        header.extend(names.iter().map(|s| s.to_string()));
        let rows = self
            .items
            .iter()
            .map(|it| {
                let mut row = vec![it.id.clone()];
                row.extend(names.iter().map(|n| cell(it.metrics.get(*n).copied().flatten())));
                row
            })
            .chain(std::iter::once({
                let mut row = vec!["mean".to_string()];
                row.extend(names.iter().map(|n| cell(self.mean(n))));
                row
            }));
        for row in std::iter::once(header).chain(rows) {
            w.write_record(&row).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
