use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::DetectionResult;
use crate::conditions::EventRoll;
use crate::error::{ensure, Result};

pub const DEFAULT_COLLAR: f64 = 0.2;
pub const DEFAULT_SEGMENT: f64 = 1.0;

/// Match counts with precision, recall and F1 (each 0 when its denominator is 0).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        // 2PR/(P+R) written on the counts so the 8/9-style cases are exact
        let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
        Self { tp, fp, fn_, precision, recall, f1 }
    }

    fn add(self, o: Self) -> Self {
        Self::from_counts(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_)
    }
}

/// Micro-averaged scores and the per-label breakdown of one metric.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub overall: Prf,
    pub per_label: BTreeMap<String, Prf>,
}

impl F1Scores {
    fn from_labels(per_label: BTreeMap<String, Prf>) -> Self {
        let overall = per_label.values().fold(Prf::default(), |a, p| a.add(*p));
        Self { overall, per_label }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub f1_event: f64,
    pub f1_segment: f64,
    pub event: F1Scores,
    pub segment: F1Scores,
}

impl F1Report {
    pub fn new(reference: &EventRoll, hyp: &DetectionResult, collar: f64, segment: f64) -> Result<Self> {
        let event = event_f1(reference, hyp, collar)?;
        let seg = segment_f1(reference, hyp, segment)?;
        Ok(Self {
            f1_event: event.overall.f1,
            f1_segment: seg.overall.f1,
            event,
            segment: seg,
        })
    }
}

fn all_labels(reference: &EventRoll, hyp: &DetectionResult) -> BTreeSet<String> {
    let mut labels: BTreeSet<String> = reference.labels().into_iter().collect();
    for (l, iv) in hyp.labels.iter().zip(&hyp.intervals) {
        if !iv.is_empty() {
            labels.insert(l.clone());
        }
    }
    labels
}

fn sorted(mut iv: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    iv.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    iv
}

/// Event-based scores: a hypothesis matches a reference event of the same
/// label when onsets differ by at most `collar` and offsets by at most
/// `max(collar, 0.2 · reference duration)`. Reference events are visited by
/// onset; each takes the unmatched candidate with the closest onset.
pub fn event_f1(reference: &EventRoll, hyp: &DetectionResult, collar: f64) -> Result<F1Scores> {
    ensure!(collar > 0.0 && collar.is_finite(), InvalidArgument, "collar must be positive");
    reference.validate()?;
    let mut per_label = BTreeMap::new();
    for label in all_labels(reference, hyp) {
        let refs = reference.intervals_of(&label);
        let hyps = sorted(hyp.intervals_of(&label).to_vec());
        let mut used = vec![false; hyps.len()];
        let mut tp = 0;
        for &(on, off) in &refs {
            let off_tol = collar.max(0.2 * (off - on));
            let best = hyps
                .iter()
                .enumerate()
                .filter(|(j, h)| !used[*j] && (h.0 - on).abs() <= collar && (h.1 - off).abs() <= off_tol)
                .min_by(|a, b| (a.1 .0 - on).abs().total_cmp(&(b.1 .0 - on).abs()))
                .map(|(j, _)| j);
            if let Some(j) = best {
                used[j] = true;
                tp += 1;
            }
        }
        per_label.insert(label, Prf::from_counts(tp, hyps.len() - tp, refs.len() - tp));
    }
    Ok(F1Scores::from_labels(per_label))
}

fn segment_activity(iv: &[(f64, f64)], n: usize, segment: f64) -> Vec<bool> {
    (0..n)
        .map(|k| {
            let (s, e) = (k as f64 * segment, (k + 1) as f64 * segment);
            iv.iter().any(|&(a, b)| a < e && b > s)
        })
        .collect()
}

/// Segment-based scores over `(segment, label)` cells of the reference duration.
pub fn segment_f1(reference: &EventRoll, hyp: &DetectionResult, segment: f64) -> Result<F1Scores> {
    ensure!(segment > 0.0 && segment.is_finite(), InvalidArgument, "segment length must be positive");
    reference.validate()?;
    let n = ((reference.duration / segment) - 1e-9).ceil().max(1.0) as usize;
    let mut per_label = BTreeMap::new();
    for label in all_labels(reference, hyp) {
        let r = segment_activity(&reference.intervals_of(&label), n, segment);
        let h = segment_activity(hyp.intervals_of(&label), n, segment);
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (a, b) in r.iter().zip(&h) {
            match (a, b) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        per_label.insert(label, Prf::from_counts(tp, fp, fn_));
    }
    Ok(F1Scores::from_labels(per_label))
}
