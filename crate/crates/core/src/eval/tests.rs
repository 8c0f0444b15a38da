use std::f64::consts::PI;

use proptest::prelude::*;

use super::sed::median_filter_for_tests;
use super::*;
use crate::conditions::{Event, EventRoll};
use crate::data::synth_toy_clip;

fn roll(duration: f64, events: &[(&str, f64, f64)]) -> EventRoll {
    let mut out: Vec<Event> = Vec::new();
    for &(l, a, b) in events {
        match out.iter_mut().find(|e| e.label == l) {
            Some(e) => e.intervals.push((a, b)),
            None => out.push(Event {
                label: l.into(),
                intervals: vec![(a, b)],
            }),
        }
    }
    EventRoll::new(duration, out).unwrap()
}

fn hyp(duration: f64, events: &[(&str, f64, f64)]) -> DetectionResult {
    // kept unmerged so overlapping hypotheses stay separate
    let mut labels: Vec<String> = events.iter().map(|e| e.0.to_string()).collect();
    labels.sort();
    labels.dedup();
    let intervals = labels
        .iter()
        .map(|l| events.iter().filter(|e| e.0 == l).map(|e| (e.1, e.2)).collect())
        .collect();
    DetectionResult {
        duration,
        labels,
        intervals,
        probabilities: Vec::new(),
        frame_times: Vec::new(),
    }
}

fn scores(r: &[(&str, f64, f64)], h: &[(&str, f64, f64)]) -> (f64, f64) {
    let rep = F1Report::new(&roll(10.0, r), &hyp(10.0, h), DEFAULT_COLLAR, DEFAULT_SEGMENT).unwrap();
    (rep.f1_event, rep.f1_segment)
}

#[test]
fn hand_computed_f1_cases() {
    let cases: [(&[(&str, f64, f64)], &[(&str, f64, f64)], f64, f64); 10] = [
        (&[("dog", 0.0, 5.0)], &[("dog", 0.0, 4.0)], 1.0, 8.0 / 9.0),
        (&[("dog", 1.0, 3.0), ("cat", 2.0, 6.0)], &[("dog", 1.0, 3.0), ("cat", 2.0, 6.0)], 1.0, 1.0),
        (&[("dog", 1.0, 3.0)], &[], 0.0, 0.0),
        (&[("dog", 1.0, 3.0)], &[("dog", 1.4, 3.4)], 0.0, 0.8),
        (&[("dog", 0.0, 2.0)], &[("cat", 0.0, 2.0)], 0.0, 0.0),
        (&[("dog", 0.0, 5.0)], &[("dog", 5.0, 10.0)], 0.0, 0.0),
        (&[("dog", 0.0, 1.0), ("dog", 3.0, 4.0)], &[("dog", 0.1, 1.1)], 2.0 / 3.0, 0.5),
        (&[("dog", 0.0, 5.0)], &[("dog", 0.1, 6.5)], 0.0, 5.0 / 6.0),
        (&[("dog", 1.0, 2.0)], &[("dog", 1.05, 2.0), ("dog", 1.1, 2.0)], 2.0 / 3.0, 1.0),
        (&[("dog", 0.0, 2.0), ("cat", 5.0, 7.0)], &[("dog", 0.0, 2.0), ("cat", 5.5, 7.0)], 0.5, 1.0),
    ];
    for (i, (r, h, ev, seg)) in cases.iter().enumerate() {
        assert_eq!(scores(r, h), (*ev, *seg), "case {i}");
    }
}

#[test]
fn eight_ninths_segment_case_counts() {
    let s = segment_f1(&roll(10.0, &[("dog", 0.0, 5.0)]), &hyp(10.0, &[("dog", 0.0, 4.0)]), 1.0).unwrap();
    assert_eq!((s.overall.tp, s.overall.fp, s.overall.fn_), (4, 0, 1));
    assert_eq!(s.overall.precision, 1.0);
    assert_eq!(s.overall.recall, 0.8);
}

#[test]
fn zero_denominators_give_zero() {
    let p = Prf::from_counts(0, 0, 0);
    assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
    assert!(event_f1(&roll(1.0, &[]), &hyp(1.0, &[]), 0.0).is_err());
    assert!(segment_f1(&roll(1.0, &[]), &hyp(1.0, &[]), -1.0).is_err());
}

#[test]
fn whole_clip_segment_is_clip_level_f1() {
    // tagging: dog and cat present in ref, dog and bird in hyp
    let r = roll(4.0, &[("dog", 0.0, 1.0), ("cat", 2.0, 3.0)]);
    let h = hyp(4.0, &[("dog", 3.0, 4.0), ("bird", 0.0, 0.5)]);
    let s = segment_f1(&r, &h, 4.0).unwrap();
    assert_eq!((s.overall.tp, s.overall.fp, s.overall.fn_), (1, 1, 1));
    assert_eq!(s.overall.f1, 0.5);
}

#[test]
fn median_filter_removes_blips() {
    let x = [false, true, false, false, true, true, true, false, true, true];
    let y = median_filter_for_tests(&x, 3);
    assert_eq!(y, vec![false, false, false, false, true, true, true, true, true, true]);
}

fn vocab() -> ToyCorpusSpec {
    ToyCorpusSpec::default()
}

#[test]
fn silence_has_no_detections() {
    let d = toy_sed(&AudioClip::silence(44_100, 44_100).unwrap(), &vocab(), &SedConfig::default()).unwrap();
    assert!(d.intervals.iter().all(Vec::is_empty));
    assert!(d.probabilities.iter().flatten().all(|&p| p == 0.0));
}

#[test]
fn detections_follow_the_synthesised_roll() {
    let r = roll(3.0, &[("dog", 0.3, 1.4), ("siren", 1.2, 2.6), ("bell", 2.1, 3.0)]);
    let clip = synth_toy_clip(&vocab(), &r).unwrap();
    let d = toy_sed(&clip, &vocab(), &SedConfig::default()).unwrap();
    for label in vocab().labels {
        let want = r.intervals_of(&label);
        let got = d.intervals_of(&label);
        assert_eq!(got.len(), want.len(), "{label}: {got:?}");
        for (g, w) in got.iter().zip(&want) {
            assert!((g.0 - w.0).abs() <= 0.05 && (g.1 - w.1).abs() <= 0.05, "{label}: {g:?} vs {w:?}");
        }
    }
    let rep = F1Report::new(&r, &d, DEFAULT_COLLAR, DEFAULT_SEGMENT).unwrap();
    assert_eq!((rep.f1_event, rep.f1_segment), (1.0, 1.0));
    assert!(d.probabilities.iter().flatten().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn single_event_gives_one_interval() {
    let r = roll(2.0, &[("clap", 0.5, 1.5)]);
    let d = toy_sed(&synth_toy_clip(&vocab(), &r).unwrap(), &vocab(), &SedConfig::default()).unwrap();
    for (l, iv) in d.labels.iter().zip(&d.intervals) {
        assert_eq!(iv.len(), usize::from(l == "clap"), "{l}");
    }
    let mut bad = vocab();
    bad.labels.push("dog".into());
    assert!(toy_sed(&AudioClip::silence(100, 44_100).unwrap(), &bad, &SedConfig::default()).is_err());
}

#[test]
fn edit_scores_of_present_and_absent_tones() {
    let r = roll(3.0, &[("clap", 1.0, 2.0)]);
    let clip = synth_toy_clip(&vocab(), &r).unwrap();
    let cfg = SedConfig::default();
    assert!(edit_score(&clip, "clap", (1.0, 2.0), &vocab(), &cfg).unwrap() > 0.8);
    assert!(edit_score(&clip, "clap", (2.2, 3.0), &vocab(), &cfg).unwrap() < 0.1);
    assert!(edit_score(&clip, "dog", (1.0, 2.0), &vocab(), &cfg).unwrap() < 0.1);
    let s = edit_score(&clip, "clap", (1.5, 1.501), &vocab(), &cfg).unwrap();
    assert!((0.0..=1.0).contains(&s));
    assert!(edit_score(&clip, "clap", (2.0, 4.0), &vocab(), &cfg).is_err());
    assert!(edit_score(&clip, "zebra", (1.0, 2.0), &vocab(), &cfg).is_err());
}

fn tone(freq: f64, secs: f64, env: impl Fn(f64) -> f64) -> AudioClip {
    let n = (secs * 44_100.0) as usize;
    AudioClip::new(
        (0..n)
            .map(|i| {
                let t = i as f64 / 44_100.0;
                env(t) * (2.0 * PI * freq * t).sin()
            })
            .collect(),
        44_100,
    )
    .unwrap()
}

#[test]
fn loudness_error_cases() {
    let cfg = LoudnessConfig::default();
    let env = |t: f64| 0.05 + 0.4 * (0.5 - 0.5 * (2.0 * PI * 0.5 * t).cos());
    let target = extract_loudness(&tone(440.0, 3.0, env), &cfg).unwrap();
    assert_eq!(loudness_mae(&tone(440.0, 3.0, env), &target, &cfg).unwrap(), 0.0);
    let other = loudness_mae(&tone(880.0, 3.0, env), &target, &cfg).unwrap();
    assert!(other < 0.5, "{other}");
    let shifted: Vec<f64> = target.db.iter().map(|v| v + 3.0).collect();
    assert!((curve_mae(&target.db, &shifted).unwrap() - 3.0).abs() < 1e-12);
    assert!(loudness_mae(&tone(440.0, 1.0, env), &target, &cfg).is_err());
    let flat = loudness_mae(&tone(440.0, 3.0, |_| 0.2), &target, &cfg).unwrap();
    assert!(flat > 2.0);
}

#[test]
fn pitch_error_cases() {
    let (frame, yin) = (FrameSpec::default(), YinConfig::default());
    let a = tone(220.0, 1.0, |_| 0.5);
    let b = tone(440.0, 1.0, |_| 0.5);
    let ta = estimate_f0(&a, frame, yin).unwrap();
    let tb = estimate_f0(&b, frame, yin).unwrap();
    assert!(pitch_mae(&a, &ta, frame, yin).unwrap().unwrap() < 1.0);
    let d = pitch_mae(&a, &tb, frame, yin).unwrap().unwrap();
    assert!((d - 220.0).abs() < 5.0, "{d}");
    assert_eq!(pitch_mae(&AudioClip::silence(44_100, 44_100).unwrap(), &ta, frame, yin).unwrap(), None);
}

#[test]
fn reports_aggregate_and_serialise() {
    let item = |id: &str, f1: Option<f64>, mae: Option<f64>| ItemMetrics {
        id: id.into(),
        metrics: [("f1".to_string(), f1), ("pitch_mae".to_string(), mae)].into_iter().collect(),
    };
    let rep = EvalReport::new(vec![item("a", Some(0.5), None), item("b", Some(1.0), Some(3.0))]);
    assert_eq!(rep.mean("f1"), Some(0.75));
    assert_eq!(rep.aggregate["pitch_mae"], Aggregate { mean: Some(3.0), count: 1, undefined: 1 });
    assert!(!rep.has_nan());
    let dir = tempfile::tempdir().unwrap();
    rep.write_json(&dir.path().join("r.json")).unwrap();
    let back: EvalReport = serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(back, rep);
    rep.write_csv(&dir.path().join("r.csv")).unwrap();
    let text = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(text, "id,f1,pitch_mae\na,0.5,\nb,1,3\nmean,0.75,3\n");
    assert!(EvalReport::new(vec![item("c", Some(f64::NAN), None)]).has_nan());
}

fn arb_events() -> impl Strategy<Value = Vec<(usize, f64, f64)>> {
    prop::collection::vec((0usize..3, 0.0f64..9.0, 0.1f64..3.0), 0..6)
}

fn build(events: &[(usize, f64, f64)]) -> Vec<(&'static str, f64, f64)> {
    let names = ["dog", "cat", "bell"];
    events.iter().map(|&(l, a, len)| (names[l], a, (a + len).min(10.0))).collect()
}

proptest! {
    #[test]
    fn identical_inputs_score_one(events in arb_events()) {
        let e = build(&events);
        prop_assume!(!e.is_empty());
        // merged reference intervals are what a perfect detector returns
        let r = roll(10.0, &e);
        let rep = F1Report::new(&r, &DetectionResult::from_roll(&r), DEFAULT_COLLAR, DEFAULT_SEGMENT).unwrap();
        prop_assert_eq!(rep.f1_event, 1.0);
        prop_assert_eq!(rep.f1_segment, 1.0);
    }

    #[test]
    fn event_f1_ignores_hypothesis_order(r in arb_events(), h in arb_events()) {
        let rr = roll(10.0, &build(&r));
        let hb = build(&h);
        let mut rev = hb.clone();
        rev.reverse();
        let mk = |ev: &[(&str, f64, f64)]| DetectionResult {
            duration: 10.0,
            labels: vec!["bell".into(), "cat".into(), "dog".into()],
            intervals: ["bell", "cat", "dog"]
                .iter()
                .map(|l| ev.iter().filter(|e| e.0 == *l).map(|e| (e.1, e.2)).collect())
                .collect(),
            probabilities: Vec::new(),
            frame_times: Vec::new(),
        };
        let a = event_f1(&rr, &mk(&hb), DEFAULT_COLLAR).unwrap();
        let b = event_f1(&rr, &mk(&rev), DEFAULT_COLLAR).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn dropping_a_true_positive_never_helps(events in arb_events(), k in 0usize..6) {
        let e = build(&events);
        prop_assume!(!e.is_empty());
        let r = roll(10.0, &e);
        let full = DetectionResult::from_roll(&r);
        let mut less = full.clone();
        let li = k % less.labels.len();
        less.intervals[li].remove(0);
        let a = F1Report::new(&r, &full, DEFAULT_COLLAR, DEFAULT_SEGMENT).unwrap();
        let b = F1Report::new(&r, &less, DEFAULT_COLLAR, DEFAULT_SEGMENT).unwrap();
        prop_assert!(b.f1_event <= a.f1_event && b.f1_segment <= a.f1_segment);
    }
}
