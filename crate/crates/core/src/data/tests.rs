use std::f64::consts::PI;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::edit::span_mask;
use super::*;
use crate::conditions::{Event, EventRoll, DEFAULT_FRAME_RATE};
use crate::dsp::AudioClip;

fn spec() -> ToyCorpusSpec {
    ToyCorpusSpec::default()
}

fn roll(events: &[(&str, f64, f64)], duration: f64) -> EventRoll {
    EventRoll::new(
        duration,
        events
            .iter()
            .map(|&(l, a, b)| Event {
                label: l.into(),
                intervals: vec![(a, b)],
            })
            .collect(),
    )
    .unwrap()
}

/// Energy at `f` over `x[a..b]` from a direct correlation with sin/cos, as a
/// fraction of the segment's total energy.
fn band_energy_ratio(x: &[f64], f: f64) -> f64 {
    let n = x.len() as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (i, v) in x.iter().enumerate() {
        let ph = 2.0 * PI * f * i as f64 / 44_100.0;
        re += v * ph.cos();
        im += v * ph.sin();
    }
    let tone = 2.0 * (re * re + im * im) / n;
    let total: f64 = x.iter().map(|v| v * v).sum();
    tone / total
}

#[test]
fn empty_roll_is_silence() {
    let clip = synth_toy_clip(&spec(), &EventRoll::empty(1.0).unwrap()).unwrap();
    assert_eq!(clip.len(), 44_100);
    assert!(clip.samples().iter().all(|&v| v == 0.0));
}

#[test]
fn single_event_occupies_its_band() {
    let s = spec();
    let clip = synth_toy_clip(&s, &roll(&[("bell", 0.0, 2.0)], 2.0)).unwrap();
    let peak = clip.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!((peak - 0.9).abs() < 1e-12);
    let ratio = band_energy_ratio(clip.samples(), s.frequency("bell").unwrap());
    assert!(ratio > 0.9, "{ratio}");
    assert!(band_energy_ratio(clip.samples(), s.frequency("dog").unwrap()) < 0.01);
}

#[test]
fn overlapping_events_show_both_bands() {
    let s = spec();
    let clip = synth_toy_clip(&s, &roll(&[("dog", 0.0, 1.5), ("siren", 1.0, 2.0)], 2.0)).unwrap();
    let overlap = &clip.samples()[(1.1 * 44_100.0) as usize..(1.4 * 44_100.0) as usize];
    let a = band_energy_ratio(overlap, s.frequency("dog").unwrap());
    let b = band_energy_ratio(overlap, s.frequency("siren").unwrap());
    assert!(a > 0.4 && b > 0.4 && a + b > 0.95, "{a} {b}");
    let before = &clip.samples()[..(0.9 * 44_100.0) as usize];
    assert!(band_energy_ratio(before, s.frequency("siren").unwrap()) < 0.01);
}

#[test]
fn unknown_label_is_rejected() {
    assert!(synth_toy_clip(&spec(), &roll(&[("zebra", 0.0, 1.0)], 1.0)).is_err());
}

#[test]
fn corpus_is_reproducible_and_valid() {
    let s = ToyCorpusSpec { n_clips: 20, seed: 3, ..spec() };
    let a = simulate_corpus(&s).unwrap();
    assert_eq!(a, simulate_corpus(&s).unwrap());
    for c in &a {
        assert!((1..=3).contains(&c.roll.events.len()));
        assert_eq!(c.caption, c.roll.labels());
        assert_eq!(c.audio.len(), 3 * 44_100);
    }
    let other = simulate_corpus(&ToyCorpusSpec { seed: 4, ..s }).unwrap();
    assert_ne!(a, other);
}

#[test]
fn spec_validation() {
    let mut s = spec();
    s.labels.push("dog".into());
    assert!(s.validate().is_err());
    let s = ToyCorpusSpec { duration: 0.0, ..spec() };
    assert!(s.validate().is_err());
    let s = ToyCorpusSpec { labels: (0..17).map(|i| format!("l{i}")).collect(), ..spec() };
    assert!(s.validate().is_err());
}

fn burst(total: f64, on: f64, off: f64) -> AudioClip {
    let n = (total * 44_100.0) as usize;
    let x = (0..n)
        .map(|i| {
            let t = i as f64 / 44_100.0;
            if t >= on && t < off {
                0.5 * (2.0 * PI * 440.0 * t).sin()
            } else {
                0.0
            }
        })
        .collect();
    AudioClip::new(x, 44_100).unwrap()
}

#[test]
fn segments_of_silence_and_bursts() {
    assert!(segment_targets(&AudioClip::silence(44_100, 44_100).unwrap(), -40.0).unwrap().is_empty());
    let segs = segment_targets(&burst(10.0, 3.0, 5.0), -40.0).unwrap();
    assert_eq!(segs.len(), 1);
    let frame = 1024.0 / 44_100.0;
    assert!((segs[0].0 - 3.0).abs() <= frame, "{:?}", segs);
    assert!((segs[0].1 - 5.0).abs() <= frame, "{:?}", segs);
    let long = segment_targets(&burst(8.0, 1.0, 7.0), -40.0).unwrap();
    assert!(long.len() >= 2);
    assert!(long.iter().all(|(a, b)| b - a <= 4.0 && b - a >= 0.5));
    assert!((long[0].0 - 1.0).abs() <= frame && (long.last().unwrap().1 - 7.0).abs() <= frame);
    for w in long.windows(2) {
        assert!((w[0].1 - w[1].0).abs() < 1e-12);
    }
    // too short to keep
    assert!(segment_targets(&burst(3.0, 1.0, 1.3), -40.0).unwrap().is_empty());
}

fn pair_inputs() -> (AudioClip, Vec<String>, AudioClip) {
    let s = spec();
    let bg = synth_toy_clip(&s, &roll(&[("dog", 0.2, 2.5)], 3.0)).unwrap();
    let tgt_src = synth_toy_clip(&s, &roll(&[("clap", 0.0, 1.0)], 1.0)).unwrap();
    (bg, vec!["dog".to_string()], tgt_src)
}

#[test]
fn insert_and_remove_are_mirror_images() {
    let (bg, cap, tgt) = pair_inputs();
    let ins = make_edit_pair(&bg, &cap, &tgt, "clap", EditAction::Insert, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let rem = make_edit_pair(&bg, &cap, &tgt, "clap", EditAction::Remove, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(ins.span, rem.span);
    assert_eq!(rem.output, ins.input);
    assert_eq!(rem.input, ins.output);
    ins.validate().unwrap();
    rem.validate().unwrap();
    // outside the span the mixture is the background, bit for bit
    let sr = 44_100.0;
    let (a, b) = ((ins.span.0 * sr).round() as usize, (ins.span.1 * sr).round() as usize);
    assert_eq!(ins.output.samples()[..a], bg.samples()[..a]);
    assert_eq!(ins.output.samples()[b..], bg.samples()[b..]);
    // mixed span is at least as loud as the background span
    let rms = |x: &[f64]| (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    assert!(rms(&ins.output.samples()[a..b]) >= rms(&bg.samples()[a..b]));
    let want = ((ins.span.1 - ins.span.0) * DEFAULT_FRAME_RATE).round() as i64;
    let got = ins.edit_mask.iter().filter(|&&m| m).count() as i64;
    assert!((got - want).abs() <= 1, "{got} vs {want}");
    assert_eq!(ins.spec.to_string().parse::<EditSpec>().unwrap(), ins.spec);
}

#[test]
fn edit_pair_preconditions() {
    let (bg, cap, tgt) = pair_inputs();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    assert!(make_edit_pair(&bg, &cap, &tgt, "dog", EditAction::Insert, &mut r).is_err());
    let long = synth_toy_clip(&spec(), &roll(&[("clap", 0.0, 3.5)], 3.5)).unwrap();
    assert!(make_edit_pair(&bg, &cap, &long, "clap", EditAction::Insert, &mut r).is_err());
    let short = tgt.slice(0, 10_000).unwrap();
    assert!(make_edit_pair(&bg, &cap, &short, "clap", EditAction::Insert, &mut r).is_err());
}

#[test]
fn edit_spec_grammar() {
    let s: EditSpec = "insert: clap: 2.0: 2.5".parse().unwrap();
    assert_eq!(s, EditSpec { action: EditAction::Insert, label: "clap".into(), start: 2.0, end: 2.5 });
    assert_eq!(s.prose(), "insert clap sound: from 2.0 s to 2.5 s");
    assert!("remove: speech: 8.0: 5.0".parse::<EditSpec>().is_err());
    assert!("remove: speech: 5.0".parse::<EditSpec>().is_err());
    assert!("erase: speech: 1: 2".parse::<EditSpec>().is_err());
    assert!("insert: : 1: 2".parse::<EditSpec>().is_err());
    assert!("insert: dog: x: 2".parse::<EditSpec>().is_err());
    let err = "nonsense".parse::<EditSpec>().unwrap_err().to_string();
    assert!(err.contains("action: label: start: end"), "{err}");
    assert_eq!(" REMOVE :dog:0:1".parse::<EditSpec>().unwrap().action, EditAction::Remove);
}

#[test]
fn span_mask_counts() {
    let m = span_mask((1.0, 2.0), 129, 43.0);
    assert_eq!(m.iter().filter(|&&v| v).count(), 43);
    assert!(!m[42] && m[43] && m[85] && !m[86]);
}

#[test]
fn simulated_pairs_fuzz() {
    let s = spec();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in 0..1000 {
        let action = if i % 2 == 0 { EditAction::Insert } else { EditAction::Remove };
        let p = simulate_edit_pair(&s, action, &mut rng).unwrap();
        p.validate().unwrap_or_else(|e| panic!("pair {i}: {e}"));
        assert!(p.target.samples().iter().any(|&v| v != 0.0));
        p.spec.check_duration(p.background.duration()).unwrap();
    }
}

#[test]
fn corpus_roundtrip_on_disk() {
    let s = ToyCorpusSpec { n_clips: 12, seed: 8, ..spec() };
    let clips = simulate_corpus(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pairs = vec![simulate_edit_pair(&s, EditAction::Insert, &mut rng).unwrap()];
    let dir = tempfile::tempdir().unwrap();
    let m = write_corpus(dir.path(), &s, &clips, &pairs).unwrap();
    assert_eq!(m.splits.train.len(), 10);
    assert_eq!(m.splits.val, vec!["clip00008"]);
    assert_eq!(m.splits.test, vec!["clip00009"]);
    assert!(dir.path().join("pairs/pair00000.json").exists());
    let back = read_corpus(dir.path()).unwrap();
    assert_eq!(back.manifest, m);
    let orig = clips.iter().find(|c| c.id == "clip00003").unwrap();
    let got = back.clips.iter().find(|c| c.id == "clip00003").unwrap();
    assert_eq!(got.roll, orig.roll);
    assert_eq!(got.caption, orig.caption);
    // 32-bit float WAV
    let err = got.audio.samples().iter().zip(orig.audio.samples()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(err < 1e-6);
}

proptest! {
    #[test]
    fn edit_spec_roundtrip(
        insert in any::<bool>(),
        label in "[a-z][a-z _-]{0,10}[a-z]",
        start in 0.0f64..100.0,
        len in 1e-6f64..50.0,
    ) {
        let action = if insert { EditAction::Insert } else { EditAction::Remove };
        let spec = EditSpec::new(action, &label, start, start + len).unwrap();
        let back: EditSpec = spec.to_string().parse().unwrap();
        prop_assert_eq!(back, spec);
    }
}
