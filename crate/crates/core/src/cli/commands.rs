use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use fgc_core::conditions::{
    event_indicator, extract_loudness, extract_pitch, fit_pitch_stats, loudness_to_condition, pitch_features, ConditionKind, EventRoll,
    LoudnessCurve, DEFAULT_FRAME_RATE,
};
use fgc_core::data::{read_corpus, read_pairs, simulate_corpus, simulate_edit_pair, write_corpus, EditAction, EditSpec};
use fgc_core::dsp::{estimate_f0, AudioClip, DEFAULT_SAMPLE_RATE};
use fgc_core::eval::{edit_score, loudness_mae, pitch_mae, toy_sed, EvalReport, F1Report, ItemMetrics};
use fgc_core::io::{read_wav, write_csv, write_wav, Dtype, Fgc1Array};
use fgc_core::model::{BranchConfig, BranchInput, ControlBatch, ModelBundle, ModelConfig};
use fgc_core::pipeline::{clip_example, decode_latent, edit_control, edit_example, event_control, loudness_control, pitch_control};
use fgc_core::tensor::Tensor;
use fgc_core::train::{sample, Target, TrainExample, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use super::{load_checkpoint, CliError, CliResult, RunConfig, EXIT_NAN};
use crate::{Arch, FeatureKind, TrainTarget};

const SPEC_HINT: &str = "expected \"action: label: start: end\", e.g. \"insert: clap: 2.0: 2.5\"";

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(fgc_core::Error::from)?;
    fs::write(path, bytes).map_err(|e| CliError::from(fgc_core::Error::File { path: path.into(), source: e }))
}

fn save_latent(path: &Path, latent: &Tensor) -> CliResult<()> {
    let s = latent.shape();
    let rows = Tensor::new(&[s[0] * s[1], s[2]], latent.data().to_vec())?;
    Ok(Fgc1Array::from_tensor(&rows, Dtype::F64)?.save(path)?)
}

pub fn extract(cfg: &RunConfig, out: &Path, kind: FeatureKind, input: &Path, checkpoint: Option<&Path>) -> CliResult<()> {
    let source = input.display().to_string();
    match kind {
        FeatureKind::Loudness => {
            let clip = read_wav(input)?;
            let curve = extract_loudness(&clip, &cfg.loudness)?;
            let n = curve.len();
            Fgc1Array::new(Dtype::F64, &[n, 1], curve.db.clone())?.save(&out.join("loudness.fgc1"))?;
            let rows = curve.db.iter().enumerate().map(|(i, d)| vec![cfg.loudness.frame.frame_center(i, DEFAULT_SAMPLE_RATE), *d]);
            write_csv(&out.join("loudness.csv"), &["time_s", "db"], rows)?;
            write_json(
                &out.join("loudness.json"),
                &json!({"kind": "loudness", "source": source, "frames": n, "frame_rate": curve.frame_rate, "unit": "dB", "config": cfg.loudness}),
            )?;
            println!("loudness: {n} frames at {:.2} Hz", curve.frame_rate);
        }
        FeatureKind::Pitch => {
            let clip = read_wav(input)?;
            let stats = match checkpoint {
                Some(p) => load_checkpoint(p)?
                    .pitch_stats
                    .ok_or_else(|| CliError::bad_input(format!("{} has no pitch quantizer range", p.display())))?,
                None => fit_pitch_stats([&clip], &cfg.pitch)?,
            };
            let code = extract_pitch(&clip, &cfg.pitch, &stats)?;
            let bins = code.bins.iter().map(|&b| b as f64).collect();
            Fgc1Array::new(Dtype::I32, &[code.frames, code.scales], bins)?.save(&out.join("pitch.fgc1"))?;
            let (track, _) = pitch_features(&clip, &cfg.pitch)?;
            let rows = (0..track.len()).map(|i| {
                vec![cfg.pitch.frame.frame_center(i, DEFAULT_SAMPLE_RATE), track.f0[i], f64::from(u8::from(track.voiced[i]))]
            });
            write_csv(&out.join("pitch_f0.csv"), &["time_s", "f0_hz", "voiced"], rows)?;
            write_json(
                &out.join("pitch.json"),
                &json!({"kind": "pitch", "source": source, "frames": code.frames, "scales": code.scales, "n_bins": code.n_bins,
                        "frame_rate": code.frame_rate, "stats": stats, "config": cfg.pitch}),
            )?;
            println!("pitch: {} frames x {} scales, {} voiced", code.frames, code.scales, track.voiced_count());
        }
        FeatureKind::Events => {
            let roll = EventRoll::load(input)?;
            let ind = event_indicator(&roll, DEFAULT_FRAME_RATE)?;
            let frames = ind.shape()[0];
            Fgc1Array::from_tensor(&ind, Dtype::F64)?.save(&out.join("events.fgc1"))?;
            write_json(
                &out.join("events.json"),
                &json!({"kind": "events", "source": source, "frames": frames, "frame_rate": DEFAULT_FRAME_RATE, "labels": roll.labels()}),
            )?;
            println!("events: {frames} frames, labels {:?}", roll.labels());
        }
    }
    Ok(())
}

pub fn simulate(cfg: RunConfig, out: &Path, clips: Option<usize>, pairs: usize, duration: Option<f64>) -> CliResult<()> {
    let mut spec = cfg.corpus;
    if let Some(n) = clips {
        spec.n_clips = n;
    }
    if let Some(d) = duration {
        spec.duration = d;
    }
    spec.validate()?;
    let clips = simulate_corpus(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_ed17);
    let pairs = (0..pairs)
        .map(|i| {
            let action = if i % 2 == 0 { EditAction::Insert } else { EditAction::Remove };
            simulate_edit_pair(&spec, action, &mut rng)
        })
        .collect::<fgc_core::Result<Vec<_>>>()?;
    let manifest = write_corpus(out, &spec, &clips, &pairs)?;
    println!(
        "corpus: {} clips ({} train / {} val / {} test), {} edit pairs in {}",
        clips.len(),
        manifest.splits.train.len(),
        manifest.splits.val.len(),
        manifest.splits.test.len(),
        pairs.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    cfg: &RunConfig,
    corpus_dir: &Path,
    target: TrainTarget,
    init: Option<&Path>,
    arch: Arch,
    lora: bool,
    branch: Option<String>,
    ckpt: &Path,
    log: Option<&Path>,
) -> CliResult<()> {
    cfg.train.validate()?;
    let mut bundle = match init {
        Some(p) => load_checkpoint(p)?,
        None if target == TrainTarget::Backbone => ModelBundle::new(ModelConfig {
            backbone: cfg.model.backbone.clone(),
            codec: cfg.model.codec.clone(),
            branches: Vec::new(),
            seed: cfg.seed,
        })?,
        None => return Err(CliError::bad_input("--init <checkpoint> is required to train a branch or editor")),
    };
    let name = branch.unwrap_or_else(|| format!("{target:?}").to_lowercase());
    let kind = match target {
        TrainTarget::Backbone => None,
        TrainTarget::Loudness => Some(ConditionKind::Loudness),
        TrainTarget::Pitch => Some(ConditionKind::Pitch),
        TrainTarget::Events => Some(ConditionKind::Event),
        TrainTarget::Insert | TrainTarget::Remove => Some(ConditionKind::Edit),
    };
    if let Some(kind) = kind {
        match bundle.branch(&name) {
            Some(b) if b.kind() != kind => {
                return Err(CliError::bad_input(format!("branch {name} takes {} input, not {kind}", b.kind())));
            }
            Some(_) => log::info!("continuing training of branch {name}"),
            None => {
                let m = &cfg.model;
                let config = match (kind, arch) {
                    (ConditionKind::Edit, _) => BranchConfig::editor(&name, m.adapter.clone(), lora.then_some(m.lora)),
                    (k, Arch::Adapter) => BranchConfig::adapter(&name, k, m.adapter.clone()),
                    (k, Arch::Controlnet) => BranchConfig::controlnet(&name, k, m.controlnet.clone()),
                };
                bundle.add_branch(config)?;
            }
        }
    }

    let data: Vec<TrainExample> = match target {
        TrainTarget::Insert | TrainTarget::Remove => {
            let action = if target == TrainTarget::Insert { EditAction::Insert } else { EditAction::Remove };
            let pairs: Vec<_> = read_pairs(corpus_dir)?.into_iter().filter(|p| p.spec.action == action).collect();
            if pairs.is_empty() {
                return Err(CliError::bad_input(format!("{} has no {action} pairs", corpus_dir.display())));
            }
            pairs
                .iter()
                .map(|p| edit_example(&bundle, &p.input, &p.output, &p.spec, &p.caption_labels))
                .collect::<fgc_core::Result<_>>()?
        }
        _ => {
            let corpus = read_corpus(corpus_dir)?;
            let train_ids = &corpus.manifest.splits.train;
            let clips: Vec<_> = corpus.clips.iter().filter(|c| train_ids.contains(&c.id)).collect();
            if clips.is_empty() {
                return Err(CliError::bad_input(format!("{} has no training clips", corpus_dir.display())));
            }
            if target == TrainTarget::Pitch && bundle.pitch_stats.is_none() {
                bundle.pitch_stats = Some(fit_pitch_stats(clips.iter().map(|c| &c.audio), &cfg.pitch)?);
            }
            let width = bundle.config().backbone.latent_width;
            clips
                .iter()
                .map(|c| {
                    let control = match target {
                        TrainTarget::Loudness => Some(loudness_control(&c.audio, &cfg.loudness, width)?),
                        TrainTarget::Pitch => Some(pitch_control(&extract_pitch(&c.audio, &cfg.pitch, bundle.pitch_stats.as_ref().expect("fitted"))?)),
                        TrainTarget::Events => Some(event_control(&c.roll, DEFAULT_FRAME_RATE)?),
                        _ => None,
                    };
                    clip_example(&bundle, c, control)
                })
                .collect::<fgc_core::Result<_>>()?
        }
    };

    let target = match kind {
        None => Target::Backbone,
        Some(_) => Target::Branch(name.clone()),
    };
    let mut log_file = match log {
        Some(p) => Some(std::io::BufWriter::new(
            fs::File::create(p).map_err(|e| CliError::from(fgc_core::Error::File { path: p.into(), source: e }))?,
        )),
        None => None,
    };
    let stats = {
        let mut trainer = Trainer::new(&mut bundle, target, cfg.train.clone())?;
        let every = (cfg.train.steps / 10).max(1);
        trainer.run(&data, log_file.as_mut().map(|w| w as &mut dyn std::io::Write), |s, _| {
            if (s.step + 1) % every == 0 {
                log::info!("step {} loss {:.5} grad norm {:.3}", s.step + 1, s.loss, s.grad_norm);
            }
            Ok(())
        })?
    };
    bundle.save(ckpt)?;
    let last = stats.last().map_or(f64::NAN, |s| s.loss);
    println!("trained {} for {} steps on {} examples; final loss {last:.5}; saved {}", name, stats.len(), data.len(), ckpt.display());
    Ok(())
}

fn read_fgc1(path: &Path) -> CliResult<Fgc1Array> {
    Ok(Fgc1Array::load(path)?)
}

fn is_ext(path: &Path, ext: &str) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn condition_from_file(cfg: &RunConfig, bundle: &ModelBundle, kind: ConditionKind, path: &Path) -> CliResult<ControlBatch> {
    let width = bundle.config().backbone.latent_width;
    let batch1 = |rows: usize, cols: usize, data: Vec<f64>| Tensor::new(&[1, rows, cols], data);
    Ok(match (kind, is_ext(path, "wav"), is_ext(path, "json")) {
        (ConditionKind::Loudness, true, _) => loudness_control(&read_wav(path)?, &cfg.loudness, width)?,
        (ConditionKind::Loudness, false, _) => {
            let a = read_fgc1(path)?;
            if a.cols() != 1 {
                return Err(CliError::bad_input(format!("{}: loudness file must have one column of dB values", path.display())));
            }
            let curve = LoudnessCurve { db: a.data, frame_rate: cfg.loudness.frame.frame_rate(DEFAULT_SAMPLE_RATE) };
            let c = loudness_to_condition(&curve, width)?;
            ControlBatch::Dense(batch1(c.len(), width, c.values().data().to_vec())?)
        }
        (ConditionKind::Pitch, true, _) => {
            let stats = bundle.pitch_stats.as_ref().ok_or_else(|| CliError::bad_input("checkpoint has no pitch quantizer range"))?;
            pitch_control(&extract_pitch(&read_wav(path)?, &cfg.pitch, stats)?)
        }
        (ConditionKind::Pitch, false, _) => {
            let a = read_fgc1(path)?;
            ControlBatch::Pitch {
                bins: a.data.iter().map(|&b| b as usize).collect(),
                batch: 1,
                frames: a.rows(),
                scales: a.cols(),
            }
        }
        (ConditionKind::Event, _, true) => event_control(&EventRoll::load(path)?, DEFAULT_FRAME_RATE)?,
        (ConditionKind::Event, _, false) => {
            let a = read_fgc1(path)?;
            let (r, c) = (a.rows(), a.cols());
            ControlBatch::Events(batch1(r, c, a.data)?)
        }
        (ConditionKind::Edit, _, _) => return Err(CliError::bad_input("editor branches are driven by `fgc edit`")),
    })
}

pub fn generate(cfg: &RunConfig, out: &Path, ckpt: &Path, text: &str, conditions: &[String], duration: Option<f64>) -> CliResult<()> {
    cfg.sample.validate()?;
    let bundle = load_checkpoint(ckpt)?;
    let labels: Vec<String> = text.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
    let d = duration.unwrap_or(cfg.corpus.duration);
    if !(d > 0.0 && d.is_finite()) {
        return Err(CliError::bad_input("--duration must be positive"));
    }
    let samples = (d * DEFAULT_SAMPLE_RATE as f64).round() as usize;
    let frames = bundle.codec().frames_for(samples);

    let mut controls: Vec<(String, ControlBatch)> = Vec::new();
    for c in conditions {
        let (name, path) = c
            .split_once('=')
            .ok_or_else(|| CliError::bad_input(format!("--condition {c:?} must be BRANCH=FILE")))?;
        let branch = bundle
            .branch(name)
            .ok_or_else(|| CliError::bad_input(format!("checkpoint has no branch {name:?}")))?;
        controls.push((name.to_string(), condition_from_file(cfg, &bundle, branch.kind(), Path::new(path))?));
    }
    let inputs: Vec<BranchInput> = controls.iter().map(|(n, c)| BranchInput::new(n, c)).collect();
    let text = bundle.text_batch(&[labels], &[false])?;
    let latent = sample(&bundle, &text, &inputs, frames, &cfg.sample)?;
    save_latent(&out.join("gen_latent.fgc1"), &latent)?;
    write_wav(&out.join("gen.wav"), &decode_latent(&bundle, &latent, 0, samples)?)?;
    println!("wrote gen.wav and gen_latent.fgc1 ({frames} latent frames) to {}", out.display());
    Ok(())
}

pub fn parse_spec(text: &str) -> CliResult<EditSpec> {
    text.parse::<EditSpec>().map_err(|e| {
        let msg = e.to_string();
        CliError::bad_input(if msg.contains("action: label") { msg } else { format!("{msg}; {SPEC_HINT}") })
    })
}

pub fn edit(cfg: &RunConfig, out: &Path, ckpt: &Path, input: &Path, spec: &str, branch: Option<&str>) -> CliResult<()> {
    let spec = parse_spec(spec)?;
    cfg.sample.validate()?;
    let bundle = load_checkpoint(ckpt)?;
    let clip = read_wav(input)?;
    spec.check_duration(clip.duration()).map_err(|e| CliError::bad_input(format!("{e}; {SPEC_HINT}")))?;
    let editors: Vec<&str> = bundle.branches().iter().filter(|b| b.kind() == ConditionKind::Edit).map(|b| b.name()).collect();
    let name = match branch {
        Some(b) if editors.contains(&b) => b.to_string(),
        Some(b) => return Err(CliError::bad_input(format!("checkpoint has no editor branch {b:?} (editors: {editors:?})"))),
        None if editors.contains(&spec.action.as_str()) => spec.action.as_str().to_string(),
        None if editors.len() == 1 => editors[0].to_string(),
        None => return Err(CliError::bad_input(format!("choose an editor with --branch (editors: {editors:?})"))),
    };
    let control = edit_control(&bundle, &clip, &spec)?;
    let text = bundle.text_batch(&[Vec::<String>::new()], &[false])?;
    let frames = bundle.codec().frames_for(clip.len());
    let latent = sample(&bundle, &text, &[BranchInput::new(&name, &control)], frames, &cfg.sample)?;
    let edited = decode_latent(&bundle, &latent, 0, clip.len())?;
    write_wav(&out.join("edited.wav"), &edited)?;
    save_latent(&out.join("edited_latent.fgc1"), &latent)?;
    let before = edit_score(&clip, &spec.label, (spec.start, spec.end), &cfg.corpus, &cfg.sed)?;
    let after = edit_score(&edited, &spec.label, (spec.start, spec.end), &cfg.corpus, &cfg.sed)?;
    write_json(
        &out.join("edit_report.json"),
        &json!({"spec": spec.to_string(), "instruction": spec.prose(), "branch": name,
                "edit_score_before": before, "edit_score_after": after, "output": "edited.wav"}),
    )?;
    println!("{}: edit score {before:.3} -> {after:.3}; wrote edited.wav", spec.prose());
    Ok(())
}

fn item_metrics(cfg: &RunConfig, vocab: &fgc_core::data::ToyCorpusSpec, reference: &fgc_core::data::ToyClip, gen: &AudioClip) -> CliResult<ItemMetrics> {
    let mut m = BTreeMap::new();
    let target = extract_loudness(&reference.audio, &cfg.loudness)?;
    m.insert("loudness_mae_db".to_string(), Some(loudness_mae(gen, &target, &cfg.loudness)?));
    let f0 = estimate_f0(&reference.audio, cfg.pitch.frame, cfg.pitch.yin)?;
    m.insert("pitch_mae_hz".to_string(), pitch_mae(gen, &f0, cfg.pitch.frame, cfg.pitch.yin)?);
    let det = toy_sed(gen, vocab, &cfg.sed)?;
    let f1 = F1Report::new(&reference.roll, &det, cfg.eval.collar, cfg.eval.segment)?;
    m.insert("f1_event".to_string(), Some(f1.f1_event));
    m.insert("f1_segment".to_string(), Some(f1.f1_segment));
    Ok(ItemMetrics { id: reference.id.clone(), metrics: m })
}

pub fn eval(cfg: &RunConfig, out: &Path, reference: &Path, generated: &Path) -> CliResult<()> {
    let corpus = read_corpus(reference)?;
    let mut items = Vec::new();
    for clip in &corpus.clips {
        let path = generated.join(format!("{}.wav", clip.id));
        if !path.exists() {
            continue;
        }
        let gen = read_wav(&path)?;
        items.push(item_metrics(cfg, &corpus.manifest.spec, clip, &gen).map_err(|e| CliError {
            message: format!("{}: {}", clip.id, e.message),
            ..e
        })?);
    }
    if items.is_empty() {
        return Err(CliError::bad_input(format!("no generated <clip id>.wav in {} matches the corpus", generated.display())));
    }
    let report = EvalReport::new(items);
    report.write_json(&out.join("eval_report.json"))?;
    report.write_csv(&out.join("eval_report.csv"))?;
    for (k, a) in &report.aggregate {
        match a.mean {
            Some(v) => println!("{k}: {v:.4} over {} clips ({} undefined)", a.count, a.undefined),
            None => println!("{k}: undefined for all {} clips", a.undefined),
        }
    }
    if report.has_nan() {
        return Err(CliError { code: EXIT_NAN, message: "a metric is NaN".into() });
    }
    Ok(())
}
