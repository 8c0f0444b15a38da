//! Glue from clips, rolls and edit pairs to model inputs and back to audio.

use crate::conditions::{event_indicator, extract_loudness, loudness_to_condition, Event, EventRoll, LoudnessConfig, PitchCode};
use crate::data::{span_mask, EditPair, EditSpec, ToyClip};
use crate::dsp::AudioClip;
use crate::error::{ensure, Result};
use crate::model::{ControlBatch, ModelBundle};
use crate::tensor::Tensor;
use crate::train::TrainExample;

fn batch1(t: Tensor) -> Result<Tensor> {
    let s = t.shape().to_vec();
    t.reshape(&[1, s[0], s[1]])
}

/// Loudness of `clip` as a `[1, T, width]` dense control at the loudness frame rate.
pub fn loudness_control(clip: &AudioClip, config: &LoudnessConfig, width: usize) -> Result<ControlBatch> {
    let curve = extract_loudness(clip, config)?;
    Ok(ControlBatch::Dense(batch1(loudness_to_condition(&curve, width)?.values().clone())?))
}

pub fn pitch_control(code: &PitchCode) -> ControlBatch {
    ControlBatch::Pitch {
        bins: code.bins.clone(),
        batch: 1,
        frames: code.frames,
        scales: code.scales,
    }
}

/// Event indicator of `roll` as a `[1, T, 64]` control.
pub fn event_control(roll: &EventRoll, frame_rate: f64) -> Result<ControlBatch> {
    Ok(ControlBatch::Events(batch1(event_indicator(roll, frame_rate)?)?))
}

/// `[1, T, latent]` codec latent of a clip.
pub fn encode_clip(bundle: &ModelBundle, clip: &AudioClip) -> Result<Tensor> {
    batch1(bundle.codec().encode(clip)?)
}

/// Decode row `b` of a `[B, T, latent]` latent to audio.
pub fn decode_latent(bundle: &ModelBundle, latent: &Tensor, b: usize, samples: usize) -> Result<AudioClip> {
    ensure!(latent.rank() == 3 && b < latent.shape()[0], Shape, "latent {:?} has no row {b}", latent.shape());
    let (t, d) = (latent.shape()[1], latent.shape()[2]);
    let row = Tensor::new(&[t, d], latent.data()[b * t * d..(b + 1) * t * d].to_vec())?;
    bundle.codec().decode(&row, samples)
}

/// Reference latent of `input` plus the instruction's label over its span,
/// both at the latent frame rate.
pub fn edit_control(bundle: &ModelBundle, input: &AudioClip, spec: &EditSpec) -> Result<ControlBatch> {
    spec.check_duration(input.duration())?;
    let reference = encode_clip(bundle, input)?;
    let frames = reference.shape()[1];
    let roll = EventRoll::new(
        input.duration(),
        vec![Event {
            label: spec.label.clone(),
            intervals: vec![(spec.start, spec.end)],
        }],
    )?;
    let events = event_control(&roll, bundle.codec().frame_rate())?.resample(frames)?;
    Ok(ControlBatch::Edit {
        reference,
        events: match events {
            ControlBatch::Events(t) => t,
            _ => unreachable!("event control"),
        },
    })
}

/// Backbone or branch training example from an annotated clip.
pub fn clip_example(bundle: &ModelBundle, clip: &ToyClip, control: Option<ControlBatch>) -> Result<TrainExample> {
    let latent = bundle.codec().encode(&clip.audio)?;
    Ok(TrainExample {
        latent,
        caption: clip.caption.clone(),
        control,
        edit_mask: None,
    })
}

/// Editor training example: the output latent is the target, the span mask
/// weights the loss.
pub fn edit_example(bundle: &ModelBundle, input: &AudioClip, output: &AudioClip, spec: &EditSpec, caption: &[String]) -> Result<TrainExample> {
    ensure!(input.len() == output.len(), Shape, "edit input and output lengths differ");
    let latent = bundle.codec().encode(output)?;
    let frames = latent.shape()[0];
    Ok(TrainExample {
        edit_mask: Some(span_mask((spec.start, spec.end), frames, bundle.codec().frame_rate())),
        control: Some(edit_control(bundle, input, spec)?),
        caption: caption.to_vec(),
        latent,
    })
}

pub fn pair_example(bundle: &ModelBundle, pair: &EditPair) -> Result<TrainExample> {
    edit_example(bundle, &pair.input, &pair.output, &pair.spec, &pair.caption_labels)
}
