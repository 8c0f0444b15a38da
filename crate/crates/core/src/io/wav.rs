use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::dsp::{AudioClip, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

/// Read a mono WAV (integer PCM or 32-bit float) and resample to 44.1 kHz.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut reader = WavReader::new(BufReader::new(file))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::InvalidInput(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match spec.sample_format {
        SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()?,
        SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()?
        }
    };
    let samples = resample_linear(&samples, spec.sample_rate, DEFAULT_SAMPLE_RATE);
    AudioClip::new(samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect(), DEFAULT_SAMPLE_RATE)
}

/// Write a clip as 32-bit float mono WAV.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = WavWriter::new(std::io::BufWriter::new(file), spec)?;
    for &s in clip.samples() {
        w.write_sample(s as f32)?;
    }
    w.finalize()?;
    Ok(())
}

/// Linear-interpolation resampling. Output length is `round(len · to / from)`.
pub fn resample_linear(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    let ratio = from as f64 / to as f64;
    let n = ((x.len() as f64 / ratio).round() as usize).max(1);
    (0..n)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = pos.floor() as usize;
            if j + 1 >= x.len() {
                return x[x.len() - 1];
            }
            let frac = pos - j as f64;
            x[j] * (1.0 - frac) + x[j + 1] * frac
        })
        .collect()
}
