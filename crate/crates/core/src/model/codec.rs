//! Fixed analysis/synthesis pair standing in for a pretrained audio autoencoder.
//!
//! A clip is framed (4096/4096), each frame is reduced to the Hann amplitude of
//! 16 bin-centred sinusoid bands in dB, mapped to `[-1, 1]`, centred and rotated
//! by a seeded orthogonal matrix. Decoding inverts the rotation and resynthesises
//! continuous-phase sines with interpolated envelopes.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{AudioClip, BandBank, FrameSpec, DEFAULT_SAMPLE_RATE};
use crate::dsp::frame_count;
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Band centres as bins of a 2048-point DFT at 44.1 kHz.
pub const CODEC_BINS: [usize; 16] = [10, 13, 17, 22, 28, 36, 46, 58, 73, 92, 116, 146, 184, 232, 292, 368];

pub fn band_frequency(index: usize) -> f64 {
    CODEC_BINS[index] as f64 * DEFAULT_SAMPLE_RATE as f64 / 2048.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub seed: u64,
    pub frame: FrameSpec,
    /// Subtracted from features before rotation.
    pub offset: f64,
    pub scale: f64,
    /// Bands quieter than this are silent on synthesis.
    pub gate_db: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            frame: FrameSpec { frame_length: 4096, hop: 4096 },
            offset: -0.75,
            scale: 2.0,
            gate_db: -60.0,
        }
    }
}

pub fn db_to_feature(db: f64) -> f64 {
    ((db + 100.0) / 50.0 - 1.0).clamp(-1.0, 1.0)
}

pub fn feature_to_db(f: f64) -> f64 {
    (f.clamp(-1.0, 1.0) + 1.0) * 50.0 - 100.0
}

#[derive(Clone, Debug)]
pub struct LatentCodec {
    config: CodecConfig,
    width: usize,
    rotation: Vec<f64>,
    bank: BandBank,
}

impl LatentCodec {
    pub fn new(width: usize, config: CodecConfig) -> Result<Self> {
        ensure!(width >= 1, Config, "latent width must be positive");
        ensure!(config.scale > 0.0, Config, "codec scale must be positive");
        let bands = width.min(CODEC_BINS.len());
        let freqs: Vec<f64> = (0..bands).map(band_frequency).collect();
        let bank = BandBank::new(config.frame, &freqs, DEFAULT_SAMPLE_RATE)?;
        Ok(Self {
            rotation: orthogonal(width, config.seed),
            width,
            config,
            bank,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bank.freqs().len()
    }

    pub fn frame_rate(&self) -> f64 {
        self.config.frame.frame_rate(DEFAULT_SAMPLE_RATE)
    }

    pub fn frames_for(&self, samples: usize) -> usize {
        frame_count(samples, self.config.frame)
    }

    /// `[T, width]` band features in `[-1, 1]`; columns past the band count read as silence.
    pub fn features(&self, clip: &AudioClip) -> Result<Tensor> {
        ensure!(clip.sample_rate() == DEFAULT_SAMPLE_RATE, InvalidInput, "codec expects {DEFAULT_SAMPLE_RATE} Hz audio");
        ensure!(!clip.is_empty(), InvalidInput, "cannot encode an empty clip");
        let amps = self.bank.analyze(clip.samples());
        let mut data = vec![-1.0; amps.len() * self.width];
        for (t, row) in amps.iter().enumerate() {
            for (k, a) in row.iter().enumerate() {
                data[t * self.width + k] = db_to_feature(20.0 * a.max(1e-10).log10());
            }
        }
        Tensor::new(&[amps.len(), self.width], data)
    }

    /// `z = scale · Q (f - offset)` row by row.
    pub fn encode_features(&self, features: &Tensor) -> Result<Tensor> {
        let t = self.rows(features)?;
        let (w, m, s) = (self.width, self.config.offset, self.config.scale);
        let mut out = vec![0.0; t * w];
        for r in 0..t {
            let f = &features.data()[r * w..(r + 1) * w];
            for i in 0..w {
                out[r * w + i] = s * (0..w).map(|j| self.rotation[i * w + j] * (f[j] - m)).sum::<f64>();
            }
        }
        Tensor::new(&[t, w], out)
    }

    pub fn decode_features(&self, latent: &Tensor) -> Result<Tensor> {
        let t = self.rows(latent)?;
        let (w, m, s) = (self.width, self.config.offset, self.config.scale);
        let mut out = vec![0.0; t * w];
        for r in 0..t {
            let z = &latent.data()[r * w..(r + 1) * w];
            for j in 0..w {
                out[r * w + j] = (0..w).map(|i| self.rotation[i * w + j] * z[i]).sum::<f64>() / s + m;
            }
        }
        Tensor::new(&[t, w], out)
    }

    pub fn encode(&self, clip: &AudioClip) -> Result<Tensor> {
        self.encode_features(&self.features(clip)?)
    }

    pub fn decode(&self, latent: &Tensor, samples: usize) -> Result<AudioClip> {
        self.synthesize(&self.decode_features(latent)?, samples)
    }

    /// Sum of band sines whose amplitudes follow the features, linearly
    /// interpolated between frame centres. Rescaled only if it would clip.
    pub fn synthesize(&self, features: &Tensor, samples: usize) -> Result<AudioClip> {
        let t = self.rows(features)?;
        ensure!(samples >= 1, InvalidArgument, "need at least one output sample");
        let sr = DEFAULT_SAMPLE_RATE as f64;
        let spec = self.config.frame;
        let centre = |i: usize| (i * spec.hop) as f64 + spec.frame_length as f64 / 2.0;
        let mut out = vec![0.0; samples];
        for k in 0..self.bands() {
            let amp: Vec<f64> = (0..t)
                .map(|r| {
                    let db = feature_to_db(features.data()[r * self.width + k]);
                    if db < self.config.gate_db {
                        0.0
                    } else {
                        10f64.powf(db / 20.0)
                    }
                })
                .collect();
            if amp.iter().all(|&a| a == 0.0) {
                continue;
            }
            let w = 2.0 * PI * band_frequency(k) / sr;
            let mut frame = 0;
            for (n, o) in out.iter_mut().enumerate() {
                let x = n as f64;
                while frame + 1 < t && centre(frame + 1) <= x {
                    frame += 1;
                }
                let a = if x <= centre(0) {
                    amp[0]
                } else if frame + 1 >= t {
                    amp[t - 1]
                } else {
                    let u = (x - centre(frame)) / (centre(frame + 1) - centre(frame));
                    amp[frame] + u * (amp[frame + 1] - amp[frame])
                };
                if a != 0.0 {
                    *o += a * (w * x).sin();
                }
            }
        }
        let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 1.0 {
            out.iter_mut().for_each(|v| *v /= peak);
        }
        AudioClip::new(out, DEFAULT_SAMPLE_RATE)
    }

    fn rows(&self, x: &Tensor) -> Result<usize> {
        ensure!(x.rank() == 2 && x.shape()[1] == self.width, Shape, "expected [T, {}], got {:?}", self.width, x.shape());
        Ok(x.shape()[0])
    }
}

/// Row-orthonormal `n × n` matrix from Gram-Schmidt on seeded Gaussian rows.
fn orthogonal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<f64> = Vec::with_capacity(n * n);
    while q.len() < n * n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        for r in 0..q.len() / n {
            let row = &q[r * n..(r + 1) * n];
            let d: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(row).for_each(|(x, a)| *x -= d * a);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            q.extend(v.iter().map(|x| x / norm));
        }
    }
    q
}
