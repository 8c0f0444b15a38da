//! YIN-family fundamental frequency estimation.

use serde::{Deserialize, Serialize};

use super::{frame_count, AudioClip, FrameSpec};
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct YinConfig {
    pub fmin: f64,
    pub fmax: f64,
    /// Voicing threshold on the cumulative-mean-normalised difference.
    pub threshold: f64,
}

impl Default for YinConfig {
    fn default() -> Self {
        Self {
            fmin: 65.0,
            fmax: 2093.0,
            threshold: 0.15,
        }
    }
}

/// Per-frame f0 in Hz. Unvoiced frames hold `0.0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F0Track {
    pub f0: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl F0Track {
    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn voiced_count(&self) -> usize {
        self.voiced.iter().filter(|v| **v).count()
    }

    /// Gap-free track: unvoiced frames are linearly interpolated between
    /// voiced neighbours and held constant past the first/last voiced frame.
    /// A fully unvoiced track becomes constant `fallback`.
    pub fn interpolated(&self, fallback: f64) -> Vec<f64> {
        let voiced: Vec<usize> = (0..self.len()).filter(|&i| self.voiced[i]).collect();
        let (Some(&first), Some(&last)) = (voiced.first(), voiced.last()) else {
            return vec![fallback; self.len()];
        };
        let mut out = self.f0.clone();
        out[..first].fill(self.f0[first]);
        out[last + 1..].fill(self.f0[last]);
        for pair in voiced.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            for i in a + 1..b {
                let w = (i - a) as f64 / (b - a) as f64;
                out[i] = self.f0[a] * (1.0 - w) + self.f0[b] * w;
            }
        }
        out
    }
}

/// Estimate f0 per analysis frame with the YIN difference function,
/// threshold voicing and parabolic refinement of the lag.
pub fn estimate_f0(clip: &AudioClip, spec: FrameSpec, config: YinConfig) -> Result<F0Track> {
    spec.validate()?;
    let sr = clip.sample_rate() as f64;
    ensure!(
        config.fmin > 0.0 && config.fmin < config.fmax && config.fmax < sr / 2.0,
        InvalidArgument,
        "frequency band [{}, {}] must satisfy 0 < fmin < fmax < {}",
        config.fmin,
        config.fmax,
        sr / 2.0
    );
    let tau_max = ((sr / config.fmin).ceil() as usize).min(spec.frame_length / 2);
    let tau_min = ((sr / config.fmax).floor() as usize).max(2);
    ensure!(
        tau_min + 2 < tau_max,
        InvalidArgument,
        "frame length {} too short for fmin {}",
        spec.frame_length,
        config.fmin
    );
    let width = spec.frame_length - tau_max;

    let x = clip.samples();
    let n = frame_count(x.len(), spec);
    let mut f0 = vec![0.0; n];
    let mut voiced = vec![false; n];
    let mut buf = Vec::new();
    let mut diff = vec![0.0; tau_max + 1];
    let mut cmnd = vec![1.0; tau_max + 1];

    for i in 0..n {
        let frame = spec.frame(x, i, &mut buf);
        let energy: f64 = frame[..width].iter().map(|v| v * v).sum();
        if energy < 1e-10 * width as f64 {
            continue;
        }
        // d(tau) = e(0) + e(tau) - 2 r(tau), with e(tau) the energy of the lagged block.
        let mut lagged_energy = energy;
        for tau in 1..=tau_max {
            let out = frame[tau - 1];
            let inn = frame[tau - 1 + width];
            lagged_energy += inn * inn - out * out;
            let r: f64 = frame[..width]
                .iter()
                .zip(&frame[tau..tau + width])
                .map(|(a, b)| a * b)
                .sum();
            diff[tau] = (energy + lagged_energy - 2.0 * r).max(0.0);
        }
        let mut running = 0.0;
        for tau in 1..=tau_max {
            running += diff[tau];
            cmnd[tau] = if running > 0.0 {
                diff[tau] * tau as f64 / running
            } else {
                1.0
            };
        }
        let Some(mut tau) = (tau_min..tau_max).find(|&t| cmnd[t] < config.threshold) else {
            continue;
        };
        while tau + 1 < tau_max && cmnd[tau + 1] < cmnd[tau] {
            tau += 1;
        }
        let (a, b, c) = (diff[tau - 1], diff[tau], diff[tau + 1]);
        let denom = a - 2.0 * b + c;
        let shift = if denom.abs() > 1e-300 {
            (0.5 * (a - c) / denom).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        let freq = sr / (tau as f64 + shift);
        if freq >= config.fmin && freq <= config.fmax {
            f0[i] = freq;
            voiced[i] = true;
        }
    }
    Ok(F0Track { f0, voiced })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tone(freq: f64, secs: f64) -> AudioClip {
        let sr = 44_100;
        let n = (secs * sr as f64) as usize;
        let x = (0..n)
            .map(|i| 0.6 * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect();
        AudioClip::new(x, sr).unwrap()
    }

    #[test]
    fn pure_tones_within_one_percent() {
        for freq in [110.0, 220.0, 440.0, 880.0] {
            let track = estimate_f0(&tone(freq, 1.0), FrameSpec::default(), YinConfig::default()).unwrap();
            // all frames fit inside the signal, so all are interior
            let good = track
                .f0
                .iter()
                .zip(&track.voiced)
                .filter(|(f, v)| **v && ((**f - freq) / freq).abs() < 0.01)
                .count();
            assert_eq!(good, track.len(), "{freq} Hz: {:?}", track.f0);
        }
    }

    #[test]
    fn silence_is_unvoiced() {
        let clip = AudioClip::silence(44_100, 44_100).unwrap();
        let track = estimate_f0(&clip, FrameSpec::default(), YinConfig::default()).unwrap();
        assert_eq!(track.voiced_count(), 0);
        assert!(track.f0.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn white_noise_is_mostly_unvoiced() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = (0..44_100).map(|_| rng.random_range(-0.5..0.5)).collect();
            let clip = AudioClip::new(x, 44_100).unwrap();
            let track = estimate_f0(&clip, FrameSpec::default(), YinConfig::default()).unwrap();
            assert!(track.voiced_count() * 2 < track.len(), "seed {seed}");
        }
    }

    #[test]
    fn invalid_band() {
        let clip = tone(220.0, 0.2);
        let bad = YinConfig { fmin: 300.0, fmax: 200.0, ..Default::default() };
        assert!(estimate_f0(&clip, FrameSpec::default(), bad).is_err());
        let bad = YinConfig { fmax: 30_000.0, ..Default::default() };
        assert!(estimate_f0(&clip, FrameSpec::default(), bad).is_err());
    }

    #[test]
    fn interpolation_fills_gaps() {
        let track = F0Track {
            f0: vec![0.0, 100.0, 0.0, 0.0, 200.0, 0.0],
            voiced: vec![false, true, false, false, true, false],
        };
        let filled = track.interpolated(50.0);
        let expected = [100.0, 100.0, 100.0 + 100.0 / 3.0, 100.0 + 200.0 / 3.0, 200.0, 200.0];
        for (a, b) in filled.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let empty = F0Track { f0: vec![0.0; 3], voiced: vec![false; 3] };
        assert_eq!(empty.interpolated(50.0), vec![50.0; 3]);
    }
}
