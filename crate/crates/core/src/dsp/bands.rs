use super::{frame_count, FrameSpec};
use crate::error::{ensure, Result};

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Hann-windowed single-bin DFT at a fixed set of frequencies.
///
/// Returns the amplitude of a sinusoid at each band frequency, so a
/// stationary tone `a·sin(2πft)` reads back as `a` in its own band.
#[derive(Clone, Debug)]
pub struct BandBank {
    spec: FrameSpec,
    freqs: Vec<f64>,
    window_sum: f64,
    // per band: window·cos, window·sin over one frame
    cos: Vec<Vec<f64>>,
    sin: Vec<Vec<f64>>,
}

impl BandBank {
    pub fn new(spec: FrameSpec, freqs: &[f64], sample_rate: u32) -> Result<Self> {
        spec.validate()?;
        ensure!(!freqs.is_empty(), InvalidArgument, "band list is empty");
        let nyquist = sample_rate as f64 / 2.0;
        if let Some(f) = freqs.iter().find(|f| !(**f > 0.0 && **f < nyquist)) {
            return Err(crate::Error::InvalidArgument(format!(
                "band frequency {f} outside (0, {nyquist})"
            )));
        }
        let window = hann_window(spec.frame_length);
        let window_sum = window.iter().sum();
        let table = |f: f64, trig: fn(f64) -> f64| -> Vec<f64> {
            window
                .iter()
                .enumerate()
                .map(|(n, w)| {
                    w * trig(2.0 * std::f64::consts::PI * f * n as f64 / sample_rate as f64)
                })
                .collect()
        };
        Ok(Self {
            spec,
            freqs: freqs.to_vec(),
            window_sum,
            cos: freqs.iter().map(|&f| table(f, f64::cos)).collect(),
            sin: freqs.iter().map(|&f| table(f, f64::sin)).collect(),
        })
    }

    pub fn spec(&self) -> FrameSpec {
        self.spec
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    /// Amplitude per band for one frame.
    pub fn amplitudes(&self, frame: &[f64]) -> Vec<f64> {
        (0..self.freqs.len())
            .map(|b| {
                let re: f64 = frame.iter().zip(&self.cos[b]).map(|(x, c)| x * c).sum();
                let im: f64 = frame.iter().zip(&self.sin[b]).map(|(x, s)| x * s).sum();
                2.0 * (re * re + im * im).sqrt() / self.window_sum
            })
            .collect()
    }

    /// `frames × bands` amplitude matrix over the whole signal.
    pub fn analyze(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let n = frame_count(x.len(), self.spec);
        let mut buf = Vec::new();
        (0..n)
            .map(|i| self.amplitudes(self.spec.frame(x, i, &mut buf)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_back_tone_amplitude() {
        let sr = 44_100;
        let spec = FrameSpec::new(2048, 512).unwrap();
        let bin = sr as f64 / 2048.0;
        let freqs = [20.0 * bin, 40.0 * bin];
        let bank = BandBank::new(spec, &freqs, sr).unwrap();
        let x: Vec<f64> = (0..8192)
            .map(|n| 0.4 * (2.0 * std::f64::consts::PI * freqs[0] * n as f64 / sr as f64).sin())
            .collect();
        for frame in bank.analyze(&x) {
            assert!((frame[0] - 0.4).abs() < 1e-9);
            // bin-centred neighbours see no leakage from a stationary tone
            assert!(frame[1] < 1e-9);
        }
    }
}
