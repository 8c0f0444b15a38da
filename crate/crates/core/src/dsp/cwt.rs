//! Continuous wavelet transform with the Ricker (Mexican-hat) wavelet.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Rows are scales, columns are time steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scalogram {
    pub values: Vec<Vec<f64>>,
    pub scales: Vec<f64>,
}

impl Scalogram {
    pub fn n_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// What the transform sees beyond either end of the input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CwtPadding {
    #[default]
    Zero,
    /// Repeat the end samples.
    Edge,
}

/// Sampled Ricker wavelet at scale `a`, truncated to `±ceil(5a)` samples.
///
/// The taps are shifted to sum to exactly zero: truncation and sampling
/// otherwise leave a residual mean of order `1e-5`.
pub fn ricker(a: f64) -> Vec<f64> {
    let half = (5.0 * a).ceil() as isize;
    let amp = 2.0 / ((3.0 * a).sqrt() * std::f64::consts::PI.powf(0.25));
    let mut taps: Vec<f64> = (-half..=half)
        .map(|n| {
            let u = n as f64 / a;
            amp * (1.0 - u * u) * (-0.5 * u * u).exp()
        })
        .collect();
    let mean = taps.iter().sum::<f64>() / taps.len() as f64;
    taps.iter_mut().for_each(|t| *t -= mean);
    taps
}

/// Same-length Ricker CWT of `x` at each scale.
pub fn ricker_cwt(x: &[f64], scales: &[f64], padding: CwtPadding) -> Result<Scalogram> {
    ensure!(!scales.is_empty(), InvalidArgument, "scale list is empty");
    ensure!(!x.is_empty(), InvalidInput, "cannot transform an empty series");
    if let Some(s) = scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(crate::Error::InvalidArgument(format!("scale {s} must be positive")));
    }
    let n = x.len() as isize;
    let at = |k: isize| -> f64 {
        if (0..n).contains(&k) {
            x[k as usize]
        } else {
            match padding {
                CwtPadding::Zero => 0.0,
                CwtPadding::Edge => x[k.clamp(0, n - 1) as usize],
            }
        }
    };
    let values = scales
        .iter()
        .map(|&a| {
            let taps = ricker(a);
            let half = (taps.len() / 2) as isize;
            (0..n)
                .map(|t| {
                    taps.iter()
                        .enumerate()
                        .map(|(k, w)| w * at(t + k as isize - half))
                        .sum()
                })
                .collect()
        })
        .collect();
    Ok(Scalogram {
        values,
        scales: scales.to_vec(),
    })
}
