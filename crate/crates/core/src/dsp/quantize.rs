use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Fixed `[lo, hi]` range of a uniform quantizer, fitted once on a corpus and
/// reused at inference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerStats {
    pub lo: f64,
    pub hi: f64,
}

impl QuantizerStats {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        ensure!(
            lo.is_finite() && hi.is_finite() && lo < hi,
            InvalidArgument,
            "quantizer range [{lo}, {hi}] must be finite with lo < hi"
        );
        Ok(Self { lo, hi })
    }

    /// Min/max of `values`. A degenerate range is widened symmetrically by
    /// `max(|v|, 1)` so that the observed value sits in the middle bin.
    pub fn fit<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<Self> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in values {
            ensure!(v.is_finite(), InvalidInput, "non-finite value {v}");
            lo = lo.min(v);
            hi = hi.max(v);
        }
        ensure!(lo.is_finite(), InvalidInput, "no values to fit a quantizer range");
        if hi - lo < 1e-12 {
            let pad = lo.abs().max(1.0);
            return Self::new(lo - pad, hi + pad);
        }
        Self::new(lo, hi)
    }
}

/// `clamp(floor((v - lo) / (hi - lo) · n_bins), 0, n_bins - 1)` for each value.
pub fn quantize_uniform(values: &[f64], n_bins: usize, lo: f64, hi: f64) -> Result<Vec<usize>> {
    ensure!(n_bins >= 2, InvalidArgument, "need at least two bins, got {n_bins}");
    ensure!(lo < hi, InvalidArgument, "quantizer range [{lo}, {hi}] is empty");
    let width = hi - lo;
    values
        .iter()
        .map(|&v| {
            ensure!(v.is_finite(), InvalidInput, "cannot quantize non-finite value {v}");
            let b = ((v - lo) / width * n_bins as f64).floor();
            Ok(b.clamp(0.0, (n_bins - 1) as f64) as usize)
        })
        .collect()
}

/// Bin centres.
pub fn dequantize_uniform(bins: &[usize], n_bins: usize, lo: f64, hi: f64) -> Vec<f64> {
    let width = (hi - lo) / n_bins as f64;
    bins.iter().map(|&b| lo + (b as f64 + 0.5) * width).collect()
}
