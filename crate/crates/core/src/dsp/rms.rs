use super::FrameSpec;
use crate::error::{ensure, Result};

/// Floor constant added before taking the log; `20·log10(1e-5) = -100 dB`.
pub const DEFAULT_DB_EPS: f64 = 1e-5;

/// Number of analysis frames for a signal of `len` samples.
///
/// Signals shorter than one frame are zero-padded to a single frame.
pub fn frame_count(len: usize, spec: FrameSpec) -> usize {
    if len <= spec.frame_length {
        1
    } else {
        (len - spec.frame_length) / spec.hop + 1
    }
}

/// Per-frame root-mean-square energy.
pub fn frame_rms(samples: &[f64], spec: FrameSpec) -> Result<Vec<f64>> {
    ensure!(!samples.is_empty(), InvalidInput, "cannot frame an empty signal");
    spec.validate()?;
    let n = frame_count(samples.len(), spec);
    let mut buf = Vec::new();
    Ok((0..n)
        .map(|i| {
            let frame = spec.frame(samples, i, &mut buf);
            (frame.iter().map(|v| v * v).sum::<f64>() / spec.frame_length as f64).sqrt()
        })
        .collect())
}

/// `20·log10(rms + eps)` per frame.
pub fn rms_to_db(rms: &[f64], eps: f64) -> Result<Vec<f64>> {
    ensure!(eps > 0.0, InvalidArgument, "eps must be positive, got {eps}");
    Ok(rms.iter().map(|r| 20.0 * (r + eps).log10()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_signal_has_unit_rms() {
        let rms = frame_rms(&vec![1.0; 20_000], FrameSpec::default()).unwrap();
        assert!(rms.iter().all(|r| (r - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zeros_have_zero_rms() {
        let rms = frame_rms(&vec![0.0; 9000], FrameSpec::default()).unwrap();
        assert!(rms.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn sine_rms_matches_closed_form() {
        let sr = 44_100.0;
        // 40 whole periods per frame
        let freq = 40.0 * sr / 4096.0;
        let x: Vec<f64> = (0..44_100)
            .map(|n| (2.0 * std::f64::consts::PI * freq * n as f64 / sr).sin())
            .collect();
        // direct summation over one frame as the reference
        let direct = (x[..4096].iter().map(|v| v * v).sum::<f64>() / 4096.0).sqrt();
        let rms = frame_rms(&x, FrameSpec::default()).unwrap();
        assert!((rms[0] - direct).abs() < 1e-12);
        for r in rms {
            assert!((r - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-3, "{r}");
        }
    }

    #[test]
    fn empty_signal_is_rejected() {
        assert!(frame_rms(&[], FrameSpec::default()).is_err());
    }

    #[test]
    fn short_signal_pads_to_one_frame() {
        let rms = frame_rms(&[1.0; 1024], FrameSpec::default()).unwrap();
        assert_eq!(rms.len(), 1);
        assert!((rms[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn db_conversion() {
        let db = rms_to_db(&[1.0, 0.0, std::f64::consts::FRAC_1_SQRT_2], DEFAULT_DB_EPS).unwrap();
        assert!(db[0].abs() < 1e-4);
        assert!((db[1] + 100.0).abs() < 1e-9);
        assert!((db[2] + 3.0103).abs() < 1e-3);
        assert!(rms_to_db(&[1.0], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn frame_count_formula(len in 1usize..20_000, frame in 1usize..3000, hop_frac in 0.0f64..1.0) {
            let hop = ((frame as f64 * hop_frac) as usize).clamp(1, frame);
            let spec = FrameSpec::new(frame, hop).unwrap();
            let rms = frame_rms(&vec![0.5; len], spec).unwrap();
            let expected = if len >= frame { (len - frame) / hop + 1 } else { 1 };
            prop_assert_eq!(rms.len(), expected);
        }
    }
}
