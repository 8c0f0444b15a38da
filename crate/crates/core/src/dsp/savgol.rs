//! Savitzky-Golay smoothing.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// How the first and last `window / 2` samples are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeMode {
    /// Fit one polynomial to the first (last) full window and evaluate it at
    /// the edge positions. Polynomials up to `poly_order` pass through exactly.
    #[default]
    Interp,
    /// Reflect the signal about its end samples and filter with the central
    /// coefficients.
    Mirror,
}

/// Least-squares weights that evaluate a degree-`poly_order` fit over a
/// `window`-sample block at block position `pos`.
pub fn savgol_coefficients(window: usize, poly_order: usize, pos: usize) -> Result<Vec<f64>> {
    validate(window, poly_order)?;
    ensure!(pos < window, InvalidArgument, "position {pos} outside window {window}");
    let half = (window / 2) as f64;
    let cols = poly_order + 1;
    // Gram matrix of the centred Vandermonde basis.
    let z: Vec<f64> = (0..window).map(|i| i as f64 - half).collect();
    let mut gram = vec![0.0; cols * cols];
    for zi in &z {
        for r in 0..cols {
            for c in 0..cols {
                gram[r * cols + c] += zi.powi((r + c) as i32);
            }
        }
    }
    let z0 = pos as f64 - half;
    let rhs: Vec<f64> = (0..cols).map(|j| z0.powi(j as i32)).collect();
    let y = solve(gram, rhs, cols)?;
    Ok(z
        .iter()
        .map(|zi| (0..cols).map(|j| y[j] * zi.powi(j as i32)).sum())
        .collect())
}

fn validate(window: usize, poly_order: usize) -> Result<()> {
    ensure!(window % 2 == 1, InvalidArgument, "window length {window} must be odd");
    ensure!(
        poly_order < window,
        InvalidArgument,
        "polynomial order {poly_order} must be below window length {window}"
    );
    Ok(())
}

/// Gaussian elimination with partial pivoting on a small dense system.
fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Result<Vec<f64>> {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap_or(col);
        ensure!(a[pivot * n + col].abs() > 1e-300, InvalidArgument, "singular least-squares system");
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row * n + row];
    }
    Ok(x)
}

/// Smooth `x` with the default polynomial edge fit.
pub fn savgol_filter(x: &[f64], window: usize, poly_order: usize) -> Result<Vec<f64>> {
    savgol_filter_with(x, window, poly_order, EdgeMode::Interp)
}

/// Smooth `x`. Series shorter than the window are returned unchanged.
pub fn savgol_filter_with(
    x: &[f64],
    window: usize,
    poly_order: usize,
    mode: EdgeMode,
) -> Result<Vec<f64>> {
    validate(window, poly_order)?;
    let n = x.len();
    if n < window {
        return Ok(x.to_vec());
    }
    let half = window / 2;
    let center = savgol_coefficients(window, poly_order, half)?;
    let dot = |coef: &[f64], block: &[f64]| coef.iter().zip(block).map(|(c, v)| c * v).sum::<f64>();

    let mut out = vec![0.0; n];
    for i in half..n - half {
        out[i] = dot(&center, &x[i - half..i + half + 1]);
    }
    match mode {
        EdgeMode::Interp => {
            for i in 0..half {
                let c = savgol_coefficients(window, poly_order, i)?;
                out[i] = dot(&c, &x[..window]);
                let c = savgol_coefficients(window, poly_order, window - 1 - i)?;
                out[n - 1 - i] = dot(&c, &x[n - window..]);
            }
        }
        EdgeMode::Mirror => {
            let at = |k: isize| -> f64 {
                let last = n as isize - 1;
                let idx = if k < 0 {
                    -k
                } else if k > last {
                    2 * last - k
                } else {
                    k
                };
                x[idx.clamp(0, last) as usize]
            };
            let edges = (0..half).chain(n - half..n);
            for i in edges {
                out[i] = center
                    .iter()
                    .enumerate()
                    .map(|(k, c)| c * at(i as isize + k as isize - half as isize))
                    .sum();
            }
        }
    }
    Ok(out)
}
