//! Deterministic stand-in for a pretrained text encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure, Result};

pub const TEXT_WIDTH: usize = 64;

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Unit-norm 64-d vector seeded by a hash of the lowercased label.
pub fn embed_label(label: &str) -> Result<Vec<f64>> {
    ensure!(!label.trim().is_empty(), InvalidArgument, "label is empty");
    let key = label.trim().to_lowercase();
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(key.as_bytes()));
    let v: Vec<f64> = (0..TEXT_WIDTH).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(v.into_iter().map(|x| x / norm).collect())
}

/// Global caption vector: the normalised sum of its label embeddings, or
/// `None` for an empty caption.
pub fn caption_embedding<S: AsRef<str>>(labels: &[S]) -> Result<Option<Vec<f64>>> {
    if labels.is_empty() {
        return Ok(None);
    }
    let mut acc = vec![0.0; TEXT_WIDTH];
    for l in labels {
        for (a, v) in acc.iter_mut().zip(embed_label(l.as_ref())?) {
            *a += v;
        }
    }
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    ensure!(norm > 0.0, InvalidInput, "caption embedding vanished");
    Ok(Some(acc.into_iter().map(|x| x / norm).collect()))
}
