#![allow(dead_code)]

use abcboost_core::data::{apply_bins, fit_bins};
use abcboost_core::{BinnedDataset, RawDataset};
use rand::prelude::*;

/// `k` noisy Gaussian-ish blobs in `nf` dimensions; class `c` is centered at
/// `c` on feature `c % nf` and the remaining features are pure noise.
pub fn blobs(n: usize, k: usize, nf: usize, spread: f64, seed: u64) -> RawDataset {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n * nf);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        for f in 0..nf {
            // sum of uniforms: cheap bell shape
            let noise: f64 = (0..4).map(|_| rng.random::<f64>() - 0.5).sum();
            let center = if f == c % nf { 1.5 * (c / nf + 1) as f64 } else { 0.0 };
            features.push(center + spread * noise);
        }
        labels.push(c as i64);
    }
    RawDataset::from_rows(features, nf, labels).unwrap()
}

pub fn binned(raw: &RawDataset) -> BinnedDataset {
    let map = fit_bins(raw, 256).unwrap();
    apply_bins(raw, &map).unwrap()
}

/// `-log p_y` summed over rows of row-major scores.
pub fn direct_loss(scores: &[f64], labels: &[u32], k: usize) -> f64 {
    scores
        .chunks_exact(k)
        .zip(labels)
        .map(|(f, &y)| {
            let max = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = f.iter().map(|v| (v - max).exp()).sum();
            -((f[y as usize] - max) - z.ln())
        })
        .sum()
}
