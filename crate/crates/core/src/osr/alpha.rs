//! Per-domain fusion weight picked on a small labeled development sample.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::eval::auroc;
use crate::fusion::{fuse, DEFAULT_ALPHA};
use crate::manifest::DomainCode;

pub const DEFAULT_SAMPLE: usize = 10;

/// `0.05, 0.10, ..., 0.95`.
pub fn alpha_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DevPoint {
    pub s_d: f64,
    pub s_r: f64,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaChoice {
    pub domain: DomainCode,
    pub alpha: f64,
    pub sample: Vec<usize>,
    /// AUROC of the chosen alpha on the sample; absent on fallback.
    pub sample_auroc: Option<f64>,
    pub fallback: bool,
}

/// Partial Fisher-Yates: the first `k` entries of a seeded shuffle.
fn take_random(rng: &mut ChaCha8Rng, mut pool: Vec<usize>, k: usize) -> Vec<usize> {
    let k = k.min(pool.len());
    for i in 0..k {
        let n = (pool.len() - i) as u128;
        let j = i + ((rng.next_u64() as u128 * n) >> 64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Indices of a class-balanced sample of up to `k` points. The generator
/// is ChaCha8 seeded with `seed` on stream `domain index`.
pub fn stratified_sample(points: &[DevPoint], k: usize, seed: u64, domain: DomainCode) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain.index() as u64);
    let pos: Vec<usize> = (0..points.len()).filter(|&i| points[i].label).collect();
    let neg: Vec<usize> = (0..points.len()).filter(|&i| !points[i].label).collect();
    let mut s = take_random(&mut rng, pos, k / 2);
    s.extend(take_random(&mut rng, neg, k - k / 2));
    s.sort_unstable();
    s
}

/// Grid argmax of AUROC over the sample; ties go to the smallest alpha.
/// A sample with one class falls back to the default weight.
pub fn tune_alpha(points: &[DevPoint], k: usize, seed: u64, domain: DomainCode) -> AlphaChoice {
    let sample = stratified_sample(points, k, seed, domain);
    let labels: Vec<bool> = sample.iter().map(|&i| points[i].label).collect();
    let mut best: Option<(f64, f64)> = None;
    if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
        for a in alpha_grid() {
            let s: Vec<f64> = sample
                .iter()
                .map(|&i| fuse(points[i].s_d, points[i].s_r, a).expect("scores in range"))
                .collect();
            let v = auroc(&s, &labels).expect("two classes");
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((a, v));
            }
        }
    }
    match best {
        Some((alpha, v)) => AlphaChoice { domain, alpha, sample, sample_auroc: Some(v), fallback: false },
        None => {
            log::info!("{domain}: single-class alpha sample, using {DEFAULT_ALPHA}");
            AlphaChoice { domain, alpha: DEFAULT_ALPHA, sample, sample_auroc: None, fallback: true }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64, bool)]) -> Vec<DevPoint> {
        v.iter().map(|&(s_d, s_r, label)| DevPoint { s_d, s_r, label }).collect()
    }

    #[test]
    fn grid_shape() {
        let g = alpha_grid();
        assert_eq!(g.len(), 19);
        assert_eq!(g[0], 0.05);
        assert_eq!(g[18], 0.95);
        assert_eq!(g[2], 0.15);
    }

    #[test]
    fn direct_dominant_domain_prefers_high_alpha() {
        // s_d separates, s_r is anti-informative
        let p = pts(&[
            (0.9, 0.1, true),
            (0.8, 0.2, true),
            (0.7, 0.0, true),
            (0.3, 0.9, false),
            (0.2, 0.8, false),
            (0.1, 1.0, false),
        ]);
        let c = tune_alpha(&p, 10, 0, DomainCode::D1);
        assert!(!c.fallback);
        assert_eq!(c.sample_auroc, Some(1.0));
        // smallest alpha that still separates perfectly
        let direct = tune_alpha(&p, 10, 0, DomainCode::D1).alpha;
        assert!(direct > 0.5);
    }

    #[test]
    fn flat_auroc_takes_smallest() {
        let p = pts(&[(0.9, 0.9, true), (0.1, 0.1, false)]);
        assert_eq!(tune_alpha(&p, 10, 0, DomainCode::D2).alpha, 0.05);
    }

    #[test]
    fn single_class_falls_back() {
        let p = pts(&[(0.9, 0.9, true), (0.8, 0.1, true)]);
        let c = tune_alpha(&p, 10, 0, DomainCode::D2);
        assert!(c.fallback);
        assert_eq!(c.alpha, DEFAULT_ALPHA);
    }

    #[test]
    fn sample_is_balanced_and_seeded() {
        let p: Vec<DevPoint> = (0..40)
            .map(|i| DevPoint { s_d: 0.5, s_r: 0.5, label: i % 4 == 0 })
            .collect();
        let a = stratified_sample(&p, 10, 0, DomainCode::D5);
        assert_eq!(a.len(), 10);
        assert_eq!(a.iter().filter(|&&i| p[i].label).count(), 5);
        assert_eq!(a, stratified_sample(&p, 10, 0, DomainCode::D5));
    }
}
