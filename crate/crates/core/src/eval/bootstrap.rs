//! Stratified paired bootstrap of the macro-AUROC difference.
//!
//! Generator: ChaCha8 (`rand_chacha`), seeded with `seed_from_u64(seed)`
//! and switched to stream `r` for resample `r`, so every resample can be
//! drawn independently and parallel runs match serial ones. Within a
//! resample, domains are visited in code order and each draws `n_d`
//! indices as `(next_u64() * n_d) >> 64` (128-bit multiply).

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{auroc, EvalError, LabeledScores};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { resamples: 1000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    /// Mean resampled `macro(A) - macro(B)`, in percentage points.
    pub delta_pp: f64,
    /// The same difference on the full sample.
    pub point_pp: f64,
    /// 2.5th and 97.5th percentiles, linear interpolation between order
    /// statistics.
    pub ci95: (f64, f64),
    /// Fraction of resamples with a strictly positive difference.
    pub p_gt_zero: f64,
    /// Resamples kept: those where at least one domain had both classes.
    pub resamples: usize,
    pub seed: u64,
    /// Domain draws left out because the resample had one class.
    pub skipped_domain_draws: usize,
}

fn draw(rng: &mut ChaCha8Rng, n: usize) -> usize {
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn macro_pair(a: &[f64], b: &[f64], labels: &[bool], strata: &[Vec<usize>]) -> Option<(f64, usize)> {
    let mut sa = 0.0;
    let mut sb = 0.0;
    let mut k = 0;
    let mut skipped = 0;
    for idx in strata {
        let y: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        let xa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
        let xb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
        match (auroc(&xa, &y), auroc(&xb, &y)) {
            (Ok(va), Ok(vb)) => {
                sa += va;
                sb += vb;
                k += 1;
            }
            _ => skipped += 1,
        }
    }
    (k > 0).then(|| ((sa - sb) / k as f64, skipped))
}

/// `a` and `b` score the same items; `labels`, domains and ids come from
/// `a`. Only `b.score` is read from `b`.
pub fn stratified_paired_bootstrap(
    a: &LabeledScores,
    b: &LabeledScores,
    cfg: &BootstrapConfig,
) -> Result<BootstrapReport, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() || cfg.resamples == 0 {
        return Err(EvalError::Empty);
    }
    let strata: Vec<Vec<usize>> = a.strata().into_values().collect();
    let (point, _) = macro_pair(&a.score, &b.score, &a.label, &strata).ok_or(EvalError::SingleClass {
        positives: a.label.iter().filter(|&&l| l).count(),
        negatives: a.label.iter().filter(|&&l| !l).count(),
    })?;

    let draws: Vec<Option<(f64, usize)>> = (0..cfg.resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(r as u64);
            let resampled: Vec<Vec<usize>> = strata
                .iter()
                .map(|idx| (0..idx.len()).map(|_| idx[draw(&mut rng, idx.len())]).collect())
                .collect();
            macro_pair(&a.score, &b.score, &a.label, &resampled)
        })
        .collect();

    let skipped: usize = draws.iter().flatten().map(|d| d.1).sum();
    if skipped > 0 {
        log::info!("bootstrap: {skipped} single-class domain draws skipped");
    }
    let mut deltas: Vec<f64> = draws.iter().flatten().map(|d| d.0 * 100.0).collect();
    if deltas.is_empty() {
        return Err(EvalError::Empty);
    }
    let positive = deltas.iter().filter(|&&d| d > 0.0).count();
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    deltas.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
    Ok(BootstrapReport {
        delta_pp: mean,
        point_pp: point * 100.0,
        ci95: (percentile(&deltas, 0.025), percentile(&deltas, 0.975)),
        p_gt_zero: positive as f64 / deltas.len() as f64,
        resamples: deltas.len(),
        seed: cfg.seed,
        skipped_domain_draws: skipped,
    })
}
