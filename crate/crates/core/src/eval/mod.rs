//! Ranking metrics, macro aggregation and the paired statistics built on
//! them.

pub mod bootstrap;
pub mod report;
pub mod transforms;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::DomainCode;

pub use bootstrap::{stratified_paired_bootstrap, BootstrapConfig, BootstrapReport};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("both classes are required ({positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("length mismatch: {0} scores, {1} labels")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("non-finite score {0}")]
    NonFinite(f64),
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite(*s));
    }
    let p = labels.iter().filter(|&&l| l).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(EvalError::SingleClass { positives: p, negatives: n });
    }
    Ok((p, n))
}

fn cmp_f64(a: &f64, b: &f64) -> Ordering {
    a.partial_cmp(b).expect("finite scores")
}

/// Mann-Whitney estimate via midranks; ties count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let (p, n) = check(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| cmp_f64(&scores[a], &scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let pf = p as f64;
    Ok((rank_sum - pf * (pf + 1.0) / 2.0) / (pf * n as f64))
}

/// Operating points at each distinct score, from the highest threshold
/// down: `(threshold, true positives, false positives)` counting `s >= t`.
fn sweep(scores: &[f64], labels: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| cmp_f64(&scores[b], &scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((t, tp, fp));
    }
    out
}

/// Average precision: sum over distinct thresholds of
/// `(recall_k - recall_{k-1}) * precision_k`, a right-continuous step
/// integral with no interpolation between operating points.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let (p, _) = check(scores, labels)?;
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for (_, tp, fp) in sweep(scores, labels) {
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / p as f64 * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
    }
    Ok(ap)
}

/// FPR at the highest threshold whose TPR reaches `tpr`. Among all
/// thresholds meeting the requirement this is the one with the lowest FPR.
pub fn fpr_at_tpr(scores: &[f64], labels: &[bool], tpr: f64) -> Result<f64, EvalError> {
    let (p, n) = check(scores, labels)?;
    for (_, tp, fp) in sweep(scores, labels) {
        if tp as f64 / p as f64 >= tpr {
            return Ok(fp as f64 / n as f64);
        }
    }
    Ok(1.0)
}

/// Unweighted mean of the values present.
pub fn macro_mean(values: &[f64]) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Parallel per-item lists.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledScores {
    pub item_id: Vec<String>,
    pub domain: Vec<DomainCode>,
    pub label: Vec<bool>,
    pub score: Vec<f64>,
}

impl LabeledScores {
    pub fn push(&mut self, id: impl Into<String>, d: DomainCode, label: bool, score: f64) {
        self.item_id.push(id.into());
        self.domain.push(d);
        self.label.push(label);
        self.score.push(score);
    }

    pub fn len(&self) -> usize {
        self.score.len()
    }

    pub fn is_empty(&self) -> bool {
        self.score.is_empty()
    }

    /// Item indices per domain, in input order.
    pub fn strata(&self) -> BTreeMap<DomainCode, Vec<usize>> {
        let mut m: BTreeMap<DomainCode, Vec<usize>> = BTreeMap::new();
        for (i, d) in self.domain.iter().enumerate() {
            m.entry(*d).or_default().push(i);
        }
        m
    }

    fn subset(&self, idx: &[usize]) -> (Vec<f64>, Vec<bool>) {
        (
            idx.iter().map(|&i| self.score[i]).collect(),
            idx.iter().map(|&i| self.label[i]).collect(),
        )
    }

    /// `metric` per domain. Domains with a single class are left out.
    pub fn per_domain(
        &self,
        metric: impl Fn(&[f64], &[bool]) -> Result<f64, EvalError>,
    ) -> BTreeMap<DomainCode, f64> {
        self.strata()
            .into_iter()
            .filter_map(|(d, idx)| {
                let (s, l) = self.subset(&idx);
                metric(&s, &l).ok().map(|v| (d, v))
            })
            .collect()
    }

    pub fn macro_metric(
        &self,
        metric: impl Fn(&[f64], &[bool]) -> Result<f64, EvalError>,
    ) -> Result<f64, EvalError> {
        macro_mean(&self.per_domain(metric).into_values().collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooSummary {
    /// Macro delta with each domain left out, in input order.
    pub values: Vec<(DomainCode, f64)>,
    pub min: f64,
    pub max: f64,
    /// Population standard deviation of `values`.
    pub std: f64,
    pub positive_count: usize,
}

pub fn leave_one_domain_out(deltas: &[(DomainCode, f64)]) -> Result<LooSummary, EvalError> {
    if deltas.len() < 2 {
        return Err(EvalError::Empty);
    }
    let m = (deltas.len() - 1) as f64;
    let values: Vec<(DomainCode, f64)> = (0..deltas.len())
        .map(|j| {
            let rest: f64 = deltas.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, d)| d.1).sum();
            (deltas[j].0, rest / m)
        })
        .collect();
    let xs: Vec<f64> = values.iter().map(|v| v.1).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
    Ok(LooSummary {
        min: xs.iter().copied().fold(f64::INFINITY, f64::min),
        max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        std: var.sqrt(),
        positive_count: xs.iter().filter(|&&x| x > 0.0).count(),
        values,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Complementarity {
    pub n: usize,
    pub both_correct: f64,
    pub a_only: f64,
    pub b_only: f64,
    pub both_wrong: f64,
}

/// Per-domain agreement of two thresholded scorers. A score at or above
/// `threshold` calls the item anomalous.
pub fn complementarity_matrix(
    a: &[f64],
    b: &[f64],
    labels: &[bool],
    domains: &[DomainCode],
    threshold: f64,
) -> Result<BTreeMap<DomainCode, Complementarity>, EvalError> {
    if a.len() != labels.len() || b.len() != labels.len() || domains.len() != labels.len() {
        return Err(EvalError::LengthMismatch(a.len(), labels.len()));
    }
    let mut counts: BTreeMap<DomainCode, [usize; 4]> = BTreeMap::new();
    for i in 0..labels.len() {
        let ca = (a[i] >= threshold) == labels[i];
        let cb = (b[i] >= threshold) == labels[i];
        let slot = match (ca, cb) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        counts.entry(domains[i]).or_default()[slot] += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(d, c)| {
            let n: usize = c.iter().sum();
            let f = |k: usize| c[k] as f64 / n as f64;
            (d, Complementarity { n, both_correct: f(0), a_only: f(1), b_only: f(2), both_wrong: f(3) })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auroc_examples() {
        let y = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &y).unwrap(), 0.75);
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &y).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &y).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(EvalError::SingleClass { .. })));
    }

    #[test]
    fn auprc_and_fpr_examples() {
        let y = [false, false, true, true];
        let perfect = [0.1, 0.2, 0.8, 0.9];
        assert_eq!(auprc(&perfect, &y).unwrap(), 1.0);
        assert_eq!(fpr_at_tpr(&perfect, &y, 0.95).unwrap(), 0.0);
        let anti = [0.9, 0.8, 0.2, 0.1];
        assert_eq!(fpr_at_tpr(&anti, &y, 0.95).unwrap(), 1.0);
        // ranking: pos, neg, pos, neg -> AP = 0.5*1 + 0.5*(2/3)
        let s = [0.6, 0.1, 0.9, 0.5];
        assert!((auprc(&s, &y).unwrap() - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn macro_examples() {
        assert_eq!(macro_mean(&[0.6, 0.8]).unwrap(), 0.7);
        assert_eq!(macro_mean(&[0.25; 12]).unwrap(), 0.25);
        assert!(macro_mean(&[]).is_err());
    }

    #[test]
    fn loo_three_domains() {
        let d = [(DomainCode::D1, 1.0), (DomainCode::D2, 2.0), (DomainCode::D3, 6.0)];
        let l = leave_one_domain_out(&d).unwrap();
        assert_eq!(l.values.iter().map(|v| v.1).collect::<Vec<_>>(), vec![4.0, 3.5, 1.5]);
        assert_eq!((l.min, l.max, l.positive_count), (1.5, 4.0, 3));
        let equal = [(DomainCode::D1, 0.3), (DomainCode::D2, 0.3)];
        let l = leave_one_domain_out(&equal).unwrap();
        assert_eq!((l.min, l.max, l.std), (0.3, 0.3, 0.0));
    }

    #[test]
    fn complementarity_identity_and_extremes() {
        let y = [true, false, true, false];
        let d = [DomainCode::D1; 4];
        let s = [0.9, 0.1, 0.4, 0.6];
        let m = complementarity_matrix(&s, &s, &y, &d, 0.5).unwrap();
        assert_eq!(m[&DomainCode::D1].a_only + m[&DomainCode::D1].b_only, 0.0);
        let perfect = [0.9, 0.1, 0.9, 0.1];
        let anti = [0.1, 0.9, 0.1, 0.9];
        let m = complementarity_matrix(&perfect, &anti, &y, &d, 0.5).unwrap();
        assert_eq!(m[&DomainCode::D1].a_only, 1.0);
    }

    fn pairs_auroc(s: &[f64], y: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] && !y[j] {
                    den += 1.0;
                    num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..14).prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..6).prop_map(|v| v as f64 / 5.0), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_count((s, y) in scored()) {
            prop_assume!(y.iter().any(|&l| l) && y.iter().any(|&l| !l));
            prop_assert!((auroc(&s, &y).unwrap() - pairs_auroc(&s, &y)).abs() < 1e-12);
        }

        #[test]
        fn fpr_monotone_in_requirement((s, y) in scored(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            prop_assume!(y.iter().any(|&l| l) && y.iter().any(|&l| !l));
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(fpr_at_tpr(&s, &y, lo).unwrap() <= fpr_at_tpr(&s, &y, hi).unwrap());
        }
    }
}
