/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Top-`k` reference indices by cosine similarity to `query`, descending,
/// ties broken by the lower index. `k` larger than the pool returns all.
pub fn top_k(query: &[f64], refs: &[Vec<f64>], k: usize) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = refs
        .iter()
        .enumerate()
        .map(|(i, r)| (i, cosine(query, r)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_match_first() {
        let refs = vec![vec![1.0, 0.0], vec![0.6, 0.8], vec![0.0, 1.0]];
        let r = top_k(&[0.0, 1.0], &refs, 3);
        assert_eq!(r[0].0, 2);
        assert!((r[0].1 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ties_by_index() {
        let refs = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]];
        let r = top_k(&[1.0, 0.0, 0.0], &refs, 5);
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    }
}
