//! Score remappings that change granularity but not (or not much) order.

use super::EvalError;

pub const LOW: f64 = 0.05;
pub const HIGH: f64 = 0.95;
pub const LOW_BAND: (f64, f64) = (0.05, 0.19);
pub const HIGH_BAND: (f64, f64) = (0.81, 0.95);

fn non_empty(s: &[f64]) -> Result<(), EvalError> {
    if s.is_empty() {
        Err(EvalError::Empty)
    } else {
        Ok(())
    }
}

fn sorted_unique(s: &[f64]) -> Vec<f64> {
    let mut u = s.to_vec();
    u.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    u.dedup();
    u
}

/// Two-level split at the lower median: `s <= m` goes to 0.05, the rest
/// to 0.95. When the lower median is also the maximum, the split moves
/// down to the largest value below the maximum so two levels survive.
pub fn transform_bin(s: &[f64]) -> Result<Vec<f64>, EvalError> {
    non_empty(s)?;
    let mut sorted = s.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mut m = sorted[(sorted.len() - 1) / 2];
    let max = sorted[sorted.len() - 1];
    if m == max {
        if let Some(below) = sorted.iter().rev().find(|&&v| v < max) {
            m = *below;
        }
    }
    Ok(s.iter().map(|&v| if v <= m { LOW } else { HIGH }).collect())
}

fn spaced(lo: f64, hi: f64, n: usize, i: usize, anchor_high: bool) -> f64 {
    if n == 1 {
        return if anchor_high { hi } else { lo };
    }
    let t = i as f64 / (n - 1) as f64;
    lo * (1.0 - t) + hi * t
}

/// Order-preserving remap of the sorted unique values onto an even grid:
/// the lower `ceil(m/2)` values inside `[0.05, 0.19]`, the rest inside
/// `[0.81, 0.95]`.
pub fn transform_ext_rank(s: &[f64]) -> Result<Vec<f64>, EvalError> {
    non_empty(s)?;
    let u = sorted_unique(s);
    let m = u.len();
    let n_low = m.div_ceil(2);
    let n_high = m - n_low;
    let target = |v: f64| -> f64 {
        let r = u.partition_point(|&x| x < v);
        if r < n_low {
            spaced(LOW_BAND.0, LOW_BAND.1, n_low, r, false)
        } else {
            spaced(HIGH_BAND.0, HIGH_BAND.1, n_high, r - n_low, true)
        }
    };
    Ok(s.iter().map(|&v| target(v)).collect())
}

/// `a * (s - 0.5) + 0.5`, clipped to `[0, 1]`.
pub fn transform_affine(s: &[f64], a: f64) -> Result<Vec<f64>, EvalError> {
    non_empty(s)?;
    Ok(s.iter().map(|&v| (a * (v - 0.5) + 0.5).clamp(0.0, 1.0)).collect())
}

pub fn unique_count(s: &[f64]) -> usize {
    sorted_unique(s).len()
}

/// Fraction of scores with `lo <= s <= hi`.
pub fn middle_mass(s: &[f64], lo: f64, hi: f64) -> Result<f64, EvalError> {
    non_empty(s)?;
    Ok(s.iter().filter(|&&v| v >= lo && v <= hi).count() as f64 / s.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::auroc;
    use proptest::prelude::*;

    #[test]
    fn bin_examples() {
        let b = transform_bin(&[0.1, 0.4, 0.6, 0.9]).unwrap();
        assert_eq!(b, vec![LOW, LOW, HIGH, HIGH]);
        assert_eq!(unique_count(&b), 2);
        // lower median equals max
        let b = transform_bin(&[0.1, 0.9, 0.9, 0.9]).unwrap();
        assert_eq!(b, vec![LOW, HIGH, HIGH, HIGH]);
        assert_eq!(transform_bin(&[0.3, 0.3]).unwrap(), vec![LOW, LOW]);
        assert!(transform_bin(&[]).is_err());
    }

    #[test]
    fn ext_rank_examples() {
        let e = transform_ext_rank(&[0.5, 0.1, 0.3, 0.9, 0.3]).unwrap();
        // unique [0.1, 0.3, 0.5, 0.9]: two low, two high
        assert_eq!(e, vec![0.81, 0.05, 0.19, 0.95, 0.19]);
        assert_eq!(middle_mass(&e, 0.2, 0.8).unwrap(), 0.0);
        assert_eq!(transform_ext_rank(&[0.4]).unwrap(), vec![0.05]);
    }

    #[test]
    fn affine_and_mass_examples() {
        assert_eq!(transform_affine(&[0.1, 0.9], 2.0).unwrap(), vec![0.0, 1.0]);
        assert_eq!(unique_count(&[0.4; 5]), 1);
        assert!((middle_mass(&[0.1, 0.5, 0.9], 0.2, 0.8).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(middle_mass(&[0.2, 0.8], 0.2, 0.8).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn ext_rank_keeps_auroc(
            s in prop::collection::vec(0.0f64..1.0, 2..40),
            y in prop::collection::vec(any::<bool>(), 40),
        ) {
            let y = &y[..s.len()];
            prop_assume!(y.iter().any(|&l| l) && y.iter().any(|&l| !l));
            let e = transform_ext_rank(&s).unwrap();
            prop_assert_eq!(auroc(&e, y).unwrap(), auroc(&s, y).unwrap());
        }

        #[test]
        fn bin_has_two_levels(s in prop::collection::vec(0.0f64..1.0, 2..40)) {
            prop_assume!(unique_count(&s) >= 2);
            prop_assert_eq!(unique_count(&transform_bin(&s).unwrap()), 2);
        }

        #[test]
        fn mild_affine_keeps_unique_count(s in prop::collection::vec(0.0f64..1.0, 1..40), a in 0.1f64..=1.0) {
            prop_assert_eq!(unique_count(&transform_affine(&s, a).unwrap()), unique_count(&s));
        }
    }
}
