//! Recovery predicate, capacity metrics, and critical-batch-size estimation.
//!
//! Item `i` is *recovered* by `W` when its signal logit strictly dominates
//! every interaction logit:
//!
//! ```text
//! u_i^T W v_i > max_{j != i} u_j^T W v_i
//! ```
//!
//! Ties within [`TIE_TOLERANCE`] count as not recovered. The competitor
//! argmax always ranges over all `N` items, even when only a prefix of
//! inputs is checked.

use crate::dist::EmbeddingSet;
use crate::error::{Error, Result};
use crate::kernel;
use crate::objective::WeightMatrix;

/// Margins at or below this are treated as ties, i.e. not recovered.
pub(crate) const TIE_TOLERANCE: f64 = 1e-12;

/// Recovery metrics over the checked item range `[0, checked_bound)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CapacityReport {
    /// Number of leading items that were checked.
    pub checked_bound: usize,
    /// Items among the checked range with strict argmax recovery.
    pub recovered_count: usize,
    /// Largest `k` such that items `0..k` are all recovered.
    pub recovered_prefix: usize,
    /// Minimum signal-minus-best-interaction gap over recovered items.
    pub margin_min: Option<f64>,
    /// True when fewer than all `N` items were checked.
    pub truncated: bool,
}

impl CapacityReport {
    pub(crate) fn from_accum(acc: kernel::CapAccum, n_items: usize) -> Self {
        Self {
            checked_bound: acc.checked,
            recovered_count: acc.recovered,
            recovered_prefix: acc.prefix,
            margin_min: acc.margin_min.is_finite().then_some(acc.margin_min),
            truncated: acc.checked < n_items,
        }
    }

    pub(crate) fn all_ties(bound: usize, n_items: usize) -> Self {
        let mut acc = kernel::CapAccum::new();
        acc.push_ties(bound);
        Self::from_accum(acc, n_items)
    }
}

/// Whether item `i` is recovered, along with its margin.
pub fn is_recovered(w: &WeightMatrix, emb: &EmbeddingSet, item: usize) -> Result<(bool, f64)> {
    emb.check_item(item)?;
    if w.dim() != emb.dim() {
        return Err(Error::InvalidArgument(format!(
            "weight matrix dim {} does not match embedding dim {}",
            w.dim(),
            emb.dim()
        )));
    }
    let wv = w.entries().dot(&emb.v(item));
    let logits = emb.u_rows().dot(&wv);
    let row = logits.as_slice().expect("contiguous logits");
    let margin = row[item] - kernel::best_interaction(row, item);
    Ok((margin > TIE_TOLERANCE, margin))
}

/// Recovery metrics for items `[0, i_max)`, computed blockwise.
pub fn capacity(w: &WeightMatrix, emb: &EmbeddingSet, i_max: usize) -> Result<CapacityReport> {
    if i_max == 0 || i_max > emb.n_items() {
        return Err(Error::InvalidArgument(format!(
            "i_max must lie in [1, {}], got {i_max}",
            emb.n_items()
        )));
    }
    if w.dim() != emb.dim() {
        return Err(Error::InvalidArgument(format!(
            "weight matrix dim {} does not match embedding dim {}",
            w.dim(),
            emb.dim()
        )));
    }
    if w.is_zero() {
        // All logits tie at zero; nothing is recovered.
        return Ok(CapacityReport::all_ties(i_max, emb.n_items()));
    }
    let acc = kernel::capacity_scan(w.entries(), emb, i_max);
    Ok(CapacityReport::from_accum(acc, emb.n_items()))
}

/// Estimate the critical batch size from a `(B, mean capacity)` series.
///
/// The rising region (points below 60% of the maximum capacity) is fitted
/// with the information-theoretic slope `1/alpha` in log2 space; the plateau
/// is the median of the top-3 capacities. The estimate is the batch size at
/// which the fitted line meets the plateau.
pub fn critical_batch_estimate(points: &[(f64, f64)], alpha: f64) -> Result<f64> {
    if points.len() < 4 {
        return Err(Error::TooFewPoints {
            needed: 4,
            got: points.len(),
        });
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "alpha must be a positive real, got {alpha}"
        )));
    }
    for w in points.windows(2) {
        if !(w[1].0 > w[0].0) {
            return Err(Error::InvalidArgument(
                "batch sizes must be strictly increasing".into(),
            ));
        }
    }
    if points.iter().any(|&(b, c)| !(b > 0.0) || !c.is_finite()) {
        return Err(Error::InvalidArgument(
            "batch sizes must be positive and capacities finite".into(),
        ));
    }

    let max_cap = points.iter().map(|&(_, c)| c).fold(f64::NEG_INFINITY, f64::max);
    let rising: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|&(_, c)| c > 0.0 && c < 0.6 * max_cap)
        .collect();
    if rising.is_empty() {
        return Err(Error::MissingRegime {
            regime: "rising region",
        });
    }

    let mut caps: Vec<f64> = points.iter().map(|&(_, c)| c).collect();
    caps.sort_by(f64::total_cmp);
    let top3 = &caps[caps.len() - 3..];
    // A plateau means the largest capacities agree to within 1.5x; a series
    // still rising at the largest B fails this.
    if !(top3[0] > 0.0) || top3[2] / top3[0] > 1.5 {
        return Err(Error::MissingRegime { regime: "plateau" });
    }
    let plateau = top3[1];

    // log2 cap = (1/alpha) log2 B + c on the rising region.
    let intercept = rising
        .iter()
        .map(|&(b, c)| c.log2() - b.log2() / alpha)
        .sum::<f64>()
        / rising.len() as f64;
    Ok(2f64.powf(alpha * (plateau.log2() - intercept)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{CovarianceSpec, MinibatchWeights};
    use crate::kernel::weighted_outer_sum;
    use crate::testutil::random_orthogonal;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn sampled(d: usize, n: usize, seed: u64) -> EmbeddingSet {
        EmbeddingSet::sample(
            d,
            n,
            CovarianceSpec::Isotropic,
            CovarianceSpec::Isotropic,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_recover_nothing() {
        let emb = sampled(6, 24, 1);
        let w = WeightMatrix::zeros(6);
        for i in 0..24 {
            let (rec, margin) = is_recovered(&w, &emb, i).unwrap();
            assert!(!rec);
            assert_eq!(margin, 0.0);
        }
        let report = capacity(&w, &emb, 24).unwrap();
        assert_eq!(report.recovered_count, 0);
        assert_eq!(report.recovered_prefix, 0);
        assert_eq!(report.margin_min, None);
        assert!(!report.truncated);
    }

    #[test]
    fn orthonormal_memory_recovers_everything() {
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random_orthogonal(d, &mut rng);
        let v = random_orthogonal(d, &mut rng);
        let emb = EmbeddingSet::from_rows(u, v).unwrap();
        let ones: Vec<(usize, f64)> = (0..d).map(|i| (i, 1.0)).collect();
        let w = WeightMatrix::from_entries(weighted_outer_sum(
            emb.u_rows(),
            emb.v_rows(),
            &ones,
        ))
        .unwrap();
        let report = capacity(&w, &emb, d).unwrap();
        assert_eq!(report.recovered_count, d);
        assert_eq!(report.recovered_prefix, d);
        let margin = report.margin_min.unwrap();
        assert!((margin - 1.0).abs() < 1e-9, "margin {margin}");
    }

    #[test]
    fn single_recovered_item_gives_zero_prefix() {
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_orthogonal(d, &mut rng);
        let v = random_orthogonal(d, &mut rng);
        let emb = EmbeddingSet::from_rows(u, v).unwrap();
        let w = WeightMatrix::from_entries(weighted_outer_sum(
            emb.u_rows(),
            emb.v_rows(),
            &[(3, 1.0)],
        ))
        .unwrap();
        let report = capacity(&w, &emb, d).unwrap();
        assert_eq!(report.recovered_count, 1);
        assert_eq!(report.recovered_prefix, 0);
        assert!(is_recovered(&w, &emb, 3).unwrap().0);
        assert!(!is_recovered(&w, &emb, 0).unwrap().0);
    }

    /// Brute-force double loop as the oracle for the blocked path.
    pub(crate) fn brute_force_report(
        w: &WeightMatrix,
        emb: &EmbeddingSet,
        i_max: usize,
    ) -> CapacityReport {
        let mut recovered_count = 0;
        let mut recovered_prefix = 0;
        let mut prefix_intact = true;
        let mut margin_min = f64::INFINITY;
        for i in 0..i_max {
            let signal = emb.u(i).dot(&w.entries().dot(&emb.v(i)));
            let mut best = f64::NEG_INFINITY;
            for j in 0..emb.n_items() {
                if j == i {
                    continue;
                }
                let logit = emb.u(j).dot(&w.entries().dot(&emb.v(i)));
                if logit > best {
                    best = logit;
                }
            }
            let margin = signal - best;
            if margin > TIE_TOLERANCE {
                recovered_count += 1;
                if prefix_intact {
                    recovered_prefix += 1;
                }
                margin_min = margin_min.min(margin);
            } else {
                prefix_intact = false;
            }
        }
        CapacityReport {
            checked_bound: i_max,
            recovered_count,
            recovered_prefix,
            margin_min: margin_min.is_finite().then_some(margin_min),
            truncated: i_max < emb.n_items(),
        }
    }

    #[test]
    fn blocked_path_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..20 {
            let emb = sampled(4, 8, 100 + seed);
            let w = WeightMatrix::from_entries(Array2::from_shape_fn((4, 4), |_| {
                rng.sample::<f64, _>(StandardNormal)
            }))
            .unwrap();
            let blocked = capacity(&w, &emb, 8).unwrap();
            let brute = brute_force_report(&w, &emb, 8);
            assert_eq!(blocked.recovered_count, brute.recovered_count);
            assert_eq!(blocked.recovered_prefix, brute.recovered_prefix);
            match (blocked.margin_min, brute.margin_min) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn blocked_path_matches_naive_at_n64() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let emb = sampled(6, 64, 6);
        let w = WeightMatrix::from_entries(Array2::from_shape_fn((6, 6), |_| {
            rng.sample::<f64, _>(StandardNormal)
        }))
        .unwrap();
        let blocked = capacity(&w, &emb, 64).unwrap();
        let brute = brute_force_report(&w, &emb, 64);
        assert_eq!(blocked.recovered_count, brute.recovered_count);
        assert_eq!(blocked.recovered_prefix, brute.recovered_prefix);
        assert_eq!(blocked.checked_bound, brute.checked_bound);
        assert_eq!(blocked.truncated, brute.truncated);
        // The blocked logits come out of a different summation order, so
        // margins agree to rounding rather than bitwise.
        match (blocked.margin_min, brute.margin_min) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
            (a, b) => assert_eq!(a, b),
        }
    }

    #[test]
    fn reports_are_deterministic() {
        let emb = sampled(5, 40, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = WeightMatrix::from_entries(Array2::from_shape_fn((5, 5), |_| {
            rng.sample::<f64, _>(StandardNormal)
        }))
        .unwrap();
        let a = capacity(&w, &emb, 40).unwrap();
        let b = capacity(&w, &emb, 40).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn capacity_validates_bounds() {
        let emb = sampled(4, 8, 9);
        let w = WeightMatrix::zeros(4);
        assert!(capacity(&w, &emb, 0).is_err());
        assert!(capacity(&w, &emb, 9).is_err());
        let truncated = capacity(&w, &emb, 4).unwrap();
        assert!(truncated.truncated);
    }

    #[test]
    fn recovery_is_scale_invariant() {
        let emb = sampled(6, 32, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w0 = Array2::from_shape_fn((6, 6), |_| rng.sample::<f64, _>(StandardNormal));
        let w1 = WeightMatrix::from_entries(w0.clone()).unwrap();
        let w2 = WeightMatrix::from_entries(w0 * 3.7).unwrap();
        for i in 0..32 {
            assert_eq!(
                is_recovered(&w1, &emb, i).unwrap().0,
                is_recovered(&w2, &emb, i).unwrap().0
            );
        }
    }

    #[test]
    fn minibatch_weights_do_not_affect_capacity() {
        // capacity depends only on W and the embeddings
        let emb = sampled(4, 16, 12);
        let dist = crate::dist::FrequencyDistribution::power_law(16, 1.5).unwrap();
        let _ = MinibatchWeights::sample(&dist, 8, 1).unwrap();
        let w = WeightMatrix::zeros(4);
        assert_eq!(capacity(&w, &emb, 16).unwrap().recovered_count, 0);
    }

    #[test]
    fn critical_batch_piecewise_construction() {
        let alpha = 1.5;
        let points: Vec<(f64, f64)> = (4..=13)
            .map(|k| {
                let b = 2f64.powi(k);
                (b, b.powf(1.0 / alpha).min(100.0))
            })
            .collect();
        let b_star = critical_batch_estimate(&points, alpha).unwrap();
        let want = 100f64.powf(alpha);
        assert!(
            (b_star - want).abs() / want < 0.05,
            "B* = {b_star}, want {want}"
        );
    }

    #[test]
    fn critical_batch_rejects_constant_series() {
        let points: Vec<(f64, f64)> = (1..=6).map(|k| (2f64.powi(k), 42.0)).collect();
        assert!(matches!(
            critical_batch_estimate(&points, 1.5),
            Err(Error::MissingRegime {
                regime: "rising region"
            })
        ));
    }

    #[test]
    fn critical_batch_rejects_pure_power_law() {
        let alpha = 1.5;
        let points: Vec<(f64, f64)> = (1..=8)
            .map(|k| {
                let b = 2f64.powi(k);
                (b, b.powf(1.0 / alpha))
            })
            .collect();
        assert!(matches!(
            critical_batch_estimate(&points, alpha),
            Err(Error::MissingRegime { regime: "plateau" })
        ));
    }

    #[test]
    fn critical_batch_needs_four_points() {
        let points = vec![(1.0, 1.0), (2.0, 2.0), (4.0, 3.0)];
        assert!(matches!(
            critical_batch_estimate(&points, 1.5),
            Err(Error::TooFewPoints { .. })
        ));
    }
}
