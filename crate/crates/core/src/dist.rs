//! Power-law item frequencies, Gaussian embeddings, and minibatch draws.
//!
//! Item `i` (0-based) has rank `i + 1` and probability
//!
//! ```text
//! p_i = (i + 1)^(-alpha) / sum_{j=1}^{N} j^(-alpha)
//! ```
//!
//! Embeddings and unembeddings are i.i.d. Gaussian columns with a diagonal
//! covariance that is either `(1/d) I` or a trace-normalized power-law
//! spectrum. Minibatches are multinomial draws from the item frequencies,
//! sampled with an alias table so draws cost O(1) after O(N) setup.
//!
//! All sampling is driven by an explicit 64-bit seed through a fixed
//! counter-based generator (ChaCha8), so identical inputs reproduce
//! identical bytes within one build.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Kahan-Babuska (Neumaier) compensated sum.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Normalized power-law (Zipf) frequencies over `n_items` ranked items.
#[derive(Debug, Clone)]
pub struct FrequencyDistribution {
    n_items: usize,
    alpha: f64,
    probs: Vec<f64>,
}

impl FrequencyDistribution {
    /// Build `p_i ∝ (i+1)^(-alpha)`, normalized by direct compensated summation.
    pub fn power_law(n_items: usize, alpha: f64) -> Result<Self> {
        if n_items == 0 {
            return Err(Error::InvalidArgument(
                "n_items must be at least 1".into(),
            ));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "alpha must be a positive real, got {alpha}"
            )));
        }
        let raw: Vec<f64> = (1..=n_items).map(|r| (r as f64).powf(-alpha)).collect();
        let z = compensated_sum(raw.iter().copied());
        let probs = raw.into_iter().map(|w| w / z).collect();
        Ok(Self {
            n_items,
            alpha,
            probs,
        })
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, item: usize) -> f64 {
        self.probs[item]
    }

    /// Total probability mass of items with index `>= bound`.
    pub fn tail_mass(&self, bound: usize) -> f64 {
        compensated_sum(self.probs[bound.min(self.n_items)..].iter().copied())
    }
}

/// Diagonal covariance family for embedding columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovarianceSpec {
    /// `(1/d) I`, so that `E||x||^2 = 1`.
    Isotropic,
    /// Eigenvalues `lambda_k ∝ (k+1)^(-kappa)`, trace-normalized to 1.
    PowerLawDiagonal { kappa: f64 },
}

impl CovarianceSpec {
    pub fn power_law_diagonal(kappa: f64) -> Result<Self> {
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "kappa must be a nonnegative real, got {kappa}"
            )));
        }
        Ok(Self::PowerLawDiagonal { kappa })
    }

    /// Eigenvalues of the covariance, trace-normalized so they sum to 1.
    pub fn eigenvalues(&self, dim: usize) -> Vec<f64> {
        match *self {
            CovarianceSpec::Isotropic => vec![1.0 / dim as f64; dim],
            CovarianceSpec::PowerLawDiagonal { kappa } => {
                let raw: Vec<f64> = (1..=dim).map(|r| (r as f64).powf(-kappa)).collect();
                let z = compensated_sum(raw.iter().copied());
                raw.into_iter().map(|w| w / z).collect()
            }
        }
    }

    /// Per-coordinate standard deviations, i.e. square roots of the eigenvalues.
    pub fn scale_vector(&self, dim: usize) -> Vec<f64> {
        self.eigenvalues(dim).into_iter().map(f64::sqrt).collect()
    }
}

/// Sampled embedding (`v_i`) and unembedding (`u_i`) vectors for `n_items` items.
///
/// Vectors are stored one item per row (`n_items x dim`), which keeps the
/// blockwise logit products cache-friendly.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    dim: usize,
    n_items: usize,
    /// `n_items x dim`; row `i` is the unembedding `u_i`.
    u_rows: Array2<f64>,
    /// `n_items x dim`; row `i` is the embedding `v_i`.
    v_rows: Array2<f64>,
    cov_u: CovarianceSpec,
    cov_v: CovarianceSpec,
    seed: u64,
}

impl EmbeddingSet {
    /// Draw all vectors i.i.d. from the given diagonal covariances.
    pub fn sample(
        dim: usize,
        n_items: usize,
        cov_u: CovarianceSpec,
        cov_v: CovarianceSpec,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 || n_items == 0 {
            return Err(Error::InvalidArgument(
                "dim and n_items must be at least 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u_rows = sample_rows(&mut rng, n_items, dim, &cov_u.scale_vector(dim));
        let v_rows = sample_rows(&mut rng, n_items, dim, &cov_v.scale_vector(dim));
        Ok(Self {
            dim,
            n_items,
            u_rows,
            v_rows,
            cov_u,
            cov_v,
            seed,
        })
    }

    /// Direct constructor from explicit row matrices (one item per row).
    ///
    /// Bypasses sampling; used to replay recorded vectors or to build
    /// structured instances. Covariance metadata is recorded as isotropic
    /// and the seed as 0.
    pub fn from_rows(u_rows: Array2<f64>, v_rows: Array2<f64>) -> Result<Self> {
        if u_rows.dim() != v_rows.dim() {
            return Err(Error::InvalidArgument(format!(
                "unembedding shape {:?} does not match embedding shape {:?}",
                u_rows.dim(),
                v_rows.dim()
            )));
        }
        let (n_items, dim) = u_rows.dim();
        if dim == 0 || n_items == 0 {
            return Err(Error::InvalidArgument(
                "dim and n_items must be at least 1".into(),
            ));
        }
        if u_rows.iter().chain(v_rows.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(
                "embedding entries must be finite".into(),
            ));
        }
        Ok(Self {
            dim,
            n_items,
            u_rows,
            v_rows,
            cov_u: CovarianceSpec::Isotropic,
            cov_v: CovarianceSpec::Isotropic,
            seed: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cov_u(&self) -> CovarianceSpec {
        self.cov_u
    }

    pub fn cov_v(&self) -> CovarianceSpec {
        self.cov_v
    }

    /// Unembedding matrix, one item per row (`n_items x dim`).
    pub fn u_rows(&self) -> ArrayView2<'_, f64> {
        self.u_rows.view()
    }

    /// Embedding matrix, one item per row (`n_items x dim`).
    pub fn v_rows(&self) -> ArrayView2<'_, f64> {
        self.v_rows.view()
    }

    pub fn u(&self, item: usize) -> ArrayView1<'_, f64> {
        self.u_rows.row(item)
    }

    pub fn v(&self, item: usize) -> ArrayView1<'_, f64> {
        self.v_rows.row(item)
    }

    /// Mean unembedding vector over all items.
    pub fn u_mean(&self) -> Array1<f64> {
        let mut mean = self.u_rows.sum_axis(ndarray::Axis(0));
        mean.mapv_inplace(|x| x / self.n_items as f64);
        mean
    }

    pub fn check_item(&self, item: usize) -> Result<()> {
        if item >= self.n_items {
            Err(Error::IndexOutOfRange {
                index: item,
                n_items: self.n_items,
            })
        } else {
            Ok(())
        }
    }
}

fn sample_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: &[f64]) -> Array2<f64> {
    let mut rows = Array2::zeros((n, d));
    for mut row in rows.rows_mut() {
        for (k, x) in row.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *x = z * scale[k];
        }
    }
    rows
}

/// Batch size, with the population limit as a first-class mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BatchSize {
    Finite(u64),
    Population,
}

impl BatchSize {
    pub fn is_population(&self) -> bool {
        matches!(self, BatchSize::Population)
    }

    /// Sort key placing population after every finite batch size.
    pub fn sort_key(&self) -> u64 {
        match self {
            BatchSize::Finite(b) => *b,
            BatchSize::Population => u64::MAX,
        }
    }
}

impl std::fmt::Display for BatchSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BatchSize::Finite(b) => write!(f, "{b}"),
            BatchSize::Population => write!(f, "inf"),
        }
    }
}

/// Empirical item frequencies `q` from a sampled batch, or the population
/// frequencies `p` in population mode.
#[derive(Debug, Clone)]
pub struct MinibatchWeights {
    batch: BatchSize,
    n_items: usize,
    /// Occurrence counts, sorted by item; empty in population mode.
    counts: Vec<(usize, u64)>,
    /// Dense `q` in population mode, otherwise empty.
    dense: Vec<f64>,
    /// Sparse `(item, q_i)` pairs sorted by item, otherwise empty.
    sparse: Vec<(usize, f64)>,
}

impl MinibatchWeights {
    /// Draw `batch_size` items i.i.d. from `dist` and form empirical frequencies.
    pub fn sample(dist: &FrequencyDistribution, batch_size: u64, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch_size must be at least 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alias = AliasTable::new(dist.probs());
        let mut count_map = std::collections::BTreeMap::new();
        for _ in 0..batch_size {
            let item = alias.sample(&mut rng);
            *count_map.entry(item).or_insert(0u64) += 1;
        }
        let counts: Vec<(usize, u64)> = count_map.into_iter().collect();
        let sparse = counts
            .iter()
            .map(|&(i, c)| (i, c as f64 / batch_size as f64))
            .collect();
        Ok(Self {
            batch: BatchSize::Finite(batch_size),
            n_items: dist.n_items(),
            counts,
            dense: Vec::new(),
            sparse,
        })
    }

    /// Rebuild weights from explicit occurrence counts (replayed batches).
    pub fn from_counts(n_items: usize, counts: &[(usize, u64)]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidArgument(
                "counts must contain at least one item".into(),
            ));
        }
        let mut map = std::collections::BTreeMap::new();
        for &(item, c) in counts {
            if item >= n_items {
                return Err(Error::IndexOutOfRange {
                    index: item,
                    n_items,
                });
            }
            if c == 0 {
                return Err(Error::InvalidArgument(format!(
                    "count for item {item} must be positive"
                )));
            }
            *map.entry(item).or_insert(0u64) += c;
        }
        let batch_size: u64 = map.values().sum();
        let counts: Vec<(usize, u64)> = map.into_iter().collect();
        let sparse = counts
            .iter()
            .map(|&(i, c)| (i, c as f64 / batch_size as f64))
            .collect();
        Ok(Self {
            batch: BatchSize::Finite(batch_size),
            n_items,
            counts,
            dense: Vec::new(),
            sparse,
        })
    }

    /// Population mode: `q ≡ p`.
    pub fn population(dist: &FrequencyDistribution) -> Self {
        Self {
            batch: BatchSize::Population,
            n_items: dist.n_items(),
            counts: Vec::new(),
            dense: dist.probs().to_vec(),
            sparse: Vec::new(),
        }
    }

    pub fn batch(&self) -> BatchSize {
        self.batch
    }

    pub fn is_population(&self) -> bool {
        self.batch.is_population()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Occurrence counts sorted by item (empty in population mode).
    pub fn counts(&self) -> &[(usize, u64)] {
        &self.counts
    }

    /// Weight of a single item.
    pub fn weight(&self, item: usize) -> f64 {
        if self.is_population() {
            self.dense[item]
        } else {
            match self.sparse.binary_search_by_key(&item, |&(i, _)| i) {
                Ok(pos) => self.sparse[pos].1,
                Err(_) => 0.0,
            }
        }
    }

    /// Dense view of `q` in population mode.
    pub fn dense(&self) -> Option<&[f64]> {
        if self.is_population() {
            Some(&self.dense)
        } else {
            None
        }
    }

    /// Number of items with nonzero weight.
    pub fn support_len(&self) -> usize {
        if self.is_population() {
            self.n_items
        } else {
            self.sparse.len()
        }
    }

    /// Iterate `(item, q_i)` over the support, in increasing item order.
    pub fn iter(&self) -> Box<dyn Iterator<Item = (usize, f64)> + '_> {
        if self.is_population() {
            Box::new(self.dense.iter().copied().enumerate())
        } else {
            Box::new(self.sparse.iter().copied())
        }
    }

    /// Total weight of items with index `>= bound`.
    pub fn tail_mass(&self, bound: usize) -> f64 {
        compensated_sum(self.iter().filter(|&(i, _)| i >= bound).map(|(_, q)| q))
    }
}

/// Vose alias table for O(1) multinomial draws.
#[derive(Debug, Clone)]
struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<usize>,
}

impl AliasTable {
    fn new(weights: &[f64]) -> Self {
        let n = weights.len();
        let total = compensated_sum(weights.iter().copied());
        let mut scaled: Vec<f64> = weights.iter().map(|w| w * n as f64 / total).collect();
        let mut prob = vec![0.0; n];
        let mut alias = vec![0usize; n];
        let mut small: Vec<usize> = Vec::with_capacity(n);
        let mut large: Vec<usize> = Vec::with_capacity(n);
        for (i, &s) in scaled.iter().enumerate() {
            if s < 1.0 {
                small.push(i);
            } else {
                large.push(i);
            }
        }
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            prob[s] = scaled[s];
            alias[s] = l;
            scaled[l] = (scaled[l] + scaled[s]) - 1.0;
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        for &l in &large {
            prob[l] = 1.0;
        }
        for &s in &small {
            prob[s] = 1.0;
        }
        Self { prob, alias }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let n = self.prob.len();
        let i = rng.random_range(0..n);
        if rng.random::<f64>() < self.prob[i] {
            i
        } else {
            self.alias[i]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn power_law_single_item() {
        let d = FrequencyDistribution::power_law(1, 2.0).unwrap();
        assert_eq!(d.probs(), &[1.0]);
    }

    #[test]
    fn power_law_two_items_alpha_one() {
        let d = FrequencyDistribution::power_law(2, 1.0).unwrap();
        assert!((d.prob(0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((d.prob(1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn power_law_three_items_alpha_two() {
        let d = FrequencyDistribution::power_law(3, 2.0).unwrap();
        let expect = [36.0 / 49.0, 9.0 / 49.0, 4.0 / 49.0];
        for (got, want) in d.probs().iter().zip(expect) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn power_law_rejects_bad_arguments() {
        assert!(FrequencyDistribution::power_law(0, 1.0).is_err());
        assert!(FrequencyDistribution::power_law(10, 0.0).is_err());
        assert!(FrequencyDistribution::power_law(10, -1.5).is_err());
        assert!(FrequencyDistribution::power_law(10, f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn power_law_normalized_and_decreasing(n in 1usize..2000, alpha in 0.05f64..4.0) {
            let d = FrequencyDistribution::power_law(n, alpha).unwrap();
            let total = compensated_sum(d.probs().iter().copied());
            prop_assert!((total - 1.0).abs() < 1e-12);
            for w in d.probs().windows(2) {
                prop_assert!(w[0] > w[1]);
            }
            prop_assert!(d.probs().iter().all(|&p| p > 0.0));
            // pairwise ratio p_i / p_j = ((j+1)/(i+1))^alpha
            let (i, j) = (0usize, n - 1);
            let want = ((j + 1) as f64 / (i + 1) as f64).powf(alpha);
            let got = d.prob(i) / d.prob(j);
            prop_assert!((got / want - 1.0).abs() < 1e-12);
        }

        #[test]
        fn minibatch_counts_sum_to_batch(seed in any::<u64>(), b in 1u64..2000) {
            let d = FrequencyDistribution::power_law(50, 1.2).unwrap();
            let w = MinibatchWeights::sample(&d, b, seed).unwrap();
            let total: u64 = w.counts().iter().map(|&(_, c)| c).sum();
            prop_assert_eq!(total, b);
            let mass: f64 = compensated_sum(w.iter().map(|(_, q)| q));
            prop_assert!((mass - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embeddings_are_seed_deterministic() {
        let a = EmbeddingSet::sample(8, 32, CovarianceSpec::Isotropic, CovarianceSpec::Isotropic, 7)
            .unwrap();
        let b = EmbeddingSet::sample(8, 32, CovarianceSpec::Isotropic, CovarianceSpec::Isotropic, 7)
            .unwrap();
        assert_eq!(a.u_rows(), b.u_rows());
        assert_eq!(a.v_rows(), b.v_rows());
        let c = EmbeddingSet::sample(8, 32, CovarianceSpec::Isotropic, CovarianceSpec::Isotropic, 8)
            .unwrap();
        assert_ne!(a.u_rows(), c.u_rows());
    }

    #[test]
    fn isotropic_column_norms_concentrate() {
        let (d, n) = (64usize, 4096usize);
        let e = EmbeddingSet::sample(d, n, CovarianceSpec::Isotropic, CovarianceSpec::Isotropic, 11)
            .unwrap();
        let mean_sq: f64 =
            e.u_rows().rows().into_iter().map(|r| r.dot(&r)).sum::<f64>() / n as f64;
        assert!((0.97..=1.03).contains(&mean_sq), "mean ||u||^2 = {mean_sq}");
    }

    #[test]
    fn kappa_zero_matches_isotropic_exactly() {
        let iso = CovarianceSpec::Isotropic.scale_vector(17);
        let pl = CovarianceSpec::power_law_diagonal(0.0)
            .unwrap()
            .scale_vector(17);
        assert_eq!(iso, pl);
    }

    #[test]
    fn trace_normconvention_holds() {
        let eig = CovarianceSpec::power_law_diagonal(1.5)
            .unwrap()
            .eigenvalues(33);
        assert!((compensated_sum(eig.iter().copied()) - 1.0).abs() < 1e-12);
        for w in eig.windows(2) {
            assert!(w[0] > w[1]);
        }
    }

    #[test]
    fn minibatch_degenerate_distribution() {
        let d = FrequencyDistribution::power_law(1, 2.0).unwrap();
        let w = MinibatchWeights::sample(&d, 10, 3).unwrap();
        assert_eq!(w.counts(), &[(0, 10)]);
        assert_eq!(w.weight(0), 1.0);
    }

    #[test]
    fn minibatch_single_draw() {
        let d = FrequencyDistribution::power_law(100, 1.5).unwrap();
        let w = MinibatchWeights::sample(&d, 1, 42).unwrap();
        assert_eq!(w.support_len(), 1);
        assert_eq!(w.iter().next().unwrap().1, 1.0);
    }

    #[test]
    fn minibatch_frequencies_track_probabilities() {
        // Binomial standard-deviation bound on a large batch.
        let d = FrequencyDistribution::power_law(100, 1.5).unwrap();
        let b = 1_000_000u64;
        let w = MinibatchWeights::sample(&d, b, 5).unwrap();
        for (i, &p) in d.probs().iter().enumerate() {
            if p < 1e-4 {
                continue;
            }
            let q = w.weight(i);
            let bound = 5.0 * (p * (1.0 - p) / b as f64).sqrt();
            assert!(
                (q - p).abs() <= bound,
                "item {i}: |{q} - {p}| > {bound}"
            );
        }
    }

    #[test]
    fn population_weights_expose_p() {
        let d = FrequencyDistribution::power_law(2, 1.0).unwrap();
        let w = MinibatchWeights::population(&d);
        assert!(w.is_population());
        assert_eq!(w.dense().unwrap(), d.probs());
        assert!((compensated_sum(w.iter().map(|(_, q)| q)) - 1.0).abs() < 1e-15);
        assert_eq!(w.support_len(), 2);
    }

    #[test]
    fn tail_mass_splits_unit_mass() {
        let d = FrequencyDistribution::power_law(1000, 1.5).unwrap();
        let head: f64 = compensated_sum(d.probs()[..100].iter().copied());
        assert!((head + d.tail_mass(100) - 1.0).abs() < 1e-12);
    }
}
