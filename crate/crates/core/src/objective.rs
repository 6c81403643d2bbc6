//! Cross-entropy objective for the linear associative memory model.
//!
//! For a weight matrix `W`, the score of output `j` given input `i` is the
//! softmax of the logits `u_j^T W v_i` over all `N` outputs, and the loss is
//!
//! ```text
//! L(W) = - sum_i q_i ( u_i^T W v_i - log sum_j exp(u_j^T W v_i) )
//! ```
//!
//! with `q` either empirical minibatch frequencies or the population
//! frequencies. The negative gradient is
//!
//! ```text
//! G = sum_i q_i ( u_i - sum_j u_j phat(j|i) ) v_i^T.
//! ```
//!
//! The Hessian is exposed only at `W = 0`, where it factors as
//! `H[D] = Sigma_u D M_v` with `Sigma_u = (1/N) sum u_i u_i^T - u_bar u_bar^T`
//! and `M_v = sum_i q_i v_i v_i^T`.

use nalgebra::{Cholesky, DMatrix};
use ndarray::{Array1, Array2};

use crate::dist::{EmbeddingSet, MinibatchWeights};
use crate::error::{Error, Result};
use crate::kernel;
use crate::spectral::{from_na, to_na};

/// The d x d associative memory. Entries are validated to be finite.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    entries: Array2<f64>,
}

impl WeightMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            entries: Array2::zeros((dim, dim)),
        }
    }

    pub fn from_entries(entries: Array2<f64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::InvalidArgument(format!(
                "weight matrix must be square, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "weight matrix entries".into(),
            });
        }
        Ok(Self { entries })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> Array2<f64> {
        self.entries
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|&x| x == 0.0)
    }
}

/// Logits and per-row log partition for a block of inputs.
#[derive(Debug, Clone)]
pub struct ScoreBlock {
    pub input_items: Vec<usize>,
    /// `|block| x N`; row `r` holds `u_j^T W v_{i_r}` for all `j`.
    pub logits: Array2<f64>,
    /// `log sum_j exp(logit)` per row, computed with max subtraction.
    pub log_partition: Vec<f64>,
}

impl ScoreBlock {
    /// Softmax score of output `j` for block row `r`.
    pub fn score(&self, row: usize, j: usize) -> f64 {
        (self.logits[[row, j]] - self.log_partition[row]).exp()
    }

    pub fn scores_row(&self, row: usize) -> Array1<f64> {
        let lse = self.log_partition[row];
        self.logits.row(row).mapv(|l| (l - lse).exp())
    }
}

fn check_compat(w: &WeightMatrix, emb: &EmbeddingSet) -> Result<()> {
    if w.dim() != emb.dim() {
        return Err(Error::InvalidArgument(format!(
            "weight matrix dim {} does not match embedding dim {}",
            w.dim(),
            emb.dim()
        )));
    }
    Ok(())
}

fn check_weights(emb: &EmbeddingSet, weights: &MinibatchWeights) -> Result<()> {
    if weights.n_items() != emb.n_items() {
        return Err(Error::InvalidArgument(format!(
            "weights cover {} items but the embedding set has {}",
            weights.n_items(),
            emb.n_items()
        )));
    }
    Ok(())
}

fn resolve_support(emb: &EmbeddingSet, eval_support: Option<usize>) -> Result<usize> {
    match eval_support {
        None => Ok(emb.n_items()),
        Some(bound) => {
            if bound > emb.n_items() {
                Err(Error::InvalidArgument(format!(
                    "eval_support {bound} exceeds n_items {}",
                    emb.n_items()
                )))
            } else {
                Ok(bound)
            }
        }
    }
}

/// Softmax logits for a block of input items.
pub fn scores(w: &WeightMatrix, emb: &EmbeddingSet, inputs: &[usize]) -> Result<ScoreBlock> {
    check_compat(w, emb)?;
    for &i in inputs {
        emb.check_item(i)?;
    }
    let utw = kernel::u_t_w(emb, w.entries());
    let logits = kernel::logit_rows_items(emb, &utw, inputs);
    let log_partition = logits
        .rows()
        .into_iter()
        .map(|r| kernel::log_sum_exp(r.as_slice().expect("row-major")))
        .collect();
    Ok(ScoreBlock {
        input_items: inputs.to_vec(),
        logits,
        log_partition,
    })
}

/// Cross-entropy loss with an optional truncation of the input sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Input weight excluded by the truncation (zero when untruncated).
    pub omitted_mass: f64,
}

/// Cross-entropy loss. With `eval_support = Some(k)` only inputs `i < k`
/// enter the sum and the omitted tail mass is reported alongside; softmax
/// denominators always run over all `N` outputs.
pub fn loss(
    w: &WeightMatrix,
    emb: &EmbeddingSet,
    weights: &MinibatchWeights,
    eval_support: Option<usize>,
) -> Result<LossValue> {
    check_compat(w, emb)?;
    check_weights(emb, weights)?;
    let support = resolve_support(emb, eval_support)?;
    let omitted_mass = weights.tail_mass(support);

    if w.is_zero() {
        // Uniform softmax: every included input contributes q_i * ln N.
        let included = 1.0 - omitted_mass;
        return Ok(LossValue {
            value: (emb.n_items() as f64).ln() * included,
            omitted_mass,
        });
    }

    let value = if let Some(probs) = weights.dense() {
        kernel::population_eval(
            w.entries(),
            emb,
            probs,
            kernel::EvalRequest {
                gradient: false,
                grad_support: support,
                capacity_bound: 0,
                loss: true,
            },
        )
        .loss_value
    } else {
        let pairs: Vec<(usize, f64)> = weights.iter().collect();
        kernel::sparse_eval(w.entries(), emb, &pairs, support, false, true).1
    };
    Ok(LossValue {
        value,
        omitted_mass,
    })
}

/// Negative gradient `G` of the loss at `W`.
pub fn gradient(
    w: &WeightMatrix,
    emb: &EmbeddingSet,
    weights: &MinibatchWeights,
) -> Result<Array2<f64>> {
    gradient_truncated(w, emb, weights, None)
}

/// Negative gradient with the input sum truncated to `i < eval_support`.
pub fn gradient_truncated(
    w: &WeightMatrix,
    emb: &EmbeddingSet,
    weights: &MinibatchWeights,
    eval_support: Option<usize>,
) -> Result<Array2<f64>> {
    check_compat(w, emb)?;
    check_weights(emb, weights)?;
    let support = resolve_support(emb, eval_support)?;

    if w.is_zero() {
        return Ok(kernel::zero_weight_gradient(emb, weights.iter(), support));
    }
    if let Some(probs) = weights.dense() {
        let out = kernel::population_eval(
            w.entries(),
            emb,
            probs,
            kernel::EvalRequest {
                gradient: true,
                grad_support: support,
                capacity_bound: 0,
                loss: false,
            },
        );
        Ok(out.gradient.expect("gradient requested"))
    } else {
        let pairs: Vec<(usize, f64)> = weights.iter().collect();
        let (g, _) = kernel::sparse_eval(w.entries(), emb, &pairs, support, true, false);
        Ok(g.expect("gradient requested"))
    }
}

/// Deflated gradient `sum_{i >= threshold} q_i u_i v_i^T`: the rank-one sum
/// with the top `threshold` items removed and no softmax term.
pub fn deflated_gradient(
    emb: &EmbeddingSet,
    weights: &MinibatchWeights,
    threshold: usize,
) -> Result<Array2<f64>> {
    check_weights(emb, weights)?;
    if threshold > emb.n_items() {
        return Err(Error::InvalidArgument(format!(
            "deflation threshold {threshold} exceeds n_items {}",
            emb.n_items()
        )));
    }
    let pairs: Vec<(usize, f64)> = weights.iter().filter(|&(i, _)| i >= threshold).collect();
    Ok(kernel::weighted_outer_sum(
        emb.u_rows(),
        emb.v_rows(),
        &pairs,
    ))
}

/// Kronecker factors of the Hessian at zero initialization.
#[derive(Debug, Clone)]
pub struct HessianFactors {
    /// `(1/N) sum_i u_i u_i^T - u_bar u_bar^T` (unweighted).
    pub sigma_u: Array2<f64>,
    /// `sum_i q_i v_i v_i^T`.
    pub m_v: Array2<f64>,
    /// Ridge added to both factors when inverting.
    pub ridge: f64,
}

/// Build the Hessian factors at `W = 0`.
pub fn hessian_factors(
    emb: &EmbeddingSet,
    weights: &MinibatchWeights,
    ridge: f64,
) -> Result<HessianFactors> {
    check_weights(emb, weights)?;
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "ridge must be a nonnegative real, got {ridge}"
        )));
    }
    let n = emb.n_items() as f64;
    let uniform: Vec<(usize, f64)> = (0..emb.n_items()).map(|i| (i, 1.0 / n)).collect();
    let mut sigma_u = kernel::weighted_outer_sum(emb.u_rows(), emb.u_rows(), &uniform);
    let u_bar = emb.u_mean();
    let d = emb.dim();
    for i in 0..d {
        for j in 0..d {
            sigma_u[[i, j]] -= u_bar[i] * u_bar[j];
        }
    }
    let pairs: Vec<(usize, f64)> = weights.iter().collect();
    let m_v = kernel::weighted_outer_sum(emb.v_rows(), emb.v_rows(), &pairs);
    Ok(HessianFactors {
        sigma_u: symmetrize(sigma_u),
        m_v: symmetrize(m_v),
        ridge,
    })
}

fn symmetrize(m: Array2<f64>) -> Array2<f64> {
    let t = m.t().to_owned();
    (&m + &t) * 0.5
}

impl HessianFactors {
    pub fn dim(&self) -> usize {
        self.sigma_u.nrows()
    }

    /// `H[D] = Sigma_u D M_v`.
    pub fn apply(&self, delta: &Array2<f64>) -> Array2<f64> {
        self.sigma_u.dot(delta).dot(&self.m_v)
    }

    /// `(Sigma_u + ridge I)^{-1} G (M_v + ridge I)^{-1}` via symmetric solves.
    pub fn inverse_apply(&self, g: &Array2<f64>) -> Result<Array2<f64>> {
        let chol_u = ridged_cholesky(&self.sigma_u, self.ridge, "sigma_u")?;
        let chol_v = ridged_cholesky(&self.m_v, self.ridge, "m_v")?;
        let left = chol_u.solve(&to_na(g.view()));
        let right_t = chol_v.solve(&left.transpose());
        Ok(from_na(&right_t.transpose()))
    }
}

fn ridged_cholesky(
    m: &Array2<f64>,
    ridge: f64,
    context: &'static str,
) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let d = m.nrows();
    let mut na: DMatrix<f64> = to_na(m.view());
    for i in 0..d {
        na[(i, i)] += ridge;
    }
    let min_diag = (0..d).map(|i| na[(i, i)]).fold(f64::INFINITY, f64::min);
    Cholesky::new(na).ok_or(Error::SingularFactor {
        context,
        ridge,
        min_diag,
    })
}
