//! Blockwise logit evaluation shared by the objective and capacity paths.
//!
//! The full `N x N` logit matrix is never materialized. Inputs are processed
//! in blocks of [`BLOCK`] items; for each block the `b x N` logit slab
//! `L[r][j] = u_j^T W v_{i_r}` is produced by two dense products
//! (`UtW = U W`, then `L = V_blk UtW^T`) and consumed row by row. Reductions
//! run in a fixed order (sequential blocks, ascending items), so results are
//! bitwise reproducible for a fixed block size.

use ndarray::{s, Array1, Array2, ArrayView2};

use crate::capacity::TIE_TOLERANCE;
use crate::dist::EmbeddingSet;

pub(crate) const BLOCK: usize = 512;

/// `U W`, shape `n_items x dim`; row `j` is `W^T u_j`.
pub(crate) fn u_t_w(emb: &EmbeddingSet, w: &Array2<f64>) -> Array2<f64> {
    emb.u_rows().dot(w)
}

/// Logit rows for the contiguous item range `[lo, hi)`: entry `(r, j)` is
/// `u_j^T W v_{lo + r}`.
pub(crate) fn logit_rows_range(
    emb: &EmbeddingSet,
    utw: &Array2<f64>,
    lo: usize,
    hi: usize,
) -> Array2<f64> {
    emb.v_rows().slice(s![lo..hi, ..]).dot(&utw.t())
}

/// Logit rows for an arbitrary list of input items.
pub(crate) fn logit_rows_items(
    emb: &EmbeddingSet,
    utw: &Array2<f64>,
    items: &[usize],
) -> Array2<f64> {
    let mut v_blk = Array2::zeros((items.len(), emb.dim()));
    for (r, &i) in items.iter().enumerate() {
        v_blk.row_mut(r).assign(&emb.v(i));
    }
    v_blk.dot(&utw.t())
}

/// Shifted logits below this contribute less than 1e-18 to a softmax sum
/// whose leading term is 1, so their exponentials are skipped.
const EXP_CUTOFF: f64 = -41.45;

/// Log-sum-exp with max subtraction; safe for any finite logits.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &l in row {
        let s = l - max;
        if s >= EXP_CUTOFF {
            sum += s.exp();
        }
    }
    max + sum.ln()
}

/// `q * exp(l - lse)` with the same cutoff as [`log_sum_exp`].
#[inline]
pub(crate) fn scaled_softmax(l: f64, lse: f64, q: f64) -> f64 {
    let s = l - lse;
    if s >= EXP_CUTOFF {
        q * s.exp()
    } else {
        0.0
    }
}

/// Largest logit over competitors `j != i`.
pub(crate) fn best_interaction(row: &[f64], item: usize) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for (j, &l) in row.iter().enumerate() {
        if j != item && l > best {
            best = l;
        }
    }
    best
}

/// Running reduction for a capacity scan.
#[derive(Debug, Clone)]
pub(crate) struct CapAccum {
    pub checked: usize,
    pub recovered: usize,
    pub prefix: usize,
    prefix_intact: bool,
    pub margin_min: f64,
}

impl CapAccum {
    pub(crate) fn new() -> Self {
        Self {
            checked: 0,
            recovered: 0,
            prefix: 0,
            prefix_intact: true,
            margin_min: f64::INFINITY,
        }
    }

    /// Feed the margin of the next item in ascending order.
    pub(crate) fn push(&mut self, margin: f64) {
        self.checked += 1;
        let recovered = margin > TIE_TOLERANCE;
        if recovered {
            self.recovered += 1;
            if self.prefix_intact {
                self.prefix += 1;
            }
            if margin < self.margin_min {
                self.margin_min = margin;
            }
        } else {
            self.prefix_intact = false;
        }
    }

    /// Account for `n` items that tie at margin zero (the all-zero-logits case).
    pub(crate) fn push_ties(&mut self, n: usize) {
        self.checked += n;
        if n > 0 {
            self.prefix_intact = false;
        }
    }
}

/// What a fused evaluation pass should produce.
#[derive(Debug, Clone, Copy)]
pub(crate) struct EvalRequest {
    /// Compute the negative gradient over inputs `[0, grad_support)`.
    pub gradient: bool,
    /// Upper item bound for the gradient/loss input sum.
    pub grad_support: usize,
    /// Scan recovery margins for items `[0, capacity_bound)`; 0 skips the scan.
    pub capacity_bound: usize,
    /// Accumulate the cross-entropy loss over inputs `[0, grad_support)`.
    pub loss: bool,
}

pub(crate) struct EvalOutput {
    pub gradient: Option<Array2<f64>>,
    pub capacity: Option<CapAccum>,
    /// `-sum_i q_i (logit_ii - lse_i)` over the requested support.
    pub loss_value: f64,
}

/// One blockwise sweep over the inputs needed by a population step:
/// gradient, capacity margins, and loss share the same logit slabs.
///
/// `probs` must be the dense weight vector (population mode).
pub(crate) fn population_eval(
    w: &Array2<f64>,
    emb: &EmbeddingSet,
    probs: &[f64],
    req: EvalRequest,
) -> EvalOutput {
    let _n = emb.n_items();
    let d = emb.dim();
    let utw = u_t_w(emb, w);
    let sweep_hi = if req.gradient || req.loss {
        req.grad_support.max(req.capacity_bound)
    } else {
        req.capacity_bound
    };

    let mut grad = req.gradient.then(|| Array2::<f64>::zeros((d, d)));
    let mut cap = (req.capacity_bound > 0).then(CapAccum::new);
    let mut loss_value = 0.0;

    let mut lo = 0;
    while lo < sweep_hi {
        let hi = (lo + BLOCK).min(sweep_hi);
        let mut l_t = logit_rows_range(emb, &utw, lo, hi);

        for (r, mut row) in l_t.rows_mut().into_iter().enumerate() {
            let item = lo + r;
            let row_slice = row.as_slice().expect("row-major block");
            let in_support = item < req.grad_support;

            if let Some(acc) = cap.as_mut() {
                if item < req.capacity_bound {
                    let margin = row_slice[item] - best_interaction(row_slice, item);
                    acc.push(margin);
                }
            }

            if in_support && (req.gradient || req.loss) {
                let lse = log_sum_exp(row_slice);
                let q = probs[item];
                if req.loss {
                    loss_value -= q * (row_slice[item] - lse);
                }
                if req.gradient {
                    // Overwrite the logit row with q_i * softmax probabilities.
                    row.mapv_inplace(|l| scaled_softmax(l, lse, q));
                }
            } else if req.gradient {
                row.fill(0.0);
            }
        }

        if let Some(g) = grad.as_mut() {
            let grad_hi = hi.min(req.grad_support);
            if grad_hi > lo {
                let v_blk = emb.v_rows();
                let v_blk = v_blk.slice(s![lo..hi, ..]);
                // Interaction term: sum_i (sum_j q_i phat_ij u_j) v_i^T.
                let c = l_t.dot(&emb.u_rows());
                *g -= &c.t().dot(&v_blk);
                // Signal term: sum_i q_i u_i v_i^T.
                let mut u_sel = emb.u_rows().slice(s![lo..grad_hi, ..]).to_owned();
                for (r, mut urow) in u_sel.rows_mut().into_iter().enumerate() {
                    urow *= probs[lo + r];
                }
                *g += &u_sel
                    .t()
                    .dot(&emb.v_rows().slice(s![lo..grad_hi, ..]));
            }
        }
        lo = hi;
    }

    EvalOutput {
        gradient: grad,
        capacity: cap,
        loss_value,
    }
}

/// Gradient/loss pass over a sparse support (minibatch mode).
pub(crate) fn sparse_eval(
    w: &Array2<f64>,
    emb: &EmbeddingSet,
    pairs: &[(usize, f64)],
    grad_support: usize,
    want_gradient: bool,
    want_loss: bool,
) -> (Option<Array2<f64>>, f64) {
    let d = emb.dim();
    let utw = u_t_w(emb, w);
    let mut grad = want_gradient.then(|| Array2::<f64>::zeros((d, d)));
    let mut loss_value = 0.0;

    let active: Vec<(usize, f64)> = pairs
        .iter()
        .copied()
        .filter(|&(i, _)| i < grad_support)
        .collect();

    for chunk in active.chunks(BLOCK) {
        let items: Vec<usize> = chunk.iter().map(|&(i, _)| i).collect();
        let mut l_t = logit_rows_items(emb, &utw, &items);
        for (r, mut row) in l_t.rows_mut().into_iter().enumerate() {
            let (item, q) = chunk[r];
            let row_slice = row.as_slice().expect("row-major block");
            let lse = log_sum_exp(row_slice);
            if want_loss {
                loss_value -= q * (row_slice[item] - lse);
            }
            if want_gradient {
                row.mapv_inplace(|l| scaled_softmax(l, lse, q));
            }
        }
        if let Some(g) = grad.as_mut() {
            let mut v_sel = Array2::zeros((chunk.len(), d));
            let mut u_sel = Array2::zeros((chunk.len(), d));
            for (r, &(item, q)) in chunk.iter().enumerate() {
                v_sel.row_mut(r).assign(&emb.v(item));
                let mut urow = u_sel.row_mut(r);
                urow.assign(&emb.u(item));
                urow *= q;
            }
            let c = l_t.dot(&emb.u_rows());
            *g -= &c.t().dot(&v_sel);
            *g += &u_sel.t().dot(&v_sel);
        }
    }
    (grad, loss_value)
}

/// Closed-form negative gradient at zero weights:
/// `G_0 = sum_i q_i (u_i - u_bar) v_i^T`, exact because the softmax is
/// uniform when every logit is zero.
pub(crate) fn zero_weight_gradient(
    emb: &EmbeddingSet,
    pairs: impl Iterator<Item = (usize, f64)>,
    grad_support: usize,
) -> Array2<f64> {
    let d = emb.dim();
    let mut g = Array2::<f64>::zeros((d, d));
    let mut weighted_v = Array1::<f64>::zeros(d);
    let active: Vec<(usize, f64)> = pairs.filter(|&(i, _)| i < grad_support).collect();
    for chunk in active.chunks(4096) {
        let mut u_sel = Array2::zeros((chunk.len(), d));
        let mut v_sel = Array2::zeros((chunk.len(), d));
        for (r, &(item, q)) in chunk.iter().enumerate() {
            v_sel.row_mut(r).assign(&emb.v(item));
            let mut urow = u_sel.row_mut(r);
            urow.assign(&emb.u(item));
            urow *= q;
            weighted_v.scaled_add(q, &emb.v(item));
        }
        g += &u_sel.t().dot(&v_sel);
    }
    let u_bar = emb.u_mean();
    for i in 0..d {
        for j in 0..d {
            g[[i, j]] -= u_bar[i] * weighted_v[j];
        }
    }
    g
}

/// Capacity margins only, for items `[0, bound)`.
pub(crate) fn capacity_scan(w: &Array2<f64>, emb: &EmbeddingSet, bound: usize) -> CapAccum {
    let utw = u_t_w(emb, w);
    let mut acc = CapAccum::new();
    let mut lo = 0;
    while lo < bound {
        let hi = (lo + BLOCK).min(bound);
        let l_t = logit_rows_range(emb, &utw, lo, hi);
        for (r, row) in l_t.rows().into_iter().enumerate() {
            let item = lo + r;
            let row_slice = row.as_slice().expect("row-major block");
            acc.push(row_slice[item] - best_interaction(row_slice, item));
        }
        lo = hi;
    }
    acc
}

/// Weighted scatter `sum_i q_i x_i y_i^T` over selected items.
pub(crate) fn weighted_outer_sum(
    rows_x: ArrayView2<'_, f64>,
    rows_y: ArrayView2<'_, f64>,
    pairs: &[(usize, f64)],
) -> Array2<f64> {
    let d = rows_x.ncols();
    let mut acc = Array2::<f64>::zeros((d, d));
    for chunk in pairs.chunks(4096) {
        let mut x_sel = Array2::zeros((chunk.len(), d));
        let mut y_sel = Array2::zeros((chunk.len(), d));
        for (r, &(item, q)) in chunk.iter().enumerate() {
            let mut xrow = x_sel.row_mut(r);
            xrow.assign(&rows_x.row(item));
            xrow *= q;
            y_sel.row_mut(r).assign(&rows_y.row(item));
        }
        acc += &x_sel.t().dot(&y_sel);
    }
    acc
}
