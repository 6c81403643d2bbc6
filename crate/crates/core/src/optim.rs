//! Update rules (SGD, Muon variants, Kronecker-factored Newton), the
//! theory-derived schedules, and the trajectory runner.
//!
//! All trajectories start at `W_0 = 0` and apply
//!
//! ```text
//! sgd:     W + eta * G
//! muon:    W + eta * polar(G)            (exact)
//!          W + eta * h_lambda(G)         (stabilized)
//!          W + eta * NS_k(G)             (Newton-Schulz)
//! newton:  eta * (Sigma_u + r I)^{-1} G (M_v + r I)^{-1}   (step 0 only)
//! ```
//!
//! where `G` is the negative gradient of the cross-entropy loss on a fresh
//! minibatch (sampled with replacement) or on the population.

use ndarray::Array2;

use crate::capacity::{self, CapacityReport};
use crate::dist::{BatchSize, EmbeddingSet, FrequencyDistribution, MinibatchWeights};
use crate::error::{Error, Result};
use crate::kernel;
use crate::objective::{self, HessianFactors, LossValue, WeightMatrix};
use crate::spectral::{h_lambda_apply, newton_schulz_apply, polar, NewtonSchulzSpec};

/// Learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub enum EtaSchedule {
    Constant(f64),
    /// `eta = c * sqrt(d)` at every step.
    SqrtD { c: f64 },
    /// `eta_t = c * d_{t+1}^alpha` along the SGD recovery recursion, so the
    /// first step uses `c * sqrt(d)`.
    GdIncreasing { c: f64 },
    Explicit(Vec<f64>),
}

/// Resolution schedule for the stabilized Muon map.
#[derive(Debug, Clone, PartialEq)]
pub enum LambdaSchedule {
    Zero,
    Constant(f64),
    /// `lambda_t = multiplier * d_{t+1}^(-alpha) * sqrt(d)` along the Muon
    /// recovery thresholds.
    Theory { multiplier: f64 },
    /// Alternative parameterization `multiplier * d_t^(1/2-alpha) * d^(-1/2) * ln d`
    /// for `t >= 1`, falling back to the `Theory` value at `t = 0`.
    TheoryAppendix { multiplier: f64 },
}

/// Which gradient drives the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    /// Exact softmax gradient.
    Exact,
    /// Deflated rank-one sum with the top `d_t` items removed, thresholds
    /// taken from the theory schedules.
    Deflated,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    MuonExact,
    MuonStabilized,
    MuonNewtonSchulz(NewtonSchulzSpec),
    Newton { ridge: f64 },
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::MuonExact => "muon-exact",
            OptimizerKind::MuonStabilized => "muon-stabilized",
            OptimizerKind::MuonNewtonSchulz(_) => "muon-ns",
            OptimizerKind::Newton { .. } => "newton",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub eta: EtaSchedule,
    pub lambda: LambdaSchedule,
    pub gradient_mode: GradientMode,
}

impl OptimizerSpec {
    pub fn new(kind: OptimizerKind, eta: EtaSchedule) -> Self {
        Self {
            kind,
            eta,
            lambda: LambdaSchedule::Zero,
            gradient_mode: GradientMode::Exact,
        }
    }

    pub fn with_lambda(mut self, lambda: LambdaSchedule) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_gradient_mode(mut self, mode: GradientMode) -> Self {
        self.gradient_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            OptimizerKind::Newton { ridge } => {
                if !(*ridge >= 0.0) || !ridge.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "newton ridge must be a nonnegative real, got {ridge}"
                    )));
                }
            }
            OptimizerKind::MuonStabilized => {}
            _ => {
                if self.lambda != LambdaSchedule::Zero {
                    return Err(Error::InvalidArgument(format!(
                        "a lambda schedule is only meaningful for muon-stabilized, not {}",
                        self.kind.name()
                    )));
                }
            }
        }
        match &self.eta {
            EtaSchedule::Constant(e) => {
                if !(*e > 0.0) || !e.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "constant eta must be positive, got {e}"
                    )));
                }
            }
            EtaSchedule::SqrtD { c } | EtaSchedule::GdIncreasing { c } => {
                if !(*c > 0.0) || !c.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "eta multiplier must be positive, got {c}"
                    )));
                }
            }
            EtaSchedule::Explicit(values) => {
                if values.is_empty() || values.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
                    return Err(Error::InvalidArgument(
                        "explicit eta schedule must be a nonempty list of positive reals".into(),
                    ));
                }
            }
        }
        match &self.lambda {
            LambdaSchedule::Constant(l) => {
                if !(*l >= 0.0) || !l.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "constant lambda must be nonnegative, got {l}"
                    )));
                }
            }
            LambdaSchedule::Theory { multiplier }
            | LambdaSchedule::TheoryAppendix { multiplier } => {
                if !(*multiplier > 0.0) || !multiplier.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "lambda multiplier must be positive, got {multiplier}"
                    )));
                }
            }
            LambdaSchedule::Zero => {}
        }
        Ok(())
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "eta must be a positive real, got {eta}"
        )));
    }
    Ok(())
}

/// `W + eta * G`.
pub fn sgd_step(w: &WeightMatrix, g: &Array2<f64>, eta: f64) -> Result<WeightMatrix> {
    check_eta(eta)?;
    WeightMatrix::from_entries(w.entries() + &(g * eta))
}

/// Muon update flavor.
#[derive(Debug, Clone, Copy)]
pub enum MuonVariant<'a> {
    Exact,
    Stabilized { lambda: f64 },
    NewtonSchulz(&'a NewtonSchulzSpec),
}

/// `W + eta * h(G)` with `h` the polar map, the stabilized map, or a
/// Newton-Schulz approximation.
pub fn muon_step(
    w: &WeightMatrix,
    g: &Array2<f64>,
    eta: f64,
    variant: MuonVariant<'_>,
) -> Result<WeightMatrix> {
    check_eta(eta)?;
    let direction = match variant {
        MuonVariant::Exact => polar(g)?,
        MuonVariant::Stabilized { lambda } => h_lambda_apply(g, lambda)?,
        MuonVariant::NewtonSchulz(spec) => newton_schulz_apply(g, spec)?,
    };
    WeightMatrix::from_entries(w.entries() + &(direction * eta))
}

/// One-step Newton update from zero initialization:
/// `eta * (Sigma_u + r I)^{-1} G (M_v + r I)^{-1}`.
pub fn newton_step(
    w: &WeightMatrix,
    g: &Array2<f64>,
    factors: &HessianFactors,
    eta: f64,
) -> Result<WeightMatrix> {
    check_eta(eta)?;
    if !w.is_zero() {
        let norm = w.entries().iter().map(|x| x.abs()).fold(0.0, f64::max);
        return Err(Error::NonZeroInit { norm });
    }
    WeightMatrix::from_entries(factors.inverse_apply(g)? * eta)
}

/// The multi-step Muon schedule with all constants set to 1 and log factors
/// dropped:
///
/// ```text
/// d_t      = min( d^(2 - (1 - 1/(2 alpha))^t), B^(1/alpha) )   clamped to [1, N]
/// lambda_t = d_{t+1}^(-alpha) * sqrt(d)
/// eta      = sqrt(d)
/// ```
#[derive(Debug, Clone)]
pub struct TheorySchedules {
    /// Recovery thresholds `d_0 = 0, d_1, ..., d_T` (real-valued, clamped to `[1, N]`).
    pub d_seq: Vec<f64>,
    /// `lambda_0, ..., lambda_{T-1}`.
    pub lambdas: Vec<f64>,
    /// Constant learning rate `sqrt(d)`.
    pub eta: f64,
}

impl TheorySchedules {
    /// Deflation thresholds as item counts.
    pub fn thresholds(&self) -> Vec<usize> {
        self.d_seq.iter().map(|&x| x.round() as usize).collect()
    }
}

pub fn theory_schedules(
    d: usize,
    alpha: f64,
    batch: BatchSize,
    t_steps: usize,
    n_items: usize,
) -> Result<TheorySchedules> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "theory schedules require d >= 2, got {d}"
        )));
    }
    if t_steps == 0 {
        return Err(Error::InvalidArgument(
            "theory schedules require T >= 1".into(),
        ));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "alpha must be a positive real, got {alpha}"
        )));
    }
    let df = d as f64;
    let rate = 1.0 - 1.0 / (2.0 * alpha);
    let batch_cap = match batch {
        BatchSize::Finite(b) => (b as f64).powf(1.0 / alpha),
        BatchSize::Population => f64::INFINITY,
    };
    let mut d_seq = Vec::with_capacity(t_steps + 1);
    d_seq.push(0.0);
    for t in 1..=t_steps {
        let exponent = 2.0 - rate.powi(t as i32);
        let raw = df.powf(exponent).min(batch_cap);
        d_seq.push(raw.clamp(1.0, n_items as f64));
    }
    let lambdas = (0..t_steps)
        .map(|t| d_seq[t + 1].powf(-alpha) * df.sqrt())
        .collect();
    Ok(TheorySchedules {
        d_seq,
        lambdas,
        eta: df.sqrt(),
    })
}

/// Increasing learning-rate schedule `eta_t = c * d_{t+1}^alpha` along the
/// SGD recovery recursion `d_0 = 1`,
/// `d_{t+1} = d^(1/(2 alpha)) d_t` below `d` and
/// `d_{t+1} = d^(1/alpha) d_t^(1 - 1/(2 alpha))` above, capped at `N`.
pub fn gd_schedule(
    d: usize,
    alpha: f64,
    t_steps: usize,
    c: f64,
    n_items: usize,
) -> Result<Vec<f64>> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "gd schedule requires d >= 2, got {d}"
        )));
    }
    if !(alpha > 0.0) || !alpha.is_finite() || !(c > 0.0) || !c.is_finite() {
        return Err(Error::InvalidArgument(
            "gd schedule requires positive alpha and c".into(),
        ));
    }
    let df = d as f64;
    let mut etas = Vec::with_capacity(t_steps);
    let mut d_cur = 1.0f64;
    for _ in 0..t_steps {
        let d_next = if d_cur < df {
            df.powf(1.0 / (2.0 * alpha)) * d_cur
        } else {
            df.powf(1.0 / alpha) * d_cur.powf(1.0 - 1.0 / (2.0 * alpha))
        };
        let d_next = d_next.min(n_items as f64);
        etas.push(c * d_next.powf(alpha));
        d_cur = d_next;
    }
    Ok(etas)
}

/// How many leading items a capacity scan should check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapacityBound {
    /// `min(N, ceil(mult * d^(1 + 1/(2 alpha))))` for one-step runs and
    /// `min(N, ceil(mult * d_t * ceil(log2 d)))` along the theory thresholds
    /// for multi-step runs.
    Auto,
    /// Scan all `N` items.
    CheckAll,
    Fixed(usize),
}

/// Early-stopping rule on the recovered count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStop {
    /// Number of steps between the two compared capacity readings.
    pub window: usize,
    /// Stop when the relative improvement over the window drops below this.
    pub min_rel_improvement: f64,
}

/// Per-step evaluation options for a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub capacity: CapacityBound,
    pub i_max_multiplier: f64,
    pub record_loss: bool,
    /// Truncate the gradient/loss input sums to the top `k` items.
    pub eval_support: Option<usize>,
    pub early_stop: Option<EarlyStop>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            capacity: CapacityBound::Auto,
            i_max_multiplier: 8.0,
            record_loss: false,
            eval_support: None,
            early_stop: None,
        }
    }
}

/// One-step default scan bound `min(N, ceil(mult * d^(1 + 1/(2 alpha))))`.
pub fn one_step_capacity_bound(d: usize, alpha: f64, n_items: usize, mult: f64) -> usize {
    let raw = (mult * (d as f64).powf(1.0 + 1.0 / (2.0 * alpha))).ceil() as usize;
    raw.clamp(1, n_items)
}

/// Multi-step default scan bound along the theory thresholds with a log2
/// guard factor.
pub fn multi_step_capacity_bound(
    d: usize,
    alpha: f64,
    step: usize,
    n_items: usize,
    mult: f64,
) -> usize {
    if step == 0 {
        return one_step_capacity_bound(d, alpha, n_items, mult);
    }
    let rate = 1.0 - 1.0 / (2.0 * alpha);
    let exponent = 2.0 - rate.powi(step as i32);
    let guard = (d as f64).log2().ceil().max(1.0);
    let raw = (mult * (d as f64).powf(exponent) * guard).ceil() as usize;
    raw.clamp(1, n_items)
}

/// Metrics recorded after `step` updates.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub weight_frobenius: f64,
    /// Frobenius norm of the gradient used to leave this step (absent on the
    /// final record).
    pub grad_frobenius: Option<f64>,
    pub eta: Option<f64>,
    pub lambda: Option<f64>,
    pub loss: Option<LossValue>,
    pub capacity: Option<CapacityReport>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub steps: Vec<StepRecord>,
    pub final_weights: WeightMatrix,
    pub stopped_early: bool,
}

impl TrajectoryRecord {
    pub fn last_capacity(&self) -> Option<&CapacityReport> {
        self.steps.last().and_then(|s| s.capacity.as_ref())
    }
}

/// Deterministic per-step seed derivation (splitmix64 over the step index).
fn derive_seed(seed: u64, step: usize) -> u64 {
    let mut z = seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct ResolvedSchedules {
    etas: Vec<f64>,
    lambdas: Vec<f64>,
    deflation: Vec<usize>,
}

fn resolve_schedules(
    spec: &OptimizerSpec,
    d: usize,
    alpha: f64,
    batch: BatchSize,
    t_steps: usize,
    n_items: usize,
) -> Result<ResolvedSchedules> {
    let etas = match &spec.eta {
        EtaSchedule::Constant(e) => vec![*e; t_steps],
        EtaSchedule::SqrtD { c } => vec![c * (d as f64).sqrt(); t_steps],
        EtaSchedule::GdIncreasing { c } => {
            if t_steps > 0 {
                gd_schedule(d, alpha, t_steps, *c, n_items)?
            } else {
                Vec::new()
            }
        }
        EtaSchedule::Explicit(values) => {
            if values.len() < t_steps {
                return Err(Error::InvalidArgument(format!(
                    "explicit eta schedule has {} entries but the run needs {t_steps}",
                    values.len()
                )));
            }
            values[..t_steps].to_vec()
        }
    };
    let theory = if t_steps > 0 {
        Some(theory_schedules(d, alpha, batch, t_steps, n_items)?)
    } else {
        None
    };
    let lambdas = match &spec.lambda {
        LambdaSchedule::Zero => vec![0.0; t_steps],
        LambdaSchedule::Constant(l) => vec![*l; t_steps],
        LambdaSchedule::Theory { multiplier } => theory
            .as_ref()
            .map(|ts| ts.lambdas.iter().map(|l| l * multiplier).collect())
            .unwrap_or_default(),
        LambdaSchedule::TheoryAppendix { multiplier } => theory
            .as_ref()
            .map(|ts| {
                (0..t_steps)
                    .map(|t| {
                        if t == 0 {
                            ts.lambdas[0] * multiplier
                        } else {
                            multiplier
                                * ts.d_seq[t].powf(0.5 - alpha)
                                * (d as f64).powf(-0.5)
                                * (d as f64).ln()
                        }
                    })
                    .collect()
            })
            .unwrap_or_default(),
    };
    let deflation = match spec.gradient_mode {
        GradientMode::Exact => vec![0; t_steps],
        GradientMode::Deflated => theory
            .as_ref()
            .map(|ts| ts.thresholds()[..t_steps].to_vec())
            .unwrap_or_default(),
    };
    Ok(ResolvedSchedules {
        etas,
        lambdas,
        deflation,
    })
}

/// Run a seeded optimization trajectory from `W_0 = 0`, recording the
/// requested metrics after every step. Deterministic given its inputs.
pub fn run_trajectory(
    emb: &EmbeddingSet,
    dist: &FrequencyDistribution,
    spec: &OptimizerSpec,
    t_steps: usize,
    batch: BatchSize,
    seed: u64,
    eval: &EvalOptions,
) -> Result<TrajectoryRecord> {
    spec.validate()?;
    if emb.n_items() != dist.n_items() {
        return Err(Error::InvalidArgument(format!(
            "embedding set has {} items but the distribution has {}",
            emb.n_items(),
            dist.n_items()
        )));
    }
    if let BatchSize::Finite(0) = batch {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let d = emb.dim();
    let n = emb.n_items();
    let alpha = dist.alpha();
    let schedules = resolve_schedules(spec, d, alpha, batch, t_steps, n)?;
    let grad_support = eval.eval_support.unwrap_or(n).min(n);

    let population = MinibatchWeights::population(dist);
    let mut w = WeightMatrix::zeros(d);
    let mut steps: Vec<StepRecord> = Vec::with_capacity(t_steps + 1);
    let mut newton_factors: Option<HessianFactors> = None;
    let mut stopped_early = false;

    let at_step = |e: Error, step: usize| Error::Trajectory {
        step,
        source: Box::new(e),
    };

    for t in 0..=t_steps {
        let is_last = t == t_steps;
        let bound = match eval.capacity {
            CapacityBound::CheckAll => n,
            CapacityBound::Fixed(m) => m.clamp(1, n),
            CapacityBound::Auto => {
                if t_steps <= 1 {
                    one_step_capacity_bound(d, alpha, n, eval.i_max_multiplier)
                } else {
                    multi_step_capacity_bound(d, alpha, t, n, eval.i_max_multiplier)
                }
            }
        };

        let weights = if is_last {
            None
        } else {
            Some(match batch {
                BatchSize::Population => population.clone(),
                BatchSize::Finite(b) => {
                    MinibatchWeights::sample(dist, b, derive_seed(seed, t))
                        .map_err(|e| at_step(e, t))?
                }
            })
        };

        // Evaluate capacity / loss at W_t and the gradient G_t in one
        // blockwise sweep where the paths coincide.
        let capacity_report: Option<CapacityReport>;
        let mut loss_value: Option<LossValue> = None;
        let mut grad: Option<Array2<f64>> = None;

        let need_gradient = !is_last;
        let deflation_threshold = if need_gradient && spec.gradient_mode == GradientMode::Deflated
        {
            Some(schedules.deflation[t])
        } else {
            None
        };

        if w.is_zero() {
            capacity_report = Some(CapacityReport::all_ties(bound, n));
            if eval.record_loss {
                loss_value = Some(
                    objective::loss(&w, emb, &population, eval.eval_support)
                        .map_err(|e| at_step(e, t))?,
                );
            }
        } else {
            let fused = batch.is_population()
                && deflation_threshold.is_none()
                && (need_gradient || eval.record_loss);
            if fused {
                let out = kernel::population_eval(
                    w.entries(),
                    emb,
                    population.dense().expect("population weights are dense"),
                    kernel::EvalRequest {
                        gradient: need_gradient,
                        grad_support,
                        capacity_bound: bound,
                        loss: eval.record_loss,
                    },
                );
                capacity_report = out
                    .capacity
                    .map(|acc| CapacityReport::from_accum(acc, n));
                if eval.record_loss {
                    loss_value = Some(LossValue {
                        value: out.loss_value,
                        omitted_mass: population.tail_mass(grad_support),
                    });
                }
                grad = out.gradient;
            } else {
                capacity_report =
                    Some(capacity::capacity(&w, emb, bound).map_err(|e| at_step(e, t))?);
                if eval.record_loss {
                    loss_value = Some(
                        objective::loss(&w, emb, &population, eval.eval_support)
                            .map_err(|e| at_step(e, t))?,
                    );
                }
            }
        }

        if need_gradient && grad.is_none() {
            let weights_t = weights.as_ref().expect("weights exist on non-final steps");
            let g = match deflation_threshold {
                Some(threshold) => objective::deflated_gradient(emb, weights_t, threshold)
                    .map_err(|e| at_step(e, t))?,
                None => objective::gradient_truncated(&w, emb, weights_t, eval.eval_support)
                    .map_err(|e| at_step(e, t))?,
            };
            grad = Some(g);
        }

        let grad_frobenius = grad
            .as_ref()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt());
        steps.push(StepRecord {
            step: t,
            weight_frobenius: w.frobenius_norm(),
            grad_frobenius,
            eta: (!is_last).then(|| schedules.etas[t]),
            lambda: (!is_last).then(|| schedules.lambdas[t]),
            loss: loss_value,
            capacity: capacity_report,
        });

        if is_last {
            break;
        }

        if let Some(rule) = &eval.early_stop {
            if t >= rule.window {
                let now = steps[t].capacity.as_ref().map(|c| c.recovered_count);
                let then = steps[t - rule.window]
                    .capacity
                    .as_ref()
                    .map(|c| c.recovered_count);
                if let (Some(now), Some(then)) = (now, then) {
                    let improvement = (now as f64 - then as f64) / (then as f64).max(1.0);
                    if improvement < rule.min_rel_improvement {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }

        let g = grad.as_ref().expect("gradient computed for non-final step");
        let weights_t = weights.as_ref().expect("weights exist on non-final steps");
        w = match &spec.kind {
            OptimizerKind::Sgd => sgd_step(&w, g, schedules.etas[t]),
            OptimizerKind::MuonExact => muon_step(&w, g, schedules.etas[t], MuonVariant::Exact),
            OptimizerKind::MuonStabilized => muon_step(
                &w,
                g,
                schedules.etas[t],
                MuonVariant::Stabilized {
                    lambda: schedules.lambdas[t],
                },
            ),
            OptimizerKind::MuonNewtonSchulz(ns) => {
                muon_step(&w, g, schedules.etas[t], MuonVariant::NewtonSchulz(ns))
            }
            OptimizerKind::Newton { ridge } => {
                if newton_factors.is_none() {
                    newton_factors = Some(
                        objective::hessian_factors(emb, weights_t, *ridge)
                            .map_err(|e| at_step(e, t))?,
                    );
                }
                newton_step(
                    &w,
                    g,
                    newton_factors.as_ref().expect("factors just built"),
                    schedules.etas[t],
                )
            }
        }
        .map_err(|e| at_step(e, t))?;
    }

    Ok(TrajectoryRecord {
        steps,
        final_weights: w,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::CovarianceSpec;
    use crate::testutil::{random_matrix, random_orthogonal};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn instance(d: usize, n: usize, alpha: f64, seed: u64) -> (EmbeddingSet, FrequencyDistribution) {
        let emb = EmbeddingSet::sample(
            d,
            n,
            CovarianceSpec::Isotropic,
            CovarianceSpec::Isotropic,
            seed,
        )
        .unwrap();
        let dist = FrequencyDistribution::power_law(n, alpha).unwrap();
        (emb, dist)
    }

    #[test]
    fn sgd_step_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_matrix(4, &mut rng);
        let w0 = WeightMatrix::zeros(4);
        let w1 = sgd_step(&w0, &g, 1.0).unwrap();
        assert_eq!(w1.entries(), &g);
        assert!(sgd_step(&w0, &g, 0.0).is_err());

        let w2 = sgd_step(&w1, &g, 0.5).unwrap();
        let direct = sgd_step(&w0, &g, 1.5).unwrap();
        let diff = (w2.entries() - direct.entries())
            .iter()
            .map(|x| x.abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-15);
    }

    #[test]
    fn muon_step_orthogonal_gradient_is_identity_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_orthogonal(5, &mut rng);
        let w1 = muon_step(&WeightMatrix::zeros(5), &q, 1.0, MuonVariant::Exact).unwrap();
        let diff = (w1.entries() - &q).iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9);
    }

    #[test]
    fn muon_stabilized_limits_to_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Full-rank gradient with singular values bounded away from zero.
        let q1 = random_orthogonal(6, &mut rng);
        let q2 = random_orthogonal(6, &mut rng);
        let mut s = ndarray::Array2::zeros((6, 6));
        for k in 0..6 {
            s[[k, k]] = 0.5 + 0.25 * k as f64;
        }
        let g = q1.dot(&s).dot(&q2.t());
        let w0 = WeightMatrix::zeros(6);
        let exact = muon_step(&w0, &g, 1.0, MuonVariant::Exact).unwrap();
        let stab = muon_step(&w0, &g, 1.0, MuonVariant::Stabilized { lambda: 1e-12 }).unwrap();
        let fro = (exact.entries() - stab.entries())
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        assert!(fro < 1e-6, "distance {fro}");
    }

    #[test]
    fn muon_recovery_set_is_eta_invariant() {
        let (emb, dist) = instance(8, 64, 1.5, 4);
        let pop = MinibatchWeights::population(&dist);
        let g = objective::gradient(&WeightMatrix::zeros(8), &emb, &pop).unwrap();
        let w_a = muon_step(&WeightMatrix::zeros(8), &g, 0.5, MuonVariant::Exact).unwrap();
        let w_b = muon_step(&WeightMatrix::zeros(8), &g, 4.0, MuonVariant::Exact).unwrap();
        for i in 0..64 {
            assert_eq!(
                capacity::is_recovered(&w_a, &emb, i).unwrap().0,
                capacity::is_recovered(&w_b, &emb, i).unwrap().0
            );
        }
    }

    #[test]
    fn newton_step_identity_factors_equals_sgd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_matrix(4, &mut rng);
        let factors = HessianFactors {
            sigma_u: ndarray::Array2::eye(4),
            m_v: ndarray::Array2::eye(4),
            ridge: 0.0,
        };
        let w0 = WeightMatrix::zeros(4);
        let newton = newton_step(&w0, &g, &factors, 0.7).unwrap();
        let sgd = sgd_step(&w0, &g, 0.7).unwrap();
        let diff = (newton.entries() - sgd.entries())
            .iter()
            .map(|x| x.abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn newton_step_rejects_nonzero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_matrix(4, &mut rng);
        let factors = HessianFactors {
            sigma_u: ndarray::Array2::eye(4),
            m_v: ndarray::Array2::eye(4),
            ridge: 0.0,
        };
        let w = WeightMatrix::from_entries(random_matrix(4, &mut rng)).unwrap();
        assert!(matches!(
            newton_step(&w, &g, &factors, 1.0),
            Err(Error::NonZeroInit { .. })
        ));
    }

    #[test]
    fn newton_logits_invariant_under_whitening() {
        // Transforming u -> A u, v -> B v with symmetric invertible A, B
        // leaves every Newton logit unchanged (ridge 0).
        let d = 8;
        let n = 32;
        let (emb, dist) = instance(d, n, 1.5, 7);
        let pop = MinibatchWeights::population(&dist);
        let mut rng = ChaCha8Rng::seed_from_u64(8);

        let spd = |rng: &mut ChaCha8Rng| {
            let q = random_orthogonal(d, rng);
            let mut m = ndarray::Array2::zeros((d, d));
            for k in 0..d {
                m[[k, k]] = 0.5 + 0.2 * k as f64;
            }
            let raw = q.dot(&m).dot(&q.t());
            (&raw + &raw.t()) * 0.5
        };
        let a = spd(&mut rng);
        let b = spd(&mut rng);

        let u_t = emb.u_rows().dot(&a); // rows are u_i^T A = (A u_i)^T
        let v_t = emb.v_rows().dot(&b);
        let emb_t = EmbeddingSet::from_rows(u_t, v_t).unwrap();

        let step = |e: &EmbeddingSet| -> WeightMatrix {
            let g = objective::gradient(&WeightMatrix::zeros(d), e, &pop).unwrap();
            let f = objective::hessian_factors(e, &pop, 0.0).unwrap();
            newton_step(&WeightMatrix::zeros(d), &g, &f, 1.0).unwrap()
        };
        let w_orig = step(&emb);
        let w_trans = step(&emb_t);

        let mut max_err = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let orig = emb.u(j).dot(&w_orig.entries().dot(&emb.v(i)));
                let trans = emb_t.u(j).dot(&w_trans.entries().dot(&emb_t.v(i)));
                max_err = max_err.max((orig - trans).abs());
                scale = scale.max(orig.abs());
            }
        }
        assert!(max_err / scale < 1e-6, "relative logit drift {}", max_err / scale);
    }

    #[test]
    fn theory_schedule_exponents() {
        let ts = theory_schedules(64, 1.5, BatchSize::Population, 4, 1_000_000).unwrap();
        // t = 1: exponent 1 + 1/(2 alpha) = 4/3
        let want1 = 64f64.powf(4.0 / 3.0);
        assert!((ts.d_seq[1] - want1).abs() / want1 < 1e-12);
        // t = 2: exponent 2 - (2/3)^2 = 14/9
        let want2 = 64f64.powf(14.0 / 9.0);
        assert!((ts.d_seq[2] - want2).abs() / want2 < 1e-12);
        // lambda_0 = d_1^(-alpha) sqrt(d) = d^(-alpha)
        let want_l0 = 64f64.powf(-1.5);
        assert!((ts.lambdas[0] - want_l0).abs() / want_l0 < 1e-12);
        assert!((ts.eta - 8.0).abs() < 1e-12);
    }

    #[test]
    fn theory_exponent_sequence_increases_to_two() {
        let alpha = 1.3;
        let rate: f64 = 1.0 - 1.0 / (2.0 * alpha);
        let mut prev = 0.0;
        for t in 1..40 {
            let e = 2.0 - rate.powi(t);
            assert!(e > prev);
            prev = e;
        }
        assert!((prev - 2.0).abs() < 1e-3);
    }

    #[test]
    fn theory_schedule_caps_at_batch_information_limit() {
        let ts = theory_schedules(64, 1.5, BatchSize::Finite(4096), 3, 1_000_000).unwrap();
        let cap = 4096f64.powf(1.0 / 1.5);
        assert!(ts.d_seq[2] <= cap + 1e-9);
        assert!(ts.d_seq[3] <= cap + 1e-9);
    }

    #[test]
    fn gd_schedule_first_threshold() {
        // d_1 = 64^(1/3) = 4, so eta_0 = c * d_1^alpha = c * 8 = c sqrt(d)
        let etas = gd_schedule(64, 1.5, 5, 0.01, 1_000_000).unwrap();
        assert!((etas[0] - 0.01 * 8.0).abs() < 1e-12);
        for w in etas.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn gd_schedule_crossing_count_is_ceil_two_alpha() {
        for (alpha, d) in [(1.5f64, 64usize), (1.25, 256), (2.0, 64)] {
            let t_steps = 16;
            let etas = gd_schedule(d, alpha, t_steps, 1.0, usize::MAX >> 1).unwrap();
            // Reconstruct d_t from eta_{t-1} = d_t^alpha.
            let mut below = 0;
            let mut d_t = 1.0f64;
            for t in 0..t_steps {
                // strict inequality up to powf rounding at the d boundary
                if d_t < d as f64 * (1.0 - 1e-9) {
                    below += 1;
                }
                d_t = etas[t].powf(1.0 / alpha);
            }
            assert_eq!(below, (2.0 * alpha).ceil() as usize, "alpha={alpha} d={d}");
        }
    }

    #[test]
    fn trajectory_zero_steps_records_initial_row_only() {
        let (emb, dist) = instance(6, 32, 1.5, 9);
        let spec = OptimizerSpec::new(OptimizerKind::Sgd, EtaSchedule::Constant(1.0));
        let rec = run_trajectory(
            &emb,
            &dist,
            &spec,
            0,
            BatchSize::Population,
            1,
            &EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(rec.steps.len(), 1);
        assert_eq!(rec.steps[0].step, 0);
        assert_eq!(rec.steps[0].capacity.as_ref().unwrap().recovered_count, 0);
        assert!(rec.final_weights.is_zero());
    }

    #[test]
    fn trajectory_single_sgd_step_composes() {
        let (emb, dist) = instance(6, 32, 1.5, 10);
        let pop = MinibatchWeights::population(&dist);
        let eta = 0.8;
        let spec = OptimizerSpec::new(OptimizerKind::Sgd, EtaSchedule::Constant(eta));
        let rec = run_trajectory(
            &emb,
            &dist,
            &spec,
            1,
            BatchSize::Population,
            1,
            &EvalOptions::default(),
        )
        .unwrap();
        let g0 = objective::gradient(&WeightMatrix::zeros(6), &emb, &pop).unwrap();
        let want = sgd_step(&WeightMatrix::zeros(6), &g0, eta).unwrap();
        let diff = (rec.final_weights.entries() - want.entries())
            .iter()
            .map(|x| x.abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-14);
        assert_eq!(rec.steps.len(), 2);
    }

    #[test]
    fn trajectory_is_deterministic() {
        let (emb, dist) = instance(6, 64, 1.5, 11);
        let spec = OptimizerSpec::new(OptimizerKind::MuonExact, EtaSchedule::SqrtD { c: 1.0 });
        let run = || {
            run_trajectory(
                &emb,
                &dist,
                &spec,
                3,
                BatchSize::Finite(32),
                99,
                &EvalOptions::default(),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.final_weights.entries(), b.final_weights.entries());
        for (sa, sb) in a.steps.iter().zip(&b.steps) {
            assert_eq!(
                sa.capacity.as_ref().unwrap().recovered_count,
                sb.capacity.as_ref().unwrap().recovered_count
            );
            assert_eq!(sa.grad_frobenius, sb.grad_frobenius);
        }
    }

    #[test]
    fn trajectory_newton_multi_step_reports_contract_violation() {
        let (emb, dist) = instance(4, 16, 1.5, 12);
        let spec = OptimizerSpec::new(
            OptimizerKind::Newton { ridge: 1e-8 },
            EtaSchedule::Constant(1.0),
        );
        let err = run_trajectory(
            &emb,
            &dist,
            &spec,
            2,
            BatchSize::Population,
            1,
            &EvalOptions::default(),
        )
        .unwrap_err();
        match err {
            Error::Trajectory { step, source } => {
                assert_eq!(step, 1);
                assert!(matches!(*source, Error::NonZeroInit { .. }));
            }
            other => panic!("expected trajectory error, got {other}"),
        }
    }

    #[test]
    fn deflated_mode_uses_theory_thresholds() {
        let (emb, dist) = instance(8, 128, 1.5, 13);
        let spec = OptimizerSpec::new(OptimizerKind::MuonExact, EtaSchedule::SqrtD { c: 1.0 })
            .with_gradient_mode(GradientMode::Deflated);
        let rec = run_trajectory(
            &emb,
            &dist,
            &spec,
            2,
            BatchSize::Population,
            1,
            &EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(rec.steps.len(), 3);
        // Step 0 deflates nothing, so G_0 must match the plain rank-one sum.
        let pop = MinibatchWeights::population(&dist);
        let bar = objective::deflated_gradient(&emb, &pop, 0).unwrap();
        let fro = bar.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((rec.steps[0].grad_frobenius.unwrap() - fro).abs() < 1e-12);
    }

    #[test]
    fn lambda_schedule_requires_stabilized_kind() {
        let spec = OptimizerSpec::new(OptimizerKind::MuonExact, EtaSchedule::Constant(1.0))
            .with_lambda(LambdaSchedule::Constant(0.1));
        assert!(spec.validate().is_err());
        let ok = OptimizerSpec::new(OptimizerKind::MuonStabilized, EtaSchedule::Constant(1.0))
            .with_lambda(LambdaSchedule::Theory { multiplier: 1.0 });
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn loss_decreases_after_one_muon_step() {
        let (emb, dist) = instance(32, 2000, 1.5, 14);
        let pop = MinibatchWeights::population(&dist);
        let w0 = WeightMatrix::zeros(32);
        let l0 = objective::loss(&w0, &emb, &pop, None).unwrap().value;
        let g = objective::gradient(&w0, &emb, &pop).unwrap();
        // Small step in the Corollary regime eta ~ sqrt(d) / polylog.
        let eta = 0.05 * 32f64.sqrt();
        let w1 = muon_step(&w0, &g, eta, MuonVariant::Exact).unwrap();
        let l1 = objective::loss(&w1, &emb, &pop, None).unwrap().value;
        assert!(l1 < l0, "loss did not decrease: {l0} -> {l1}");
    }
}
