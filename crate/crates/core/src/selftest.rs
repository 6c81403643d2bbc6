//! Oracle and property suite: every check validates an analytic quantity
//! against an independent route (finite differences, brute-force loops,
//! closed-form identities, sampled inequalities).
//!
//! The checks run in seconds on small instances and back the `selftest`
//! CLI subcommand; the test suite asserts each one passes.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::capacity;
use crate::dist::{CovarianceSpec, EmbeddingSet, FrequencyDistribution, MinibatchWeights};
use crate::objective::{self, WeightMatrix};
use crate::optim::{muon_step, sgd_step, MuonVariant};
use crate::spectral::{
    dk_first_derivative, h_lambda_apply, h_lambda_scalar, operator_norm, polar, signal_slope,
    spectral_map, NewtonSchulzSpec,
};

pub(crate) mod util {
    use super::*;
    use rand_distr::StandardNormal;

    pub(crate) fn random_matrix(d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((d, d), |_| rng.sample::<f64, _>(StandardNormal))
    }

    pub(crate) fn random_vector(d: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
        Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal))
    }

    pub(crate) fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let g = crate::spectral::to_na(random_matrix(d, rng).view());
        crate::spectral::from_na(&g.qr().q())
    }

    pub(crate) fn outer(u: &Array1<f64>, v: &Array1<f64>) -> Array2<f64> {
        let d = u.len();
        Array2::from_shape_fn((d, d), |(i, j)| u[i] * v[j])
    }
}

use util::*;

/// Result of one check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn from_error<T: std::fmt::Display>(name: &'static str, err: T) -> Self {
        Self {
            name,
            passed: false,
            detail: format!("errored: {err}"),
        }
    }
}

/// Run every check with instance randomness derived from `seed`.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    vec![
        check_gradient_finite_difference(seed),
        check_hessian_finite_difference(seed ^ 1),
        check_dk_finite_difference(seed ^ 2),
        check_signal_slope_finite_difference(seed ^ 3),
        check_polar_orthogonality(seed ^ 4),
        check_operator_lipschitz(seed ^ 5),
        check_spectral_equivariance(seed ^ 6),
        check_cubic_newton_schulz(),
        check_recovery_brute_force(seed ^ 7),
        check_eta_argmax_invariance(seed ^ 8),
    ]
}

fn small_instance(d: usize, n: usize, seed: u64) -> (EmbeddingSet, MinibatchWeights) {
    let emb = EmbeddingSet::sample(
        d,
        n,
        CovarianceSpec::Isotropic,
        CovarianceSpec::Isotropic,
        seed,
    )
    .expect("valid dims");
    let dist = FrequencyDistribution::power_law(n, 1.5).expect("valid dist");
    (emb, MinibatchWeights::population(&dist))
}

/// (a) Analytic gradient vs central differences of the loss, d=6, N=10.
pub fn check_gradient_finite_difference(seed: u64) -> CheckOutcome {
    const NAME: &str = "gradient-vs-central-differences";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (emb, pop) = small_instance(6, 10, seed);
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let w = match WeightMatrix::from_entries(random_matrix(6, &mut rng) * 0.4) {
            Ok(w) => w,
            Err(e) => return CheckOutcome::from_error(NAME, e),
        };
        let g = match objective::gradient(&w, &emb, &pop) {
            Ok(g) => g,
            Err(e) => return CheckOutcome::from_error(NAME, e),
        };
        let scale = g.iter().map(|x| x.abs()).fold(0.0, f64::max);
        let t = 1e-5;
        for i in 0..6 {
            for j in 0..6 {
                let mut plus = w.entries().clone();
                plus[[i, j]] += t;
                let mut minus = w.entries().clone();
                minus[[i, j]] -= t;
                let lp = objective::loss(
                    &WeightMatrix::from_entries(plus).expect("finite"),
                    &emb,
                    &pop,
                    None,
                )
                .expect("loss")
                .value;
                let lm = objective::loss(
                    &WeightMatrix::from_entries(minus).expect("finite"),
                    &emb,
                    &pop,
                    None,
                )
                .expect("loss")
                .value;
                let fd = -(lp - lm) / (2.0 * t);
                worst = worst.max((fd - g[[i, j]]).abs() / scale);
            }
        }
    }
    CheckOutcome {
        name: NAME,
        passed: worst <= 1e-5,
        detail: format!("max relative error {worst:.3e} (tolerance 1e-5)"),
    }
}

/// (a) Kronecker-factored Hessian action vs second differences of the loss.
pub fn check_hessian_finite_difference(seed: u64) -> CheckOutcome {
    const NAME: &str = "hessian-apply-vs-central-differences";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (emb, pop) = small_instance(6, 10, seed);
    let factors = match objective::hessian_factors(&emb, &pop, 0.0) {
        Ok(f) => f,
        Err(e) => return CheckOutcome::from_error(NAME, e),
    };
    let zero = WeightMatrix::zeros(6);
    let l0 = objective::loss(&zero, &emb, &pop, None).expect("loss").value;
    let t = 1e-3;
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let delta = random_matrix(6, &mut rng);
        let quad = (&delta * &factors.apply(&delta)).sum();
        let lp = objective::loss(
            &WeightMatrix::from_entries(&delta * t).expect("finite"),
            &emb,
            &pop,
            None,
        )
        .expect("loss")
        .value;
        let lm = objective::loss(
            &WeightMatrix::from_entries(&delta * (-t)).expect("finite"),
            &emb,
            &pop,
            None,
        )
        .expect("loss")
        .value;
        let fd = (lp - 2.0 * l0 + lm) / (t * t);
        worst = worst.max((quad - fd).abs() / quad.abs());
    }
    CheckOutcome {
        name: NAME,
        passed: worst <= 1e-5,
        detail: format!("max relative error {worst:.3e} (tolerance 1e-5)"),
    }
}

/// (b) Daleckii-Krein first derivative vs central differences.
pub fn check_dk_finite_difference(seed: u64) -> CheckOutcome {
    const NAME: &str = "daleckii-krein-vs-central-differences";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 6;
    let q = random_orthogonal(d, &mut rng);
    let eigenvalues: Vec<f64> = (0..d).map(|k| 0.4 + 0.15 * k as f64).collect();
    let mut diag = Array2::zeros((d, d));
    for k in 0..d {
        diag[[k, k]] = eigenvalues[k];
    }
    let m_raw = q.dot(&diag).dot(&q.t());
    let m = (&m_raw + &m_raw.t()) * 0.5;
    let e_raw = random_matrix(d, &mut rng);
    let e = (&e_raw + &e_raw.t()) * 0.5;
    let lam2 = 0.09;
    let f = move |z: f64| 1.0 / (z + lam2).sqrt();
    let fp = move |z: f64| -0.5 / (z + lam2).powf(1.5);

    let analytic = match dk_first_derivative(&m, &e, f, fp) {
        Ok(a) => a,
        Err(err) => return CheckOutcome::from_error(NAME, err),
    };
    let apply = |mat: &Array2<f64>| -> Array2<f64> {
        let eig = crate::spectral::to_na(mat.view()).symmetric_eigen();
        let p = crate::spectral::from_na(&eig.eigenvectors);
        let mut scaled = p.clone();
        for (k, mut col) in scaled.columns_mut().into_iter().enumerate() {
            col *= f(eig.eigenvalues[k]);
        }
        scaled.dot(&p.t())
    };
    let t = 1e-5;
    let fd = (&apply(&(&m + &(&e * t))) - &apply(&(&m - &(&e * t)))) / (2.0 * t);
    let scale = analytic.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let err = (&analytic - &fd)
        .iter()
        .map(|x| x.abs())
        .fold(0.0, f64::max)
        / scale;
    CheckOutcome {
        name: NAME,
        passed: err <= 1e-5,
        detail: format!("max relative error {err:.3e} (tolerance 1e-5)"),
    }
}

/// (b) Closed-form signal slope vs central differences of the spiked logit.
pub fn check_signal_slope_finite_difference(seed: u64) -> CheckOutcome {
    const NAME: &str = "signal-slope-vs-central-differences";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 8;
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let g = random_matrix(d, &mut rng) * 0.3;
        let u = random_vector(d, &mut rng);
        let v = random_vector(d, &mut rng);
        let lambda = 0.5;
        let slope = match signal_slope(&g, u.view(), v.view(), lambda) {
            Ok(s) => s,
            Err(e) => return CheckOutcome::from_error(NAME, e),
        };
        if slope < 0.0 {
            return CheckOutcome {
                name: NAME,
                passed: false,
                detail: format!("negative slope {slope}"),
            };
        }
        let phi = |qv: f64| -> f64 {
            let spiked = &g + &(outer(&u, &v) * qv);
            let h = h_lambda_apply(&spiked, lambda).expect("valid lambda");
            u.dot(&h.dot(&v))
        };
        let t = 1e-5;
        let fd = (phi(t) - phi(-t)) / (2.0 * t);
        worst = worst.max((slope - fd).abs() / fd.abs().max(1e-12));
    }
    CheckOutcome {
        name: NAME,
        passed: worst <= 1e-5,
        detail: format!("max relative error {worst:.3e} (tolerance 1e-5)"),
    }
}

/// (c) Polar factors are orthogonal to 1e-9.
pub fn check_polar_orthogonality(seed: u64) -> CheckOutcome {
    const NAME: &str = "polar-orthogonality";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let m = random_matrix(8, &mut rng);
        let p = match polar(&m) {
            Ok(p) => p,
            Err(e) => return CheckOutcome::from_error(NAME, e),
        };
        let gram = p.t().dot(&p);
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[[i, j]] - want).abs());
            }
        }
    }
    CheckOutcome {
        name: NAME,
        passed: worst <= 1e-9,
        detail: format!("max orthogonality defect {worst:.3e} (tolerance 1e-9)"),
    }
}

/// (d) Sampled operator-Lipschitz bound `|h_l(A)-h_l(B)|_op <= |A-B|_op / l`.
pub fn check_operator_lipschitz(seed: u64) -> CheckOutcome {
    const NAME: &str = "h-lambda-operator-lipschitz";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0usize;
    let mut pairs = 0usize;
    let mut tightest = f64::INFINITY;
    for lambda in [0.1, 1.0] {
        for _ in 0..200 {
            let a = random_matrix(8, &mut rng);
            let b = random_matrix(8, &mut rng);
            let lhs = match (h_lambda_apply(&a, lambda), h_lambda_apply(&b, lambda)) {
                (Ok(ha), Ok(hb)) => operator_norm(&(&ha - &hb)).expect("finite"),
                (Err(e), _) | (_, Err(e)) => return CheckOutcome::from_error(NAME, e),
            };
            let rhs = operator_norm(&(&a - &b)).expect("finite") / lambda;
            pairs += 1;
            tightest = tightest.min(rhs - lhs);
            if lhs > rhs * (1.0 + 1e-9) {
                violations += 1;
            }
        }
    }
    CheckOutcome {
        name: NAME,
        passed: violations == 0,
        detail: format!("{violations} violations over {pairs} pairs (slack min {tightest:.3e})"),
    }
}

/// (e) Bi-orthogonal equivariance of the spectral map to 1e-8.
pub fn check_spectral_equivariance(seed: u64) -> CheckOutcome {
    const NAME: &str = "spectral-map-equivariance";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let m = random_matrix(6, &mut rng);
        let q1 = random_orthogonal(6, &mut rng);
        let q2 = random_orthogonal(6, &mut rng);
        let h = |z: f64| h_lambda_scalar(z, 0.5);
        let lhs = match spectral_map(&q1.dot(&m).dot(&q2.t()), h) {
            Ok(x) => x,
            Err(e) => return CheckOutcome::from_error(NAME, e),
        };
        let rhs = q1
            .dot(&spectral_map(&m, h).expect("h(0)=0"))
            .dot(&q2.t());
        worst = worst.max(
            (&lhs - &rhs)
                .iter()
                .map(|x| x.abs())
                .fold(0.0, f64::max),
        );
    }
    CheckOutcome {
        name: NAME,
        passed: worst <= 1e-8,
        detail: format!("max equivariance defect {worst:.3e} (tolerance 1e-8)"),
    }
}

/// (f) Cubic Newton-Schulz scalar identities and the nonincreasing ratio.
pub fn check_cubic_newton_schulz() -> CheckOutcome {
    const NAME: &str = "cubic-newton-schulz-scalar";
    let one_step = NewtonSchulzSpec::cubic(1).expect("valid spec");
    let fixed = (one_step.scalar_iterate(1.0) - 1.0).abs();
    let zeroed = one_step.scalar_iterate(3f64.sqrt()).abs();
    if fixed > 1e-12 || zeroed > 1e-12 {
        return CheckOutcome {
            name: NAME,
            passed: false,
            detail: format!("h(1)-1 = {fixed:.3e}, h(sqrt 3) = {zeroed:.3e}"),
        };
    }
    for iterations in 1..=8 {
        let spec = NewtonSchulzSpec::cubic(iterations).expect("valid spec");
        let sqrt3 = 3f64.sqrt();
        let mut prev = f64::INFINITY;
        for step in 1..1000 {
            let z = sqrt3 * step as f64 / 1000.0;
            let ratio = spec.scalar_iterate(z) / z;
            if ratio > prev + 1e-9 {
                return CheckOutcome {
                    name: NAME,
                    passed: false,
                    detail: format!("h^({iterations})(z)/z increased at z = {z:.4}"),
                };
            }
            prev = ratio;
        }
    }
    CheckOutcome {
        name: NAME,
        passed: true,
        detail: "fixed points exact; iterate ratio nonincreasing for k <= 8".into(),
    }
}

/// (g) Blocked recovery matches a brute-force double loop, d=4, N=8.
pub fn check_recovery_brute_force(seed: u64) -> CheckOutcome {
    const NAME: &str = "recovery-brute-force-equivalence";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..100 {
        let emb = EmbeddingSet::sample(
            4,
            8,
            CovarianceSpec::Isotropic,
            CovarianceSpec::Isotropic,
            seed.wrapping_add(trial),
        )
        .expect("valid dims");
        let w = WeightMatrix::from_entries(random_matrix(4, &mut rng)).expect("finite");
        let report = capacity::capacity(&w, &emb, 8).expect("valid bound");
        let mut count = 0;
        for i in 0..8 {
            let signal = emb.u(i).dot(&w.entries().dot(&emb.v(i)));
            let mut best = f64::NEG_INFINITY;
            for j in 0..8 {
                if j != i {
                    best = best.max(emb.u(j).dot(&w.entries().dot(&emb.v(i))));
                }
            }
            let brute = signal - best > 1e-12;
            let (fast, _) = capacity::is_recovered(&w, &emb, i).expect("in range");
            if brute != fast {
                return CheckOutcome {
                    name: NAME,
                    passed: false,
                    detail: format!("trial {trial}: item {i} disagrees"),
                };
            }
            if brute {
                count += 1;
            }
        }
        if count != report.recovered_count {
            return CheckOutcome {
                name: NAME,
                passed: false,
                detail: format!("trial {trial}: count {count} vs {}", report.recovered_count),
            };
        }
    }
    CheckOutcome {
        name: NAME,
        passed: true,
        detail: "100 random instances agree with the double loop".into(),
    }
}

/// (h) The recovery set after one step from zero is invariant to eta.
pub fn check_eta_argmax_invariance(seed: u64) -> CheckOutcome {
    const NAME: &str = "one-step-eta-argmax-invariance";
    for trial in 0..50 {
        let emb = EmbeddingSet::sample(
            8,
            48,
            CovarianceSpec::Isotropic,
            CovarianceSpec::Isotropic,
            seed.wrapping_add(trial),
        )
        .expect("valid dims");
        let dist = FrequencyDistribution::power_law(48, 1.5).expect("valid dist");
        let pop = MinibatchWeights::population(&dist);
        let g = objective::gradient(&WeightMatrix::zeros(8), &emb, &pop).expect("gradient");
        let zero = WeightMatrix::zeros(8);
        let steps = [
            muon_step(&zero, &g, 0.5, MuonVariant::Exact).expect("step"),
            muon_step(&zero, &g, 4.0, MuonVariant::Exact).expect("step"),
            sgd_step(&zero, &g, 0.5).expect("step"),
            sgd_step(&zero, &g, 4.0).expect("step"),
        ];
        for i in 0..48 {
            let muon_small = capacity::is_recovered(&steps[0], &emb, i).expect("in range").0;
            let muon_large = capacity::is_recovered(&steps[1], &emb, i).expect("in range").0;
            let sgd_small = capacity::is_recovered(&steps[2], &emb, i).expect("in range").0;
            let sgd_large = capacity::is_recovered(&steps[3], &emb, i).expect("in range").0;
            if muon_small != muon_large || sgd_small != sgd_large {
                return CheckOutcome {
                    name: NAME,
                    passed: false,
                    detail: format!("trial {trial}: item {i} recovery depends on eta"),
                };
            }
        }
    }
    CheckOutcome {
        name: NAME,
        passed: true,
        detail: "recovery sets identical across eta on 50 instances".into(),
    }
}
