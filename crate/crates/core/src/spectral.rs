//! Spectral linear algebra for d x d matrices.
//!
//! Everything here is built on the singular value decomposition. For a
//! matrix `G = U S V^T`:
//!
//! ```text
//! polar(G)      = U V^T
//! h_lambda(G)   = U diag(s / sqrt(s^2 + lambda^2)) V^T
//! spectral h(G) = U diag(h(s)) V^T        for any scalar h with h(0) = 0
//! ```
//!
//! Newton-Schulz iterations approximate the polar factor without an SVD by
//! iterating an odd polynomial `G -> G phi(G^T G)`. The Daleckii-Krein
//! routines compute Frechet derivatives of matrix functions from an
//! eigendecomposition and first/second divided differences; they serve as
//! independent oracles for the perturbation quantities used elsewhere.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Absolute gap below which two eigen/singular values are treated as
/// coincident and the derivative convention is used for divided differences.
const COINCIDENT_GAP: f64 = 1e-9;
/// Threshold below which `s_k + s_l` is treated as zero (both values vanish).
const ZERO_PAIR_GAP: f64 = 1e-12;

pub(crate) fn to_na(m: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_row_iterator(m.nrows(), m.ncols(), m.iter().copied())
}

pub(crate) fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn check_square_finite(m: &Array2<f64>, context: &str) -> Result<usize> {
    let (r, c) = m.dim();
    if r != c {
        return Err(Error::InvalidArgument(format!(
            "{context}: matrix must be square, got {r}x{c}"
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: context.to_string(),
        });
    }
    Ok(r)
}

/// Full SVD `M = left * diag(singulars) * right^T` with singular values
/// sorted in nonincreasing order.
#[derive(Debug, Clone)]
pub struct SvdTriple {
    pub left: Array2<f64>,
    pub singulars: Array1<f64>,
    pub right: Array2<f64>,
}

impl SvdTriple {
    /// Rebuild the original matrix (used by tests and round-trip checks).
    pub fn reconstruct(&self) -> Array2<f64> {
        compose(&self.left, self.singulars.as_slice().unwrap(), &self.right)
    }
}

/// Compute the full SVD of a square matrix.
pub fn svd(m: &Array2<f64>) -> Result<SvdTriple> {
    let d = check_square_finite(m, "svd")?;
    let na = to_na(m.view());
    let svd = na.try_svd(true, true, f64::EPSILON, 10_000).ok_or_else(|| {
        Error::SvdConvergence {
            dim: d,
            detail: "bidiagonal QR iteration hit the iteration cap".into(),
        }
    })?;
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let s = svd.singular_values;

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));

    let mut left = Array2::zeros((d, d));
    let mut right = Array2::zeros((d, d));
    let mut singulars = Array1::zeros(d);
    for (new_k, &old_k) in order.iter().enumerate() {
        singulars[new_k] = s[old_k];
        for i in 0..d {
            left[[i, new_k]] = u[(i, old_k)];
            right[[i, new_k]] = vt[(old_k, i)];
        }
    }
    Ok(SvdTriple {
        left,
        singulars,
        right,
    })
}

/// `left * diag(values) * right^T`.
fn compose(left: &Array2<f64>, values: &[f64], right: &Array2<f64>) -> Array2<f64> {
    let mut scaled = left.clone();
    for (k, mut col) in scaled.columns_mut().into_iter().enumerate() {
        col *= values[k];
    }
    scaled.dot(&right.t())
}

/// Polar factor `U V^T`. Rank-deficient directions contribute whatever
/// orthogonal factors the SVD produced, so the output is always orthogonal.
pub fn polar(m: &Array2<f64>) -> Result<Array2<f64>> {
    let t = svd(m)?;
    Ok(t.left.dot(&t.right.t()))
}

/// Largest singular value.
pub fn operator_norm(m: &Array2<f64>) -> Result<f64> {
    Ok(svd(m)?.singulars[0])
}

/// Scalar stabilized map `z / sqrt(z^2 + lambda^2)`.
pub fn h_lambda_scalar(z: f64, lambda: f64) -> f64 {
    z / (z * z + lambda * lambda).sqrt()
}

/// Derivative of the scalar stabilized map, `lambda^2 / (z^2 + lambda^2)^(3/2)`.
pub fn h_lambda_scalar_deriv(z: f64, lambda: f64) -> f64 {
    let t = z * z + lambda * lambda;
    lambda * lambda / (t * t.sqrt())
}

/// Stabilized polar map `U diag(s_k / sqrt(s_k^2 + lambda^2)) V^T`.
///
/// At `lambda = 0` this routes through the SVD-based polar factor, which is
/// well defined on rank-deficient input.
pub fn h_lambda_apply(m: &Array2<f64>, lambda: f64) -> Result<Array2<f64>> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda must be a nonnegative real, got {lambda}"
        )));
    }
    if lambda == 0.0 {
        return polar(m);
    }
    let t = svd(m)?;
    let mapped: Vec<f64> = t
        .singulars
        .iter()
        .map(|&s| h_lambda_scalar(s, lambda))
        .collect();
    Ok(compose(&t.left, &mapped, &t.right))
}

/// Apply a scalar spectral map `h` with `h(0) = 0` to the singular values.
pub fn spectral_map<F: Fn(f64) -> f64>(m: &Array2<f64>, h: F) -> Result<Array2<f64>> {
    if h(0.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "spectral map requires h(0) = 0, got h(0) = {}",
            h(0.0)
        )));
    }
    let t = svd(m)?;
    let mapped: Vec<f64> = t.singulars.iter().map(|&s| h(s)).collect();
    Ok(compose(&t.left, &mapped, &t.right))
}

/// How to normalize a matrix before Newton-Schulz iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prescale {
    /// Divide by the Frobenius norm; the spectrum lands in (0, 1].
    Frobenius,
    /// Divide by a power-iteration estimate of the largest singular value.
    SpectralEstimate,
    /// Use the matrix as given.
    None,
}

/// An odd-polynomial Newton-Schulz iteration scheme.
///
/// `coefficients[j]` multiplies `z^(2j+1)`, so the classical cubic map
/// `h(z) = (3/2) z - (1/2) z^3` is `[1.5, -0.5]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonSchulzSpec {
    coefficients: Vec<f64>,
    iterations: usize,
    prescale: Prescale,
    /// Open upper end of the interval on which the scalar iterates converge.
    spectrum_bound: f64,
}

impl NewtonSchulzSpec {
    /// The classical cubic map with Frobenius prescaling; converges on (0, sqrt(3)).
    pub fn cubic(iterations: usize) -> Result<Self> {
        Self::with_coefficients(vec![1.5, -0.5], iterations, Prescale::Frobenius, 3f64.sqrt())
    }

    pub fn with_coefficients(
        coefficients: Vec<f64>,
        iterations: usize,
        prescale: Prescale,
        spectrum_bound: f64,
    ) -> Result<Self> {
        if coefficients.is_empty() || coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument(
                "Newton-Schulz coefficients must be a nonempty list of finite reals".into(),
            ));
        }
        if iterations == 0 {
            return Err(Error::InvalidArgument(
                "Newton-Schulz iterations must be at least 1".into(),
            ));
        }
        if !(spectrum_bound > 0.0) {
            return Err(Error::InvalidArgument(
                "Newton-Schulz spectrum bound must be positive".into(),
            ));
        }
        Ok(Self {
            coefficients,
            iterations,
            prescale,
            spectrum_bound,
        })
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn prescale(&self) -> Prescale {
        self.prescale
    }

    pub fn spectrum_bound(&self) -> f64 {
        self.spectrum_bound
    }

    /// One application of the scalar map `h(z) = sum_j c_j z^(2j+1)`.
    pub fn scalar_map(&self, z: f64) -> f64 {
        let z2 = z * z;
        let mut acc = 0.0;
        for &c in self.coefficients.iter().rev() {
            acc = acc * z2 + c;
        }
        acc * z
    }

    /// The `iterations`-fold scalar iterate `h^(k)(z)`.
    pub fn scalar_iterate(&self, z: f64) -> f64 {
        let mut x = z;
        for _ in 0..self.iterations {
            x = self.scalar_map(x);
        }
        x
    }
}

/// Deterministic power-iteration estimate of the largest singular value.
fn estimate_operator_norm(m: &Array2<f64>, iterations: usize) -> f64 {
    let d = m.ncols();
    let mut x = Array1::from_elem(d, 1.0 / (d as f64).sqrt());
    let mut estimate = 0.0;
    for _ in 0..iterations {
        let y = m.dot(&x);
        let z = m.t().dot(&y);
        let norm = z.dot(&z).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        estimate = y.dot(&y).sqrt() / x.dot(&x).sqrt().max(f64::MIN_POSITIVE);
        x = z / norm;
    }
    estimate
}

/// Run `spec.iterations` Newton-Schulz steps `X -> X (c_0 I + c_1 Y + ...)`,
/// `Y = X^T X`, after the configured prescaling.
pub fn newton_schulz_apply(m: &Array2<f64>, spec: &NewtonSchulzSpec) -> Result<Array2<f64>> {
    let d = check_square_finite(m, "newton_schulz_apply")?;
    let mut x = match spec.prescale {
        Prescale::Frobenius => {
            let fro = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            if fro == 0.0 {
                return Ok(m.clone());
            }
            m / fro
        }
        Prescale::SpectralEstimate => {
            let est = estimate_operator_norm(m, 60);
            if est == 0.0 {
                return Ok(m.clone());
            }
            m / (est * 1.001)
        }
        Prescale::None => m.clone(),
    };

    // Frobenius prescaling caps the spectrum at 1, so the check is only
    // needed when that guarantee does not already imply membership.
    if !(spec.prescale == Prescale::Frobenius && spec.spectrum_bound >= 1.0) {
        let s_max = estimate_operator_norm(&x, 60);
        if s_max >= spec.spectrum_bound {
            return Err(Error::NewtonSchulzDomain {
                singular_value: s_max,
                bound: spec.spectrum_bound,
            });
        }
    }

    let eye = Array2::eye(d);
    for _ in 0..spec.iterations {
        let y = x.t().dot(&x);
        let k = spec.coefficients.len();
        let mut poly = &eye * spec.coefficients[k - 1];
        for j in (0..k - 1).rev() {
            poly = poly.dot(&y) + &eye * spec.coefficients[j];
        }
        x = x.dot(&poly);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "newton_schulz_apply iterates".into(),
        });
    }
    Ok(x)
}

/// First divided difference with the coincidence convention.
fn divided_difference<F, G>(x: f64, y: f64, f: &F, fp: &G) -> f64
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    if (x - y).abs() < COINCIDENT_GAP {
        fp(0.5 * (x + y))
    } else {
        (f(x) - f(y)) / (x - y)
    }
}

/// Frechet derivative `Df(M)[E]` of a matrix function of a symmetric matrix,
/// along a symmetric direction, via the eigendecomposition of `M`.
pub fn dk_first_derivative<F, G>(
    m: &Array2<f64>,
    e: &Array2<f64>,
    f: F,
    f_prime: G,
) -> Result<Array2<f64>>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    let d = check_square_finite(m, "dk_first_derivative")?;
    check_symmetric(m, "M")?;
    check_symmetric(e, "E")?;
    let eig = to_na(m.view()).symmetric_eigen();
    let p = from_na(&eig.eigenvectors);
    let lam: Vec<f64> = eig.eigenvalues.iter().copied().collect();

    let k = p.t().dot(e).dot(&p);
    let mut hadamard = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            hadamard[[i, j]] = k[[i, j]] * divided_difference(lam[i], lam[j], &f, &f_prime);
        }
    }
    Ok(p.dot(&hadamard).dot(&p.t()))
}

/// Second Frechet derivative `D^2 f(M)[E, E]`, the optional second-order oracle.
pub fn dk_second_derivative<F, G, H>(
    m: &Array2<f64>,
    e: &Array2<f64>,
    f: F,
    f_prime: G,
    f_second: H,
) -> Result<Array2<f64>>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
    H: Fn(f64) -> f64,
{
    let d = check_square_finite(m, "dk_second_derivative")?;
    check_symmetric(m, "M")?;
    check_symmetric(e, "E")?;
    let eig = to_na(m.view()).symmetric_eigen();
    let p = from_na(&eig.eigenvectors);
    let lam: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let k = p.t().dot(e).dot(&p);

    let f1 = |x: f64, y: f64| divided_difference(x, y, &f, &f_prime);
    // d/dx f1(x, z), with the limit f''(x)/2 when x = z.
    let df1 = |x: f64, z: f64| {
        if (x - z).abs() < COINCIDENT_GAP {
            0.5 * f_second(0.5 * (x + z))
        } else {
            (f_prime(x) * (x - z) - (f(x) - f(z))) / ((x - z) * (x - z))
        }
    };
    let f2 = |x: f64, y: f64, z: f64| {
        if (x - y).abs() < COINCIDENT_GAP {
            df1(0.5 * (x + y), z)
        } else {
            (f1(x, z) - f1(y, z)) / (x - y)
        }
    };

    let mut core = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for l in 0..d {
                acc += f2(lam[i], lam[j], lam[l]) * k[[i, l]] * k[[j, l]];
            }
            core[[i, j]] = 2.0 * acc;
        }
    }
    Ok(p.dot(&core).dot(&p.t()))
}

fn check_symmetric(m: &Array2<f64>, name: &str) -> Result<()> {
    let d = m.nrows();
    for i in 0..d {
        for j in (i + 1)..d {
            if (m[[i, j]] - m[[j, i]]).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be symmetric within 1e-12, asymmetry {:.3e} at ({i},{j})",
                    (m[[i, j]] - m[[j, i]]).abs()
                )));
            }
        }
    }
    Ok(())
}

/// Closed-form slope of the spiked logit map at zero spike weight.
///
/// For `phi(q) = u^T h_lambda(G_minus_i + q u v^T) v`, with the SVD
/// `G_minus_i = A S B^T`, `a = A^T u`, `b = B^T v`, the slope is
///
/// ```text
/// phi'(0) = 1/4 sum_{k != l} [ (h(s_k)+h(s_l))/(s_k+s_l) (a_k b_l - a_l b_k)^2
///                            + (h(s_k)-h(s_l))/(s_k-s_l) (a_k b_l + a_l b_k)^2 ]
///         + sum_k h'(s_k) a_k^2 b_k^2
/// ```
///
/// with divided differences interpreted as derivatives at coincident values
/// and as `h'(0+)` when both singular values vanish. Every summand is
/// nonnegative, so the result is nonnegative.
pub fn signal_slope(
    g_minus_i: &Array2<f64>,
    u: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
    lambda: f64,
) -> Result<f64> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "signal_slope requires lambda > 0, got {lambda}"
        )));
    }
    let d = check_square_finite(g_minus_i, "signal_slope")?;
    if u.len() != d || v.len() != d {
        return Err(Error::InvalidArgument(
            "u and v must match the matrix dimension".into(),
        ));
    }
    let t = svd(g_minus_i)?;
    let a = t.left.t().dot(&u);
    let b = t.right.t().dot(&v);
    let s = t.singulars;
    let h = |z: f64| h_lambda_scalar(z, lambda);
    let hp = |z: f64| h_lambda_scalar_deriv(z, lambda);

    let mut total = 0.0;
    for k in 0..d {
        for l in 0..d {
            if k == l {
                continue;
            }
            let sum_dd = if s[k] + s[l] < ZERO_PAIR_GAP {
                hp(0.0)
            } else {
                (h(s[k]) + h(s[l])) / (s[k] + s[l])
            };
            let diff_dd = divided_difference(s[k], s[l], &h, &hp);
            let anti = a[k] * b[l] - a[l] * b[k];
            let sym = a[k] * b[l] + a[l] * b[k];
            total += 0.25 * (sum_dd * anti * anti + diff_dd * sym * sym);
        }
    }
    for k in 0..d {
        total += hp(s[k]) * a[k] * a[k] * b[k] * b[k];
    }
    Ok(total)
}
