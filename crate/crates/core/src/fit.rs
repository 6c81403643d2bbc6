//! Power-law exponent fitting in log2 space.
//!
//! Capacity-versus-dimension curves are fitted as `y = 2^b * x^e` by
//! ordinary least squares on `(log2 x, log2 y)`; the dimension exponent is
//! the slope. Exponents across several tail indices are then summarized by
//! the two-parameter form `C_alpha = c1 + c2 / alpha`.

use crate::error::{Error, Result};

/// Why an input point was excluded from a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    /// `y <= 0` cannot be fitted in log space.
    NonPositive,
    /// `y >= 0.9 * ceiling`: the reading is bending into a hard ceiling.
    CeilingSaturated,
}

/// Result of a log-log power-law fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Slope in log2-log2 space.
    pub exponent: f64,
    /// Intercept, i.e. `log2 y` extrapolated to `x = 1`.
    pub log_intercept: f64,
    /// Coefficient of determination in log space.
    pub r_squared: f64,
    pub n_points_used: usize,
    /// Abscissae of dropped points with the reason for each.
    pub dropped: Vec<(f64, DropReason)>,
}

/// Fit `log2 y = exponent * log2 x + log_intercept` by least squares.
///
/// Points with `y <= 0` are dropped, as are points with `y >= 0.9 * ceiling`
/// when a ceiling is supplied. Input order does not affect any output field.
pub fn fit_power_law(points: &[(f64, f64)], ceiling: Option<f64>) -> Result<FitResult> {
    if let Some(c) = ceiling {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "ceiling must be a positive real, got {c}"
            )));
        }
    }
    let mut sorted: Vec<(f64, f64)> = points.to_vec();
    for &(x, y) in &sorted {
        if !(x > 0.0) || !x.is_finite() || !y.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "abscissae must be positive finite reals, got ({x}, {y})"
            )));
        }
    }
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut used = Vec::with_capacity(sorted.len());
    let mut dropped = Vec::new();
    for (x, y) in sorted {
        if y <= 0.0 {
            dropped.push((x, DropReason::NonPositive));
        } else if ceiling.is_some_and(|c| y >= 0.9 * c) {
            dropped.push((x, DropReason::CeilingSaturated));
        } else {
            used.push((x.log2(), y.log2()));
        }
    }
    if used.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            got: used.len(),
        });
    }
    let (slope, intercept, r_squared) = ols(&used)?;
    Ok(FitResult {
        exponent: slope,
        log_intercept: intercept,
        r_squared,
        n_points_used: used.len(),
        dropped,
    })
}

/// Least-squares fit of exponents to `c1 + c2 / alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaFormFit {
    pub c1: f64,
    pub c2: f64,
    pub r_squared: f64,
}

pub fn fit_alpha_form(pairs: &[(f64, f64)]) -> Result<AlphaFormFit> {
    if pairs.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            got: pairs.len(),
        });
    }
    for &(alpha, _) in pairs {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "alpha values must be positive reals, got {alpha}"
            )));
        }
    }
    let mut distinct: Vec<f64> = pairs.iter().map(|&(a, _)| a).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            got: 1,
        });
    }
    let mut xy: Vec<(f64, f64)> = pairs.iter().map(|&(a, e)| (1.0 / a, e)).collect();
    xy.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)));
    let (slope, intercept, r_squared) = ols(&xy)?;
    Ok(AlphaFormFit {
        c1: intercept,
        c2: slope,
        r_squared,
    })
}

/// Ordinary least squares on pre-transformed points; returns
/// `(slope, intercept, r_squared)` with `r_squared = 1` for a perfect or
/// degenerate (zero-variance) response.
fn ols(points: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for &(x, y) in points {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
        syy += (y - mean_y) * (y - mean_y);
    }
    if sxx == 0.0 {
        return Err(Error::InvalidArgument(
            "all abscissae coincide; slope is undefined".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let mut sse = 0.0;
    for &(x, y) in points {
        let r = y - (intercept + slope * x);
        sse += r * r;
    }
    let r_squared = if syy > 0.0 {
        (1.0 - sse / syy).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok((slope, intercept, r_squared))
}
