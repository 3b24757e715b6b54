// SPDX-License-Identifier: MIT OR Apache-2.0

//! ARIMA(p, d, q) estimation and one-step forecasting for short windows.
//!
//! Estimation runs on the d-times differenced series, standardised to zero
//! mean and unit variance so that the fit is invariant to the scale of the
//! input. Starting values come from the two-stage Hannan-Rissanen regression
//! (a long autoregression supplies residual proxies, then the ARMA regression
//! is solved by least squares) and are refined by minimising the conditional
//! sum of squares with a derivative-free coordinate search.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on every component of an order.
pub const MAX_ORDER: usize = 5;

const CSS_MAX_ITERATIONS: usize = 200;
const CSS_STEP_TOLERANCE: f64 = 1e-8;
const CSS_INITIAL_STEP: f64 = 0.1;
const SHRINK_FACTOR: f64 = 0.9;
/// Reflection coefficients must stay below this in magnitude.
const STABILITY_MARGIN: f64 = 0.999;
const SINGULAR_RCOND: f64 = 1e-10;
/// Variance ratio below which one more difference is taken.
const DIFFERENCING_RATIO: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl ArimaOrder {
    pub const DEFAULT: ArimaOrder = ArimaOrder { p: 2, d: 0, q: 2 };

    pub fn new(p: usize, d: usize, q: usize) -> Result<Self> {
        let order = Self { p, d, q };
        order.validate()?;
        Ok(order)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p > MAX_ORDER || self.d > MAX_ORDER || self.q > MAX_ORDER {
            return Err(Error::config(format!(
                "ARIMA order {self} exceeds the bound of {MAX_ORDER}"
            )));
        }
        if self.d == 0 && self.p + self.q == 0 {
            return Err(Error::config("ARIMA(0,0,0) has nothing to estimate"));
        }
        Ok(())
    }

    /// Shortest series `fit` accepts for this order.
    pub fn min_fit_len(&self) -> usize {
        self.p + self.q + self.d + 5
    }
}

impl Default for ArimaOrder {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl std::fmt::Display for ArimaOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.p, self.d, self.q)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArimaModel {
    pub order: ArimaOrder,
    pub ar_coeffs: Vec<f64>,
    pub ma_coeffs: Vec<f64>,
    /// Constant term of the differenced-scale equation.
    pub intercept: f64,
    pub residual_variance: f64,
    /// Set when the regression was singular and the model fell back to the
    /// mean of the differenced series.
    pub degraded: bool,
    css: f64,
    residual_count: usize,
}

impl ArimaModel {
    /// Conditional-sum-of-squares Akaike criterion.
    pub fn aic(&self) -> f64 {
        let n = self.residual_count.max(1) as f64;
        let sigma2 = (self.css / n).max(f64::MIN_POSITIVE);
        let k = (self.order.p + self.order.q + 1) as f64;
        n * sigma2.ln() + 2.0 * k
    }

    fn intercept_only(order: ArimaOrder, diffed: &[f64]) -> Self {
        let mean = mean(diffed);
        let var = diffed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / diffed.len() as f64;
        Self {
            order,
            ar_coeffs: vec![0.0; order.p],
            ma_coeffs: vec![0.0; order.q],
            intercept: mean,
            residual_variance: var,
            degraded: true,
            css: var * diffed.len() as f64,
            residual_count: diffed.len(),
        }
    }
}

/// `d`-fold first differences.
pub fn difference(series: &[f64], d: usize) -> Result<Vec<f64>> {
    if series.len() <= d {
        return Err(Error::invalid_input(format!(
            "cannot difference {} values {d} times",
            series.len()
        )));
    }
    let mut out = series.to_vec();
    for _ in 0..d {
        out = out.windows(2).map(|w| w[1] - w[0]).collect();
    }
    Ok(out)
}

/// First value of each differencing level `0..d`, enough to undo
/// [`difference`] with [`integrate`].
pub fn differencing_seeds(series: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut seeds = Vec::with_capacity(d);
    let mut level = series.to_vec();
    for _ in 0..d {
        seeds.push(*level.first().ok_or_else(|| {
            Error::invalid_input("series too short to record differencing seeds")
        })?);
        level = difference(&level, 1)?;
    }
    Ok(seeds)
}

/// Inverse of [`difference`] given the seeds from [`differencing_seeds`].
pub fn integrate(diffed: &[f64], seeds: &[f64]) -> Vec<f64> {
    let mut level = diffed.to_vec();
    for &seed in seeds.iter().rev() {
        let mut next = Vec::with_capacity(level.len() + 1);
        let mut acc = seed;
        next.push(acc);
        for v in &level {
            acc += v;
            next.push(acc);
        }
        level = next;
    }
    level
}

/// Whether `1 - c1 z - ... - cp z^p` has every root outside the unit circle,
/// via the Durbin-Levinson step-down recursion.
pub fn is_stationary(coeffs: &[f64]) -> bool {
    reflection_ok(coeffs, 1.0)
}

fn reflection_ok(coeffs: &[f64], bound: f64) -> bool {
    let mut a = coeffs.to_vec();
    while let Some(&k) = a.last() {
        if !k.is_finite() || k.abs() >= bound {
            return false;
        }
        let m = a.len() - 1;
        let denom = 1.0 - k * k;
        a = (0..m).map(|i| (a[i] + k * a[m - 1 - i]) / denom).collect();
    }
    true
}

fn stable(coeffs: &[f64]) -> bool {
    reflection_ok(coeffs, STABILITY_MARGIN)
}

fn invertible(ma: &[f64]) -> bool {
    let neg: Vec<f64> = ma.iter().map(|t| -t).collect();
    stable(&neg)
}

fn shrink_until(coeffs: &mut [f64], ok: impl Fn(&[f64]) -> bool) {
    for _ in 0..500 {
        if ok(coeffs) {
            return;
        }
        coeffs.iter_mut().for_each(|c| *c *= SHRINK_FACTOR);
    }
    coeffs.iter_mut().for_each(|c| *c = 0.0);
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Least squares through SVD; `None` when the design is rank deficient.
fn least_squares(rows: &[Vec<f64>], target: &[f64]) -> Option<Vec<f64>> {
    let k = rows.first()?.len();
    if rows.len() < k {
        return None;
    }
    let x = DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]);
    let y = DVector::from_column_slice(target);
    let svd = x.svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    // also catches a NaN largest value
    if max_sv.is_nan() || max_sv <= 0.0 || min_sv / max_sv < SINGULAR_RCOND {
        return None;
    }
    let sol = svd.solve(&y, 0.0).ok()?;
    let out: Vec<f64> = sol.iter().copied().collect();
    out.iter().all(|v| v.is_finite()).then_some(out)
}

struct Params {
    intercept: f64,
    ar: Vec<f64>,
    ma: Vec<f64>,
}

impl Params {
    fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.intercept];
        v.extend(&self.ar);
        v.extend(&self.ma);
        v
    }

    fn from_slice(v: &[f64], p: usize) -> Self {
        Self {
            intercept: v[0],
            ar: v[1..1 + p].to_vec(),
            ma: v[1 + p..].to_vec(),
        }
    }
}

/// Conditional residuals; the first `p` are zero and excluded from the sum.
fn css_residuals(y: &[f64], params: &Params) -> Vec<f64> {
    let p = params.ar.len();
    let mut e = vec![0.0; y.len()];
    for t in p..y.len() {
        let mut pred = params.intercept;
        for (i, phi) in params.ar.iter().enumerate() {
            pred += phi * y[t - 1 - i];
        }
        for (j, theta) in params.ma.iter().enumerate() {
            if t > j {
                pred += theta * e[t - 1 - j];
            }
        }
        e[t] = y[t] - pred;
    }
    e
}

fn css(y: &[f64], params: &Params) -> f64 {
    let p = params.ar.len();
    css_residuals(y, params)[p..].iter().map(|e| e * e).sum()
}

/// Hannan-Rissanen starting values; `None` if a regression is singular.
fn hannan_rissanen(y: &[f64], p: usize, q: usize) -> Option<Params> {
    let n = y.len();
    if q == 0 {
        let rows: Vec<Vec<f64>> = (p..n)
            .map(|t| {
                let mut r = vec![1.0];
                r.extend((1..=p).map(|i| y[t - i]));
                r
            })
            .collect();
        let sol = least_squares(&rows, &y[p..])?;
        return Some(Params::from_slice(&sol, p));
    }

    let preferred = ((2.0 * (n as f64).cbrt()).floor() as usize).max(p + q);
    let long_order = (1..=preferred).rev().find(|&m| {
        let long_rows = n.saturating_sub(m);
        let arma_rows = n.saturating_sub(p.max(m + q));
        long_rows >= m + 2 && arma_rows >= p + q + 2
    })?;

    let rows: Vec<Vec<f64>> = (long_order..n)
        .map(|t| {
            let mut r = vec![1.0];
            r.extend((1..=long_order).map(|i| y[t - i]));
            r
        })
        .collect();
    let long = least_squares(&rows, &y[long_order..])?;
    let mut resid = vec![0.0; n];
    for t in long_order..n {
        let mut pred = long[0];
        for i in 1..=long_order {
            pred += long[i] * y[t - i];
        }
        resid[t] = y[t] - pred;
    }

    let start = p.max(long_order + q);
    let rows: Vec<Vec<f64>> = (start..n)
        .map(|t| {
            let mut r = vec![1.0];
            r.extend((1..=p).map(|i| y[t - i]));
            r.extend((1..=q).map(|j| resid[t - j]));
            r
        })
        .collect();
    let sol = least_squares(&rows, &y[start..])?;
    Some(Params::from_slice(&sol, p))
}

/// Coordinate search on the conditional sum of squares, restricted to the
/// stationary and invertible region.
fn refine_css(y: &[f64], start: Params) -> Params {
    let p = start.ar.len();
    let admissible = |v: &[f64]| stable(&v[1..1 + p]) && invertible(&v[1 + p..]);
    let objective = |v: &[f64]| css(y, &Params::from_slice(v, p));

    let mut x = start.to_vec();
    let mut best = objective(&x);
    let mut steps = vec![CSS_INITIAL_STEP; x.len()];
    for _ in 0..CSS_MAX_ITERATIONS {
        for k in 0..x.len() {
            let mut moved = false;
            for dir in [1.0, -1.0] {
                let mut trial = x.clone();
                trial[k] += dir * steps[k];
                if !admissible(&trial) {
                    continue;
                }
                let value = objective(&trial);
                if value < best {
                    best = value;
                    x = trial;
                    moved = true;
                    break;
                }
            }
            if !moved {
                steps[k] *= 0.5;
            }
        }
        if steps.iter().all(|s| *s < CSS_STEP_TOLERANCE) {
            break;
        }
    }
    Params::from_slice(&x, p)
}

/// Fit an ARIMA model of the given order.
pub fn fit(series: &[f64], order: ArimaOrder) -> Result<ArimaModel> {
    order.validate()?;
    if series.len() < order.min_fit_len() {
        return Err(Error::Estimation(format!(
            "ARIMA{order} needs at least {} samples, got {}",
            order.min_fit_len(),
            series.len()
        )));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_input("series contains non-finite values"));
    }
    let y = difference(series, order.d)?;
    let center = mean(&y);
    let scale = (y.iter().map(|v| (v - center).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
    if scale == 0.0 || scale <= 1e-9 * center.abs() {
        return Ok(ArimaModel::intercept_only(order, &y));
    }
    let z: Vec<f64> = y.iter().map(|v| (v - center) / scale).collect();

    let Some(mut start) = hannan_rissanen(&z, order.p, order.q) else {
        return Ok(ArimaModel::intercept_only(order, &y));
    };
    shrink_until(&mut start.ar, stable);
    shrink_until(&mut start.ma, invertible);
    let params = refine_css(&z, start);
    let css_z = css(&z, &params);
    let residual_count = z.len() - order.p;

    let ar_sum: f64 = params.ar.iter().sum();
    Ok(ArimaModel {
        order,
        intercept: center * (1.0 - ar_sum) + scale * params.intercept,
        ar_coeffs: params.ar,
        ma_coeffs: params.ma,
        residual_variance: scale * scale * css_z / residual_count as f64,
        degraded: false,
        css: scale * scale * css_z,
        residual_count,
    })
}

/// One-step-ahead point forecast on the original scale of `history`.
pub fn forecast_one(model: &ArimaModel, history: &[f64]) -> Result<f64> {
    let ArimaOrder { p, d, q } = model.order;
    if history.len() < (p + d + q).max(d + 1) {
        return Err(Error::invalid_input(format!(
            "forecasting ARIMA{} needs at least {} values, got {}",
            model.order,
            (p + d + q).max(d + 1),
            history.len()
        )));
    }
    let mut levels = vec![history.to_vec()];
    for _ in 0..d {
        let next = difference(levels.last().expect("non-empty"), 1)?;
        levels.push(next);
    }
    let y = levels.last().expect("non-empty");
    let params = Params {
        intercept: model.intercept,
        ar: model.ar_coeffs.clone(),
        ma: model.ma_coeffs.clone(),
    };
    let e = css_residuals(y, &params);
    let n = y.len();
    let mut pred = model.intercept;
    for (i, phi) in model.ar_coeffs.iter().enumerate() {
        pred += phi * y[n - 1 - i];
    }
    for (j, theta) in model.ma_coeffs.iter().enumerate() {
        if n > j {
            pred += theta * e[n - 1 - j];
        }
    }
    for level in levels[..d].iter().rev() {
        pred += level.last().expect("non-empty");
    }
    Ok(pred)
}

/// Candidate evaluated during order selection.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderCandidate {
    pub order: ArimaOrder,
    pub aic: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderSelection {
    pub order: ArimaOrder,
    pub candidates: Vec<OrderCandidate>,
}

fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / xs.len().max(1) as f64
}

/// Differencing order picked by the variance screen: keep differencing while
/// one more difference cuts the variance below half.
pub fn select_differencing(series: &[f64], d_max: usize) -> usize {
    let mut level = series.to_vec();
    for d in 0..d_max {
        if level.len() < 3 {
            return d;
        }
        let next: Vec<f64> = level.windows(2).map(|w| w[1] - w[0]).collect();
        let base = variance(&level);
        if base == 0.0 || variance(&next) / base >= DIFFERENCING_RATIO {
            return d;
        }
        level = next;
    }
    d_max
}

/// Grid search over `(p, q)` after choosing `d`; returns the AIC-minimising
/// order, or `(1,0,0)` when nothing could be fitted.
pub fn auto_order(series: &[f64], p_max: usize, q_max: usize, d_max: usize) -> Result<ArimaOrder> {
    Ok(auto_order_detailed(series, p_max, q_max, d_max)?.order)
}

pub fn auto_order_detailed(
    series: &[f64],
    p_max: usize,
    q_max: usize,
    d_max: usize,
) -> Result<OrderSelection> {
    if series.len() < 30 {
        return Err(Error::invalid_input(format!(
            "order selection needs at least 30 samples, got {}",
            series.len()
        )));
    }
    if p_max > MAX_ORDER || q_max > MAX_ORDER || d_max > MAX_ORDER {
        return Err(Error::config(format!("search bounds exceed {MAX_ORDER}")));
    }
    let d = select_differencing(series, d_max);
    let mut candidates = Vec::new();
    for p in 0..=p_max {
        for q in 0..=q_max {
            let Ok(order) = ArimaOrder::new(p, d, q) else {
                continue;
            };
            if let Ok(model) = fit(series, order) {
                let aic = model.aic();
                if aic.is_finite() {
                    candidates.push(OrderCandidate { order, aic });
                }
            }
        }
    }
    let order = candidates
        .iter()
        .min_by(|a, b| a.aic.total_cmp(&b.aic))
        .map(|c| c.order)
        .unwrap_or(ArimaOrder { p: 1, d: 0, q: 0 });
    Ok(OrderSelection { order, candidates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn difference_examples() {
        let s = [1.0, 3.0, 6.0, 10.0];
        assert_eq!(difference(&s, 0).unwrap(), s.to_vec());
        assert_eq!(difference(&s, 1).unwrap(), vec![2.0, 3.0, 4.0]);
        assert_eq!(difference(&s, 2).unwrap(), vec![1.0, 1.0]);
        assert!(difference(&s, 4).is_err());
    }

    #[test]
    fn order_bounds() {
        assert!(ArimaOrder::new(0, 0, 0).is_err());
        assert!(ArimaOrder::new(0, 1, 0).is_ok());
        assert!(ArimaOrder::new(6, 0, 0).is_err());
        assert_eq!(ArimaOrder::default(), ArimaOrder { p: 2, d: 0, q: 2 });
    }

    #[test]
    fn constant_series_fits_intercept_only() {
        let s = vec![3.5; 20];
        let m = fit(&s, ArimaOrder::new(1, 0, 0).unwrap()).unwrap();
        assert!(m.ar_coeffs[0].abs() < 1e-12);
        assert!((m.intercept - 3.5).abs() < 1e-12);
        assert!(m.residual_variance.abs() < 1e-12);
        assert!(m.degraded);
        assert!((forecast_one(&m, &s).unwrap() - 3.5).abs() < 1e-12);
    }

    #[test]
    fn too_short_is_infeasible() {
        let r = fit(&[1.0, 2.0, 3.0], ArimaOrder::DEFAULT);
        assert!(matches!(r, Err(Error::Estimation(_))));
    }

    #[test]
    fn closed_form_forecasts() {
        let ar1 = ArimaModel {
            order: ArimaOrder::new(1, 0, 0).unwrap(),
            ar_coeffs: vec![0.7],
            ma_coeffs: vec![],
            intercept: 0.0,
            residual_variance: 1.0,
            degraded: false,
            css: 0.0,
            residual_count: 1,
        };
        assert!((forecast_one(&ar1, &[1.0, 2.0, 4.0]).unwrap() - 2.8).abs() < 1e-12);

        let mean_only = ArimaModel::intercept_only(ArimaOrder::new(1, 0, 0).unwrap(), &[2.0, 4.0]);
        assert!((forecast_one(&mean_only, &[9.0, 9.0]).unwrap() - 3.0).abs() < 1e-12);

        // random walk with drift 0.5: next = last + 0.5
        let rw = ArimaModel {
            order: ArimaOrder::new(0, 1, 0).unwrap(),
            ar_coeffs: vec![],
            ma_coeffs: vec![],
            intercept: 0.5,
            residual_variance: 1.0,
            degraded: false,
            css: 0.0,
            residual_count: 1,
        };
        assert!((forecast_one(&rw, &[1.0, 2.0, 10.0]).unwrap() - 10.5).abs() < 1e-12);
    }

    #[test]
    fn ar2_stationarity_triangle() {
        // the AR(2) stationary region is the triangle |phi2| < 1, phi2 ± phi1 < 1
        for i in -40..=40 {
            for j in -20..=20 {
                let (p1, p2) = (f64::from(i) * 0.05 + 0.0123, f64::from(j) * 0.05 + 0.0071);
                let inside = p2.abs() < 1.0 && p2 + p1 < 1.0 && p2 - p1 < 1.0;
                assert_eq!(is_stationary(&[p1, p2]), inside, "({p1}, {p2})");
            }
        }
        assert!(is_stationary(&[]));
        assert!(!is_stationary(&[1.0]));
        assert!(is_stationary(&[-0.99]));
    }

    #[test]
    fn differencing_screen() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut walk = vec![0.0];
        for i in 1..200 {
            let step: f64 = rng.random_range(-1.0..1.0);
            walk.push(walk[i - 1] + step);
        }
        assert_eq!(select_differencing(&walk, 1), 1);
        let noise = difference(&walk, 1).unwrap();
        assert_eq!(select_differencing(&noise, 2), 0);
    }

    proptest! {
        #[test]
        fn integrate_inverts_difference(
            xs in prop::collection::vec(-100.0..100.0f64, 6..40),
            d in 0usize..4,
        ) {
            let diffed = difference(&xs, d).unwrap();
            let seeds = differencing_seeds(&xs, d).unwrap();
            let back = integrate(&diffed, &seeds);
            prop_assert_eq!(back.len(), xs.len());
            for (a, b) in back.iter().zip(&xs) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn fit_is_deterministic(xs in prop::collection::vec(0.0..5.0f64, 20..30)) {
            let a = fit(&xs, ArimaOrder::DEFAULT).unwrap();
            let b = fit(&xs, ArimaOrder::DEFAULT).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn fitted_models_are_stationary(xs in prop::collection::vec(-5.0..5.0f64, 20..40)) {
            let m = fit(&xs, ArimaOrder::DEFAULT).unwrap();
            prop_assert!(is_stationary(&m.ar_coeffs));
            prop_assert!(m.residual_variance >= 0.0);
            prop_assert!(forecast_one(&m, &xs).unwrap().is_finite());
        }

        #[test]
        fn differenced_forecast_is_shift_equivariant(
            xs in prop::collection::vec(-5.0..5.0f64, 25..40),
            c in -100.0..100.0f64,
        ) {
            let order = ArimaOrder::new(1, 1, 1).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|v| v + c).collect();
            let a = forecast_one(&fit(&xs, order).unwrap(), &xs).unwrap();
            let b = forecast_one(&fit(&shifted, order).unwrap(), &shifted).unwrap();
            prop_assert!((a + c - b).abs() < 1e-6, "{} vs {}", a + c, b);
        }
    }
}
