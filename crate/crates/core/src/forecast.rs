//! ARIMA(p, d, 0) fitting by conditional least squares and the two forecast
//! features: days until the next predicted purchase and days until the
//! predicted run-out of the last purchase.
//!
//! With no moving-average terms the model is an autoregression on the
//! `d`-times differenced series, so every candidate order is one small linear
//! least squares problem. Orders are searched over `p <= 3`, `d <= 3` and the
//! candidate with the lowest AIC wins.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::{PairKey, TemporalSplit};

pub const MAX_P: usize = 3;
pub const MAX_D: usize = 3;
/// Shortest series handed to [`fit_arima`].
pub const MIN_FIT_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl fmt::Display for ArimaOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.p, self.d, self.q)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArimaFit {
    pub order: ArimaOrder,
    /// phi_1..phi_p on the differenced series.
    pub ar_coefficients: Vec<f64>,
    pub intercept: f64,
    pub residual_variance: f64,
    pub aic: f64,
    /// Residuals used in the fit (length of the differenced series minus p).
    pub n_obs: usize,
    forecast: f64,
}

impl ArimaFit {
    /// One-step-ahead forecast on the original scale.
    pub fn forecast(&self) -> f64 {
        self.forecast
    }
}

pub fn difference(series: &[f64], d: usize) -> Vec<f64> {
    let mut w = series.to_vec();
    for _ in 0..d {
        w = w.windows(2).map(|p| p[1] - p[0]).collect();
    }
    w
}

/// Least squares via Householder QR. `columns` is column-major. Returns
/// `None` when a column is numerically dependent on the previous ones.
fn least_squares(mut columns: Vec<Vec<f64>>, mut y: Vec<f64>) -> Option<Vec<f64>> {
    let n = y.len();
    let k = columns.len();
    if n < k {
        return None;
    }
    let norms: Vec<f64> = columns
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    for j in 0..k {
        let norm = columns[j][j..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-9 * norms[j].max(f64::MIN_POSITIVE) {
            return None;
        }
        let alpha = if columns[j][j] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = columns[j][j..].to_vec();
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|x| x * x).sum();
        if vv > 0.0 {
            let reflect = |col: &mut [f64]| {
                let dot: f64 = v.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
                let s = 2.0 * dot / vv;
                for (c, vi) in col.iter_mut().zip(&v) {
                    *c -= s * vi;
                }
            };
            for col in columns.iter_mut().skip(j) {
                reflect(&mut col[j..]);
            }
            reflect(&mut y[j..]);
        }
    }
    let mut beta = vec![0.0; k];
    for j in (0..k).rev() {
        let mut acc = y[j];
        for (l, b) in beta.iter().enumerate().skip(j + 1) {
            acc -= columns[l][j] * b;
        }
        beta[j] = acc / columns[j][j];
    }
    beta.iter().all(|b| b.is_finite()).then_some(beta)
}

/// Fits one candidate order; `None` when it is not estimable.
pub fn fit_order(series: &[f64], p: usize, d: usize) -> Option<ArimaFit> {
    let w = difference(series, d);
    let m = w.len();
    // At least one residual degree of freedom beyond the p + 1 parameters.
    if m <= 2 * p + 1 {
        return None;
    }
    let n_eff = m - p;
    let mut columns = vec![vec![1.0; n_eff]];
    for lag in 1..=p {
        columns.push((p..m).map(|t| w[t - lag]).collect());
    }
    let y: Vec<f64> = w[p..].to_vec();
    let beta = least_squares(columns, y)?;
    let intercept = beta[0];
    let ar: Vec<f64> = beta[1..].to_vec();

    let predict = |t: usize| intercept + ar.iter().enumerate().map(|(i, phi)| phi * w[t - 1 - i]).sum::<f64>();
    let ssr: f64 = (p..m).map(|t| (w[t] - predict(t)).powi(2)).sum();
    let scale = series.iter().map(|x| x * x).sum::<f64>() / series.len() as f64;
    let floor = 1e-12 * scale.max(1e-300);
    let residual_variance = (ssr / n_eff as f64).max(floor);
    let aic = n_eff as f64 * residual_variance.ln() + 2.0 * (p as f64 + 2.0);

    let mut next = predict(m);
    for j in (0..d).rev() {
        next += *difference(series, j).last()?;
    }
    if !aic.is_finite() || !next.is_finite() {
        return None;
    }
    Some(ArimaFit {
        order: ArimaOrder { p, d, q: 0 },
        ar_coefficients: ar,
        intercept,
        residual_variance,
        aic,
        n_obs: n_eff,
        forecast: next,
    })
}

/// Every candidate in grid order (d outer, p inner).
pub fn candidate_fits(series: &[f64]) -> Vec<(ArimaOrder, Option<ArimaFit>)> {
    let mut out = Vec::with_capacity((MAX_D + 1) * (MAX_P + 1));
    for d in 0..=MAX_D {
        for p in 0..=MAX_P {
            let order = ArimaOrder { p, d, q: 0 };
            let fit = (p + d < series.len()).then(|| fit_order(series, p, d)).flatten();
            out.push((order, fit));
        }
    }
    out
}

/// Minimum-AIC fit over the grid. Ties keep the earlier grid entry.
pub fn fit_arima(series: &[f64]) -> Result<ArimaFit> {
    if series.len() < MIN_FIT_LEN {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            min: MIN_FIT_LEN,
        });
    }
    let mut best: Option<ArimaFit> = None;
    for (_, fit) in candidate_fits(series) {
        let Some(fit) = fit else { continue };
        if best.as_ref().is_none_or(|b| fit.aic < b.aic) {
            best = Some(fit);
        }
    }
    best.ok_or(Error::AllCandidatesSingular)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastConfig {
    /// Both features are clamped to `[-feature_cap, feature_cap]` days.
    pub feature_cap: f64,
    /// Floor on the predicted consumption rate.
    pub rate_epsilon: f64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            feature_cap: 365.0,
            rate_epsilon: 1e-6,
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Next value of `series`: ARIMA with enough history, the mean with a little,
/// `prior` with none.
pub fn predict_next(series: &[f64], prior: f64) -> (f64, Option<ArimaOrder>) {
    if series.is_empty() {
        return (prior, None);
    }
    if series.len() < MIN_FIT_LEN {
        return (mean(series), None);
    }
    match fit_arima(series) {
        Ok(fit) => (fit.forecast(), Some(fit.order)),
        Err(_) => (mean(series), None),
    }
}

fn clamp(x: f64, cap: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(-cap, cap)
    }
}

/// ARIMA(date): predicted next gap minus the days already elapsed.
/// Positive means the purchase is still ahead, negative means overdue.
pub fn forecast_gap_feature(
    gaps: &[f64],
    days_since_last: f64,
    category_median_gap: f64,
    config: &ForecastConfig,
) -> f64 {
    let (predicted_gap, _) = predict_next(gaps, category_median_gap);
    clamp(predicted_gap - days_since_last, config.feature_cap)
}

/// Units per day consumed over each completed interval. `quantities[i]` is
/// bought at the start of `gaps[i]`.
pub fn consumption_rates(quantities: &[f64], gaps: &[f64]) -> Vec<f64> {
    quantities
        .iter()
        .zip(gaps)
        .filter(|(_, g)| **g > 0.0)
        .map(|(q, g)| q / g)
        .collect()
}

/// ARIMA(rate): days until the last purchase runs out at the predicted rate,
/// minus the days already elapsed.
pub fn forecast_depletion_feature(
    quantities: &[f64],
    gaps: &[f64],
    days_since_last: f64,
    category_median_rate: f64,
    config: &ForecastConfig,
) -> f64 {
    let rates = consumption_rates(quantities, gaps);
    let (predicted_rate, _) = predict_next(&rates, category_median_rate);
    let last_quantity = quantities.last().copied().unwrap_or(0.0);
    let depletion_days = last_quantity / predicted_rate.max(config.rate_epsilon);
    clamp(depletion_days - days_since_last, config.feature_cap)
}

/// Gap and rate series of one (user, category) pair.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairSeries {
    pub gaps: Vec<f64>,
    pub quantities: Vec<f64>,
    pub days_since_last: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairForecast {
    pub arima_date: f64,
    pub arima_rate: f64,
    pub date_order: Option<ArimaOrder>,
    pub rate_order: Option<ArimaOrder>,
}

/// Fallback medians used when a pair has no gaps of its own.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForecastPriors {
    /// category -> (median gap, median rate)
    pub by_category: BTreeMap<String, (f64, f64)>,
    pub global: (f64, f64),
}

impl ForecastPriors {
    pub fn for_category(&self, category_id: &str) -> (f64, f64) {
        self.by_category.get(category_id).copied().unwrap_or(self.global)
    }
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}

/// Per-pair series of the feature period, keyed by (user, category).
pub fn pair_series(split: &TemporalSplit) -> BTreeMap<PairKey, PairSeries> {
    let per_user: Vec<Vec<(PairKey, PairSeries)>> = split
        .users
        .par_iter()
        .map(|u| {
            let reference = u.reference_date();
            u.features
                .category_events()
                .into_iter()
                .map(|(category, events)| {
                    let gaps = events
                        .windows(2)
                        .map(|w| (w[1].date - w[0].date).num_days() as f64)
                        .collect();
                    let quantities = events.iter().map(|e| e.quantity).collect();
                    let last = events.last().map(|e| e.date).unwrap_or(reference);
                    let series = PairSeries {
                        gaps,
                        quantities,
                        days_since_last: (reference - last).num_days() as f64,
                    };
                    ((u.user_id().to_string(), category.to_string()), series)
                })
                .collect()
        })
        .collect();
    per_user.into_iter().flatten().collect()
}

pub fn forecast_priors(series: &BTreeMap<PairKey, PairSeries>) -> ForecastPriors {
    let mut gaps: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut rates: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for ((_, category), s) in series {
        gaps.entry(category).or_default().extend(&s.gaps);
        rates
            .entry(category)
            .or_default()
            .extend(consumption_rates(&s.quantities, &s.gaps));
    }
    let all_gaps: Vec<f64> = gaps.values().flatten().copied().collect();
    let all_rates: Vec<f64> = rates.values().flatten().copied().collect();
    let global = (median(all_gaps).unwrap_or(0.0), median(all_rates).unwrap_or(0.0));
    let by_category = gaps
        .keys()
        .map(|&c| {
            let g = median(gaps[c].clone()).unwrap_or(global.0);
            let r = median(rates[c].clone()).unwrap_or(global.1);
            (c.to_string(), (g, r))
        })
        .collect();
    ForecastPriors { by_category, global }
}

/// Both forecast features for every pair of the feature period.
pub fn compute_forecasts(split: &TemporalSplit, config: &ForecastConfig) -> BTreeMap<PairKey, PairForecast> {
    let series = pair_series(split);
    let priors = forecast_priors(&series);
    let entries: Vec<(&PairKey, &PairSeries)> = series.iter().collect();
    entries
        .into_par_iter()
        .map(|(key, s)| {
            let (gap_prior, rate_prior) = priors.for_category(&key.1);
            let (predicted_gap, date_order) = predict_next(&s.gaps, gap_prior);
            let rates = consumption_rates(&s.quantities, &s.gaps);
            let (predicted_rate, rate_order) = predict_next(&rates, rate_prior);
            let last_quantity = s.quantities.last().copied().unwrap_or(0.0);
            let depletion = last_quantity / predicted_rate.max(config.rate_epsilon);
            let forecast = PairForecast {
                arima_date: clamp(predicted_gap - s.days_since_last, config.feature_cap),
                arima_rate: clamp(depletion - s.days_since_last, config.feature_cap),
                date_order,
                rate_order,
            };
            (key.clone(), forecast)
        })
        .collect()
}

/// Diagnostics dump: `user_id,category_id,date_order,rate_order,arima_date,arima_rate`.
pub fn write_forecast_diagnostics<W: Write>(writer: W, forecasts: &BTreeMap<PairKey, PairForecast>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["user_id", "category_id", "date_order", "rate_order", "arima_date", "arima_rate"])?;
    let show = |o: Option<ArimaOrder>| o.map_or_else(|| "fallback".to_string(), |o| o.to_string());
    for ((user, category), f) in forecasts {
        wtr.write_record([
            user.clone(),
            category.clone(),
            show(f.date_order),
            show(f.rate_order),
            f.arima_date.to_string(),
            f.arima_rate.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<forecast writer>", e))?;
    Ok(())
}
