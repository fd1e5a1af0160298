//! The 11-column category feature matrix and its z-score normalisation.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forecast::PairForecast;
use crate::ingest::{LabelSet, PairKey, TemporalSplit};
use crate::survival::{survival_features, SurvivalCurves};

pub const NUM_FEATURES: usize = 11;

/// Bumped whenever the column order or meaning changes.
pub const FEATURE_SCHEMA_VERSION: u32 = 1;

/// Column order of [`FeatureVector::x`].
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "hazard",
    "cum_hazard",
    "survival",
    "cum_survival",
    "norm_risk",
    "norm_event",
    "arima_date",
    "arima_rate",
    "num_purchases",
    "trips_since_last",
    "days_since_last",
];

pub const NUM_PURCHASES: usize = 8;
pub const TRIPS_SINCE_LAST: usize = 9;
pub const DAYS_SINCE_LAST: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub user_id: String,
    pub category_id: String,
    pub x: [f64; NUM_FEATURES],
    pub label: u8,
}

/// One row per labelled (user, category) pair, in key order.
pub fn assemble_feature_matrix(
    split: &TemporalSplit,
    curves_by_category: &BTreeMap<String, SurvivalCurves>,
    forecasts: &BTreeMap<PairKey, PairForecast>,
    labels: &LabelSet,
) -> Vec<FeatureVector> {
    let trivial = SurvivalCurves::trivial(1);
    let per_user: Vec<Vec<FeatureVector>> = split
        .users
        .par_iter()
        .map(|u| {
            let user_id = u.user_id();
            let reference = u.reference_date();
            let baskets = &u.features.baskets;
            let events = u.features.category_events();
            let mut rows = Vec::with_capacity(events.len());
            for (category, ev) in &events {
                let key = (user_id.to_string(), category.to_string());
                let Some(&label) = labels.labels.get(&key) else {
                    continue;
                };
                let last_date = ev.last().map(|e| e.date).unwrap_or(reference);
                let days_since_last = (reference - last_date).num_days().max(0);
                let last_basket = baskets
                    .iter()
                    .rposition(|b| b.contains_category(category))
                    .unwrap_or(baskets.len().saturating_sub(1));
                let trips_since_last = baskets.len() - 1 - last_basket;

                let curves = curves_by_category.get(*category).unwrap_or(&trivial);
                let s = survival_features(curves, days_since_last as usize);
                let (arima_date, arima_rate) = forecasts
                    .get(&key)
                    .map_or((0.0, 0.0), |f| (f.arima_date, f.arima_rate));
                rows.push(FeatureVector {
                    user_id: key.0,
                    category_id: key.1,
                    x: [
                        s[0],
                        s[1],
                        s[2],
                        s[3],
                        s[4],
                        s[5],
                        arima_date,
                        arima_rate,
                        ev.len() as f64,
                        trips_since_last as f64,
                        days_since_last as f64,
                    ],
                    label,
                });
            }
            rows
        })
        .collect();
    per_user.into_iter().flatten().collect()
}

/// Per-column mean and sample standard deviation of the training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: [f64; NUM_FEATURES],
    pub std: [f64; NUM_FEATURES],
}

impl NormStats {
    pub fn fit(rows: &[FeatureVector]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("cannot compute normalisation statistics of zero rows"));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; NUM_FEATURES];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(&r.x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = [0.0; NUM_FEATURES];
        for r in rows {
            for j in 0..NUM_FEATURES {
                std[j] += (r.x[j] - mean[j]).powi(2);
            }
        }
        for s in &mut std {
            *s = if rows.len() > 1 { (*s / (n - 1.0)).sqrt() } else { 0.0 };
            if !(*s > 0.0) || !s.is_finite() {
                *s = 1.0;
            }
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &[f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
        std::array::from_fn(|j| (x[j] - self.mean[j]) / self.std[j])
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("version = {FEATURE_SCHEMA_VERSION}\n");
        for (j, name) in FEATURE_NAMES.iter().enumerate() {
            out.push_str(&format!("{name}.mean = {:?}\n", self.mean[j]));
            out.push_str(&format!("{name}.std = {:?}\n", self.std[j]));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("normalisation stats line without `=`: {line}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let version = kv.get("version").map(String::as_str);
        if version != Some(&FEATURE_SCHEMA_VERSION.to_string()) {
            return Err(Error::Model(format!(
                "normalisation stats version {version:?}, expected {FEATURE_SCHEMA_VERSION}"
            )));
        }
        let get = |key: String| -> Result<f64> {
            kv.get(&key)
                .ok_or_else(|| Error::Model(format!("normalisation stats missing `{key}`")))?
                .parse()
                .map_err(|_| Error::Parse(format!("bad number for `{key}`")))
        };
        let mut mean = [0.0; NUM_FEATURES];
        let mut std = [0.0; NUM_FEATURES];
        for (j, name) in FEATURE_NAMES.iter().enumerate() {
            mean[j] = get(format!("{name}.mean"))?;
            std[j] = get(format!("{name}.std"))?;
        }
        if kv.len() != 1 + 2 * NUM_FEATURES {
            return Err(Error::Model("normalisation stats carry unexpected keys".into()));
        }
        Ok(Self { mean, std })
    }
}

/// Z-scores every row. Without `stats` they are fitted on `rows`; with
/// `stats` they are applied unchanged.
pub fn normalize(rows: &[FeatureVector], stats: Option<&NormStats>) -> Result<(Vec<FeatureVector>, NormStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => NormStats::fit(rows)?,
    };
    let out = rows
        .iter()
        .map(|r| FeatureVector {
            x: stats.apply(&r.x),
            ..r.clone()
        })
        .collect();
    Ok((out, stats))
}

fn matrix_header() -> Vec<String> {
    let mut h = vec!["user_id".to_string(), "category_id".to_string()];
    h.extend((1..=NUM_FEATURES).map(|i| format!("f{i}")));
    h.push("label".to_string());
    h
}

/// `user_id,category_id,f1..f11,label`, columns in [`FEATURE_NAMES`] order.
pub fn write_feature_matrix<W: Write>(writer: W, rows: &[FeatureVector]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(matrix_header())?;
    for r in rows {
        let mut rec = vec![r.user_id.clone(), r.category_id.clone()];
        rec.extend(r.x.iter().map(|v| format!("{v:?}")));
        rec.push(r.label.to_string());
        wtr.write_record(rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<feature writer>", e))?;
    Ok(())
}

pub fn read_feature_matrix<R: Read>(reader: R) -> Result<Vec<FeatureVector>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != matrix_header() {
        return Err(Error::Parse(format!(
            "feature matrix header mismatch: {}",
            header.join(",")
        )));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| Error::Parse(format!("bad feature value `{}`", &rec[i])))
        };
        let mut x = [0.0; NUM_FEATURES];
        for (j, v) in x.iter_mut().enumerate() {
            *v = num(2 + j)?;
        }
        let label = match &rec[2 + NUM_FEATURES] {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::Parse(format!("bad label `{other}`"))),
        };
        rows.push(FeatureVector {
            user_id: rec[0].to_string(),
            category_id: rec[1].to_string(),
            x,
            label,
        });
    }
    Ok(rows)
}
