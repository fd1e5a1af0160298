//! Population life tables over inter-purchase gaps and the six survival
//! features derived from them.
//!
//! Each category gets one table pooled across shoppers. Every pair of
//! consecutive purchase days of a shopper contributes an event at the gap
//! between them, and the open interval from a shopper's last purchase to the
//! end of observation contributes one censored observation.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::NaiveDate;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::{TemporalSplit, UserHistory};

/// Tables with fewer observations than this yield [`SurvivalCurves::trivial`].
pub const MIN_OBSERVATIONS: u64 = 2;

/// Half width, in days, of the window used for `cum_survival`.
pub const CUM_SURVIVAL_HALF_WIDTH: usize = 3;

pub const SURVIVAL_FEATURE_NAMES: [&str; 6] = [
    "hazard",
    "cum_hazard",
    "survival",
    "cum_survival",
    "norm_risk",
    "norm_event",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LifeTable {
    pub category_id: String,
    /// Observations still at risk at the start of day `k`.
    pub n_risk: Vec<u64>,
    /// Repurchases at gap `k`.
    pub n_event: Vec<u64>,
    /// Observations censored at `k`.
    pub n_censor: Vec<u64>,
}

impl LifeTable {
    pub fn from_observations(category_id: impl Into<String>, events: &[u32], censored: &[u32]) -> Self {
        let k_max = events.iter().chain(censored).copied().max().unwrap_or(0) as usize;
        let mut n_event = vec![0u64; k_max + 1];
        let mut n_censor = vec![0u64; k_max + 1];
        for &k in events {
            n_event[k as usize] += 1;
        }
        for &k in censored {
            n_censor[k as usize] += 1;
        }
        let mut n_risk = vec![0u64; k_max + 1];
        let mut at_risk = (events.len() + censored.len()) as u64;
        for k in 0..=k_max {
            n_risk[k] = at_risk;
            at_risk -= n_event[k] + n_censor[k];
        }
        Self {
            category_id: category_id.into(),
            n_risk,
            n_event,
            n_censor,
        }
    }

    pub fn n_total(&self) -> u64 {
        self.n_risk.first().copied().unwrap_or(0)
    }

    pub fn k_max(&self) -> usize {
        self.n_risk.len().saturating_sub(1)
    }

    pub fn is_consistent(&self) -> bool {
        let len = self.n_risk.len();
        if len == 0 || self.n_event.len() != len || self.n_censor.len() != len {
            return false;
        }
        let mut removed = 0u64;
        for k in 0..len {
            let out = self.n_event[k] + self.n_censor[k];
            if out > self.n_risk[k] {
                return false;
            }
            if k + 1 < len && self.n_risk[k + 1] != self.n_risk[k] - out {
                return false;
            }
            removed += out;
        }
        removed == self.n_total()
    }
}

#[derive(Default)]
struct Observations {
    events: Vec<u32>,
    censored: Vec<u32>,
}

fn days_between(from: NaiveDate, to: NaiveDate) -> u32 {
    (to - from).num_days().max(0) as u32
}

fn collect_observations<'a>(
    users: impl Iterator<Item = (&'a UserHistory, NaiveDate)>,
    only: Option<&str>,
) -> BTreeMap<String, Observations> {
    let mut out: BTreeMap<String, Observations> = BTreeMap::new();
    for (history, observation_end) in users {
        for (category, events) in history.category_events() {
            if only.is_some_and(|c| c != category) {
                continue;
            }
            let obs = out.entry(category.to_string()).or_default();
            obs.events
                .extend(events.windows(2).map(|w| days_between(w[0].date, w[1].date)));
            if let Some(last) = events.last() {
                if last.date <= observation_end {
                    obs.censored.push(days_between(last.date, observation_end));
                }
            }
        }
    }
    out
}

/// Life table for one category, with every user censored at `observation_end`.
pub fn build_life_table(
    histories: &[UserHistory],
    category_id: &str,
    observation_end: NaiveDate,
) -> Result<LifeTable> {
    let obs = collect_observations(histories.iter().map(|h| (h, observation_end)), Some(category_id));
    let obs = obs
        .get(category_id)
        .ok_or_else(|| Error::UnknownCategory(category_id.to_string()))?;
    Ok(LifeTable::from_observations(category_id, &obs.events, &obs.censored))
}

/// Life tables for every category of the feature period. Each user is
/// censored at their own reference date (the day before their cutoff).
pub fn build_life_tables(split: &TemporalSplit) -> BTreeMap<String, LifeTable> {
    let obs = collect_observations(
        split.users.iter().map(|u| (&u.features, u.reference_date())),
        None,
    );
    obs.into_par_iter()
        .map(|(category, o)| {
            let table = LifeTable::from_observations(category.clone(), &o.events, &o.censored);
            (category, table)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalCurves {
    pub hazard: Vec<f64>,
    pub cum_hazard: Vec<f64>,
    pub survival: Vec<f64>,
    pub cum_survival: Vec<f64>,
    pub norm_risk: Vec<f64>,
    pub norm_event: Vec<f64>,
}

impl SurvivalCurves {
    /// Curves of a population that never repurchases.
    pub fn trivial(len: usize) -> Self {
        let len = len.max(1);
        Self {
            hazard: vec![0.0; len],
            cum_hazard: vec![0.0; len],
            survival: vec![1.0; len],
            cum_survival: vec![0.0; len],
            norm_risk: vec![1.0; len],
            norm_event: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.hazard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hazard.is_empty()
    }

    pub fn k_max(&self) -> usize {
        self.len().saturating_sub(1)
    }

    /// The six values at day `k`, clamped to the last tabulated day.
    pub fn at(&self, k: usize) -> [f64; 6] {
        let k = k.min(self.k_max());
        [
            self.hazard[k],
            self.cum_hazard[k],
            self.survival[k],
            self.cum_survival[k],
            self.norm_risk[k],
            self.norm_event[k],
        ]
    }
}

pub fn compute_curves(table: &LifeTable) -> SurvivalCurves {
    let len = table.n_risk.len();
    let n_total = table.n_total();
    if n_total < MIN_OBSERVATIONS {
        return SurvivalCurves::trivial(len);
    }

    let hazard: Vec<f64> = table
        .n_event
        .iter()
        .zip(&table.n_risk)
        .map(|(&e, &r)| if r == 0 { 0.0 } else { e as f64 / r as f64 })
        .collect();
    let cum_hazard: Vec<f64> = hazard
        .iter()
        .scan(0.0, |acc, h| {
            *acc += h;
            Some(*acc)
        })
        .collect();
    let survival: Vec<f64> = cum_hazard.iter().map(|h| (-h).exp()).collect();
    let k_max = len - 1;
    // Oriented as S(k-3) - S(k+3) so the window probability is non-negative.
    let cum_survival = (0..len)
        .map(|k| {
            let lo = k.saturating_sub(CUM_SURVIVAL_HALF_WIDTH);
            let hi = (k + CUM_SURVIVAL_HALF_WIDTH).min(k_max);
            survival[lo] - survival[hi]
        })
        .collect();
    let r0 = table.n_risk[0] as f64;
    let total = n_total as f64;
    SurvivalCurves {
        norm_risk: table.n_risk.iter().map(|&r| r as f64 / r0).collect(),
        norm_event: table.n_event.iter().map(|&e| e as f64 / total).collect(),
        hazard,
        cum_hazard,
        survival,
        cum_survival,
    }
}

/// The six survival features for a shopper `days_since_last` days after their
/// last purchase in the category.
pub fn survival_features(curves: &SurvivalCurves, days_since_last: usize) -> [f64; 6] {
    curves.at(days_since_last)
}

/// Audit dump: `category_id,k,n_risk,n_event,n_censor`.
pub fn write_life_tables<'a, W: Write>(
    writer: W,
    tables: impl IntoIterator<Item = &'a LifeTable>,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["category_id", "k", "n_risk", "n_event", "n_censor"])?;
    for t in tables {
        for k in 0..t.n_risk.len() {
            wtr.write_record([
                t.category_id.clone(),
                k.to_string(),
                t.n_risk[k].to_string(),
                t.n_event[k].to_string(),
                t.n_censor[k].to_string(),
            ])?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<life table writer>", e))?;
    Ok(())
}
