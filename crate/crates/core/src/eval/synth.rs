//! Synthetic shoppers with known per-(user, category) purchase rates.
//!
//! Every (user, category) pair the user participates in gets a mean gap drawn
//! from a gamma distribution; purchases then follow a stationary renewal
//! process with rounded gaps of at least one day. Gaps are exponential by
//! default; `gap_regularity` > 1 makes them gamma-shaped and more periodic. The item bought at each event
//! comes from a per-user Zipf preference over the category's items, and the
//! quantity is `1 + Poisson(quantity_lambda)`.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{Days, NaiveDate};
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::TransactionRecord;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_categories: usize,
    pub items_per_category: usize,
    pub horizon_days: u32,
    /// Gamma shape of the per-pair mean gap; large values make every pair
    /// share `gap_mean`.
    pub gap_shape: f64,
    pub gap_mean: f64,
    /// Gamma shape of individual gaps around the pair's mean; 1 is exponential.
    pub gap_regularity: f64,
    /// Probability that a user shops a given category at all.
    pub category_participation: f64,
    /// Zipf exponent of the per-user item preference.
    pub popularity_skew: f64,
    pub quantity_lambda: f64,
    pub start_date: NaiveDate,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 1000,
            n_categories: 30,
            items_per_category: 10,
            horizon_days: 540,
            gap_shape: 2.0,
            gap_mean: 30.0,
            gap_regularity: 1.0,
            category_participation: 0.5,
            popularity_skew: 1.2,
            quantity_lambda: 0.5,
            start_date: NaiveDate::from_ymd_opt(2023, 1, 1).expect("valid date"),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.n_users > 0
            && self.n_categories > 0
            && self.items_per_category > 0
            && self.horizon_days > 0
            && self.gap_shape > 0.0
            && self.gap_mean > 0.0
            && self.gap_regularity > 0.0
            && self.popularity_skew >= 0.0
            && self.quantity_lambda >= 0.0
            && self.category_participation > 0.0
            && self.category_participation <= 1.0;
        if positive && self.gap_shape.is_finite() && self.gap_mean.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(
                "synth sizes, horizon, gap_shape and gap_mean must be positive; participation in (0, 1]".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthRow {
    pub user_id: String,
    pub category_id: String,
    pub mean_gap: f64,
    pub events: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    /// Sorted by user, date, item.
    pub records: Vec<TransactionRecord>,
    pub truth: Vec<TruthRow>,
}

pub fn user_name(u: usize) -> String {
    format!("u{u:05}")
}

pub fn category_name(c: usize) -> String {
    format!("c{c:03}")
}

pub fn item_name(c: usize, i: usize) -> String {
    format!("c{c:03}_i{i:02}")
}

struct PairDraw {
    truth: TruthRow,
    /// (day, item index, quantity)
    events: Vec<(u32, usize, f64)>,
}

fn draw_pair(config: &SynthConfig, u: usize, c: usize) -> Result<Option<PairDraw>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, u as u64, c as u64));
    if rng.random::<f64>() >= config.category_participation {
        return Ok(None);
    }
    let bad = |e: &dyn std::fmt::Display| Error::Config(format!("synth distribution: {e}"));
    let gamma = Gamma::new(config.gap_shape, config.gap_mean / config.gap_shape).map_err(|e| bad(&e))?;
    let mean_gap: f64 = gamma.sample(&mut rng).max(1e-3);
    let k = config.gap_regularity;
    let gaps = Gamma::new(k, mean_gap / k).map_err(|e| bad(&e))?;
    // Forward recurrence time of a stationary renewal process: a uniform
    // point inside a length-biased gap.
    let first = Gamma::new(k + 1.0, mean_gap / k).map_err(|e| bad(&e))?;

    let mut order: Vec<usize> = (0..config.items_per_category).collect();
    order.shuffle(&mut rng);
    let weights: Vec<f64> = (0..config.items_per_category)
        .map(|r| 1.0 / ((r + 1) as f64).powf(config.popularity_skew))
        .collect();
    let choose = WeightedIndex::new(&weights).map_err(|e| bad(&e))?;
    let extra = if config.quantity_lambda > 0.0 {
        Some(Poisson::new(config.quantity_lambda).map_err(|e| bad(&e))?)
    } else {
        None
    };

    let mut events = Vec::new();
    let mut t = (rng.random::<f64>() * first.sample(&mut rng)).round();
    while t < f64::from(config.horizon_days) {
        let item = order[choose.sample(&mut rng)];
        let quantity = 1.0 + extra.map_or(0.0, |p| p.sample(&mut rng));
        events.push((t as u32, item, quantity));
        t += gaps.sample(&mut rng).round().max(1.0);
    }
    Ok(Some(PairDraw {
        truth: TruthRow {
            user_id: user_name(u),
            category_id: category_name(c),
            mean_gap,
            events: events.len(),
        },
        events,
    }))
}

/// Bit-reproducible for a fixed config: every pair draws from its own
/// seed-derived stream, independent of thread scheduling.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let per_user: Vec<(Vec<TransactionRecord>, Vec<TruthRow>)> = (0..config.n_users)
        .into_par_iter()
        .map(|u| -> Result<_> {
            let user_id = user_name(u);
            let mut lines: BTreeMap<(u32, String), (String, f64)> = BTreeMap::new();
            let mut truth = Vec::new();
            for c in 0..config.n_categories {
                let Some(pair) = draw_pair(config, u, c)? else {
                    continue;
                };
                for (day, item, q) in pair.events {
                    lines
                        .entry((day, item_name(c, item)))
                        .or_insert_with(|| (category_name(c), 0.0))
                        .1 += q;
                }
                truth.push(pair.truth);
            }
            let records = lines
                .into_iter()
                .map(|((day, item_id), (category_id, quantity))| TransactionRecord {
                    user_id: user_id.clone(),
                    order_id: format!("{user_id}-{day}"),
                    order_date: config.start_date + Days::new(u64::from(day)),
                    item_id,
                    category_id,
                    quantity,
                })
                .collect();
            Ok((records, truth))
        })
        .collect::<Result<_>>()?;
    let mut out = SynthOutput {
        records: Vec::new(),
        truth: Vec::new(),
    };
    for (r, t) in per_user {
        out.records.extend(r);
        out.truth.extend(t);
    }
    Ok(out)
}

/// `user_id,category_id,mean_gap,events`: the drawn mean gap in days and the
/// number of purchase events generated for the pair.
pub fn write_truth<W: Write>(writer: W, truth: &[TruthRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["user_id", "category_id", "mean_gap", "events"])?;
    for t in truth {
        w.write_record([&t.user_id, &t.category_id, &format!("{:?}", t.mean_gap), &t.events.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<truth>", e))?;
    Ok(())
}
