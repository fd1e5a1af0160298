//! Item ranking inside a category from personal purchase frequency, recency
//! and units bought per trip, plus the exhaustive alpha/beta search.
//!
//! Frequency and recency are first turned into ranks (most frequent is 1,
//! most recent is 1), blended as `alpha * recency_rank + beta * frequency_rank`,
//! ranked again, and divided by the item's units-per-trip before rounding up:
//! `IR = ceil(rank(blend) / nib)`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::metrics::ndcg_at_k;
use crate::ingest::{SplitUser, TemporalSplit};
use crate::pcmodel::CategoryScore;
use crate::recommend::{merge_pc_ic, MergeOrder};

#[derive(Debug, Clone, PartialEq)]
pub struct ItemStats {
    pub user_id: String,
    pub item_id: String,
    pub category_id: String,
    /// Baskets containing the item.
    pub freq: u32,
    /// Days from the last purchase to the user's reference date.
    pub days_since_purchase: u32,
    /// Mean units per containing basket, at least 1.
    pub nib: f64,
}

pub fn user_item_stats(user: &SplitUser) -> Vec<ItemStats> {
    struct Acc<'a> {
        category: &'a str,
        freq: u32,
        units: f64,
        last: chrono::NaiveDate,
    }
    let mut acc: BTreeMap<&str, Acc> = BTreeMap::new();
    for b in &user.features.baskets {
        for l in &b.lines {
            let e = acc.entry(l.item_id.as_str()).or_insert(Acc {
                category: &l.category_id,
                freq: 0,
                units: 0.0,
                last: b.date,
            });
            e.freq += 1;
            e.units += l.quantity;
            e.last = e.last.max(b.date);
        }
    }
    let reference = user.reference_date();
    let mut out: Vec<ItemStats> = acc
        .into_iter()
        .map(|(item, a)| ItemStats {
            user_id: user.user_id().to_string(),
            item_id: item.to_string(),
            category_id: a.category.to_string(),
            freq: a.freq,
            days_since_purchase: (reference - a.last).num_days().max(0) as u32,
            nib: (a.units / f64::from(a.freq)).max(1.0),
        })
        .collect();
    out.sort_by(|a, b| (&a.category_id, &a.item_id).cmp(&(&b.category_id, &b.item_id)));
    out
}

/// Item statistics of every user, grouped by user id.
pub fn compute_item_stats(split: &TemporalSplit) -> BTreeMap<String, Vec<ItemStats>> {
    split
        .users
        .par_iter()
        .map(|u| (u.user_id().to_string(), user_item_stats(u)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcConfig {
    pub alpha: f64,
    pub beta: f64,
    pub grid_step: f64,
}

impl Default for IcConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            grid_step: 0.1,
        }
    }
}

impl IcConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.alpha) || !unit(self.beta) || !(self.grid_step > 0.0 && self.grid_step <= 1.0) {
            return Err(Error::Config(
                "ic.alpha and ic.beta must lie in [0, 1] and ic.grid_step in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Grid values 0, step, 2*step, ..., 1.
    pub fn grid(&self) -> Vec<f64> {
        let n = (1.0 / self.grid_step).round().max(1.0) as usize;
        (0..=n).map(|i| i as f64 / n as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemRank {
    pub item_id: String,
    pub category_id: String,
    /// Final item rank after dividing by units-per-trip.
    pub ir: u32,
    /// Rank of the blended score, before the units-per-trip division.
    pub blended_rank: u32,
    pub freq: u32,
    pub days_since_purchase: u32,
}

/// Frequency descending, then recency ascending, then item id.
pub fn tie_chain(freq_a: u32, days_a: u32, item_a: &str, freq_b: u32, days_b: u32, item_b: &str) -> Ordering {
    freq_b
        .cmp(&freq_a)
        .then(days_a.cmp(&days_b))
        .then(item_a.cmp(item_b))
}

fn chain(a: &ItemStats, b: &ItemStats) -> Ordering {
    tie_chain(a.freq, a.days_since_purchase, &a.item_id, b.freq, b.days_since_purchase, &b.item_id)
}

/// Blend of the two ranks on a fixed grid, so that jointly rescaling alpha
/// and beta cannot flip a tie through rounding.
fn blend_key(alpha: f64, beta: f64, recency_rank: usize, frequency_rank: usize) -> i64 {
    let total = alpha + beta;
    if total <= 0.0 {
        return 0;
    }
    let v = (alpha / total) * recency_rank as f64 + (beta / total) * frequency_rank as f64;
    (v * 1e9).round() as i64
}

/// Ranks the items of one (user, category). Returned in final order.
pub fn rank_items_in_category(stats: &[&ItemStats], config: &IcConfig) -> Vec<ItemRank> {
    let n = stats.len();
    let mut by_freq: Vec<usize> = (0..n).collect();
    by_freq.sort_by(|&a, &b| chain(stats[a], stats[b]));
    let mut frequency_rank = vec![0; n];
    for (pos, &i) in by_freq.iter().enumerate() {
        frequency_rank[i] = pos + 1;
    }
    let mut by_recency: Vec<usize> = (0..n).collect();
    by_recency.sort_by(|&a, &b| {
        stats[a]
            .days_since_purchase
            .cmp(&stats[b].days_since_purchase)
            .then(chain(stats[a], stats[b]))
    });
    let mut recency_rank = vec![0; n];
    for (pos, &i) in by_recency.iter().enumerate() {
        recency_rank[i] = pos + 1;
    }

    let keys: Vec<i64> = (0..n)
        .map(|i| blend_key(config.alpha, config.beta, recency_rank[i], frequency_rank[i]))
        .collect();
    let mut by_blend: Vec<usize> = (0..n).collect();
    by_blend.sort_by(|&a, &b| keys[a].cmp(&keys[b]).then(chain(stats[a], stats[b])));

    let mut ranked: Vec<(usize, ItemRank)> = by_blend
        .iter()
        .enumerate()
        .map(|(pos, &i)| {
            let s = stats[i];
            let blended_rank = (pos + 1) as u32;
            let ir = (f64::from(blended_rank) / s.nib.max(1.0)).ceil().max(1.0) as u32;
            (
                i,
                ItemRank {
                    item_id: s.item_id.clone(),
                    category_id: s.category_id.clone(),
                    ir,
                    blended_rank,
                    freq: s.freq,
                    days_since_purchase: s.days_since_purchase,
                },
            )
        })
        .collect();
    ranked.sort_by(|(a, ra), (b, rb)| ra.ir.cmp(&rb.ir).then(chain(stats[*a], stats[*b])));
    ranked.into_iter().map(|(_, r)| r).collect()
}

/// Item ranks of one user for every category, keyed by category id.
pub fn rank_user_items(stats: &[ItemStats], config: &IcConfig) -> BTreeMap<String, Vec<ItemRank>> {
    let mut by_category: BTreeMap<&str, Vec<&ItemStats>> = BTreeMap::new();
    for s in stats {
        by_category.entry(s.category_id.as_str()).or_default().push(s);
    }
    by_category
        .into_iter()
        .map(|(c, items)| (c.to_string(), rank_items_in_category(&items, config)))
        .collect()
}

/// One validation user for the alpha/beta search.
#[derive(Debug, Clone, PartialEq)]
pub struct TuningUser {
    pub pc_ranks: Vec<CategoryScore>,
    pub item_stats: Vec<ItemStats>,
    /// Items repurchased in the label period.
    pub truth: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub alpha: f64,
    pub beta: f64,
    pub ndcg: f64,
}

pub const TUNING_K: usize = 10;

fn mean_ndcg(users: &[&TuningUser], config: &IcConfig, order: MergeOrder) -> f64 {
    let total: f64 = users
        .iter()
        .map(|u| {
            let ic = rank_user_items(&u.item_stats, config);
            let merged = merge_pc_ic(&u.pc_ranks, &ic, order);
            let items: Vec<&str> = merged.iter().map(|r| r.item_id.as_str()).collect();
            ndcg_at_k(&items, &u.truth, TUNING_K)
        })
        .sum();
    total / users.len() as f64
}

/// Exhaustive search of NDCG@10 over the alpha/beta grid. Ties go to the
/// smaller alpha, then the smaller beta.
pub fn tune_alpha_beta(users: &[TuningUser], grid_step: f64, order: MergeOrder) -> Result<(IcConfig, Vec<GridCell>)> {
    let scored: Vec<&TuningUser> = users.iter().filter(|u| !u.truth.is_empty()).collect();
    if scored.is_empty() {
        return Err(Error::Empty("validation users with repurchased items"));
    }
    let base = IcConfig {
        grid_step,
        ..IcConfig::default()
    };
    base.validate()?;
    let grid = base.grid();
    let pairs: Vec<(f64, f64)> = grid
        .iter()
        .flat_map(|&a| grid.iter().map(move |&b| (a, b)))
        .collect();
    let cells: Vec<GridCell> = pairs
        .par_iter()
        .map(|&(alpha, beta)| {
            let cfg = IcConfig { alpha, beta, grid_step };
            GridCell {
                alpha,
                beta,
                ndcg: mean_ndcg(&scored, &cfg, order),
            }
        })
        .collect();
    let mut best = cells[0];
    for c in &cells[1..] {
        if c.ndcg > best.ndcg {
            best = *c;
        }
    }
    Ok((
        IcConfig {
            alpha: best.alpha,
            beta: best.beta,
            grid_step,
        },
        cells,
    ))
}
