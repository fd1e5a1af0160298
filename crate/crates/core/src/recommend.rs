//! Merging category ranks with item ranks, deployment filters and output.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use chrono::Months;
use serde_json::json;

use crate::error::{Error, Result};
use crate::icrank::{tie_chain, ItemRank};
use crate::ingest::{SplitUser, TemporalSplit};
use crate::pcmodel::CategoryScore;

pub const OUTPUT_HEADER: [&str; 7] = ["user_id", "rank", "item_id", "category_id", "rk_pc", "rk_ic", "pc_score"];

#[derive(Debug, Clone, PartialEq)]
pub struct RankedRecommendation {
    pub user_id: String,
    pub rank: usize,
    pub item_id: String,
    pub category_id: String,
    pub rk_pc: usize,
    pub rk_ic: u32,
    pub pc_score: f64,
    freq: u32,
    days_since_purchase: u32,
}

impl RankedRecommendation {
    pub fn new(user_id: &str, item: &ItemRank, rk_pc: usize, pc_score: f64) -> Self {
        Self {
            user_id: user_id.to_string(),
            rank: 0,
            item_id: item.item_id.clone(),
            category_id: item.category_id.clone(),
            rk_pc,
            rk_ic: item.ir,
            pc_score,
            freq: item.freq,
            days_since_purchase: item.days_since_purchase,
        }
    }
}

/// How category rank and item rank combine into one list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MergeOrder {
    /// Item rank first: every category's first items, then every second item.
    #[default]
    RoundRobin,
    /// Category rank first: all of the best category, then the next.
    CategoryFirst,
}

impl std::str::FromStr for MergeOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "round_robin" => Ok(Self::RoundRobin),
            "category_first" => Ok(Self::CategoryFirst),
            other => Err(Error::Config(format!(
                "unknown merge order {other:?} (expected round_robin or category_first)"
            ))),
        }
    }
}

impl std::fmt::Display for MergeOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::RoundRobin => "round_robin",
            Self::CategoryFirst => "category_first",
        })
    }
}

fn merge_cmp(a: &RankedRecommendation, b: &RankedRecommendation, order: MergeOrder) -> Ordering {
    let primary = match order {
        MergeOrder::RoundRobin => (a.rk_ic, a.rk_pc).cmp(&(b.rk_ic, b.rk_pc)),
        MergeOrder::CategoryFirst => (a.rk_pc, a.rk_ic).cmp(&(b.rk_pc, b.rk_ic)),
    };
    primary.then_with(|| {
        tie_chain(a.freq, a.days_since_purchase, &a.item_id, b.freq, b.days_since_purchase, &b.item_id)
    })
}

/// Merges one user's category ranks with their per-category item ranks.
/// Items of a category without a category rank go after all ranked ones.
pub fn merge_pc_ic(
    pc_ranks: &[CategoryScore],
    ic_ranks: &BTreeMap<String, Vec<ItemRank>>,
    order: MergeOrder,
) -> Vec<RankedRecommendation> {
    let user_id = pc_ranks.first().map(|c| c.user_id.as_str()).unwrap_or("");
    let by_category: BTreeMap<&str, &CategoryScore> =
        pc_ranks.iter().map(|c| (c.category_id.as_str(), c)).collect();
    let unranked = pc_ranks.len() + 1;
    let mut out: Vec<RankedRecommendation> = ic_ranks
        .iter()
        .flat_map(|(category, items)| {
            let (rk_pc, score) = by_category
                .get(category.as_str())
                .map_or((unranked, 0.0), |c| (c.rank, c.score));
            items.iter().map(move |it| RankedRecommendation::new(user_id, it, rk_pc, score))
        })
        .collect();
    out.sort_by(|a, b| merge_cmp(a, b, order));
    rerank(&mut out);
    out
}

fn rerank(list: &mut [RankedRecommendation]) {
    for (i, r) in list.iter_mut().enumerate() {
        r.rank = i + 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub min_item_purchases: u32,
    pub lookback_months: u32,
    pub repurchase_rate_threshold: f64,
    pub excluded_category_ids: BTreeSet<String>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_item_purchases: 2,
            lookback_months: 6,
            repurchase_rate_threshold: 0.0,
            excluded_category_ids: BTreeSet::new(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lookback_months == 0 {
            return Err(Error::Config("filter.lookback_months must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.repurchase_rate_threshold) {
            return Err(Error::Config("filter.repurchase_rate_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Baskets per item within the last `months` months before the reference date.
pub fn lookback_purchase_counts(user: &SplitUser, months: u32) -> BTreeMap<String, u32> {
    let reference = user.reference_date();
    let start = reference
        .checked_sub_months(Months::new(months))
        .unwrap_or(chrono::NaiveDate::MIN);
    let mut counts = BTreeMap::new();
    for b in user.features.baskets.iter().filter(|b| b.date > start && b.date <= reference) {
        for l in &b.lines {
            *counts.entry(l.item_id.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Fraction of each item's buyers who bought it in at least two baskets,
/// over the feature period of every user.
pub fn repurchase_rates(split: &TemporalSplit) -> BTreeMap<String, f64> {
    let mut buyers: BTreeMap<&str, (u32, u32)> = BTreeMap::new();
    for u in &split.users {
        let mut per_item: BTreeMap<&str, u32> = BTreeMap::new();
        for b in &u.features.baskets {
            for l in &b.lines {
                *per_item.entry(&l.item_id).or_insert(0) += 1;
            }
        }
        for (item, n) in per_item {
            let e = buyers.entry(item).or_insert((0, 0));
            e.0 += 1;
            if n >= 2 {
                e.1 += 1;
            }
        }
    }
    buyers
        .into_iter()
        .map(|(item, (all, repeat))| (item.to_string(), f64::from(repeat) / f64::from(all)))
        .collect()
}

/// Drops filtered items and closes the rank gaps; survivors keep their order.
pub fn apply_filters(
    list: &[RankedRecommendation],
    config: &FilterConfig,
    lookback_counts: &BTreeMap<String, u32>,
    rates: &BTreeMap<String, f64>,
) -> Vec<RankedRecommendation> {
    let mut out: Vec<RankedRecommendation> = list
        .iter()
        .filter(|r| lookback_counts.get(&r.item_id).copied().unwrap_or(0) >= config.min_item_purchases)
        .filter(|r| rates.get(&r.item_id).copied().unwrap_or(0.0) >= config.repurchase_rate_threshold)
        .filter(|r| !config.excluded_category_ids.contains(&r.category_id))
        .cloned()
        .collect();
    rerank(&mut out);
    out
}

pub fn top_k(list: &[RankedRecommendation], k: usize) -> &[RankedRecommendation] {
    &list[..k.min(list.len())]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Csv,
    Jsonl,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(Error::Config(format!("unknown output format {other:?} (expected csv or jsonl)"))),
        }
    }
}

impl std::fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Csv => "csv",
            Self::Jsonl => "jsonl",
        })
    }
}

pub fn write_recommendations<W: Write>(mut writer: W, lists: &[RankedRecommendation], format: OutputFormat) -> Result<()> {
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(writer);
            w.write_record(OUTPUT_HEADER)?;
            for r in lists {
                w.write_record([
                    r.user_id.as_str(),
                    &r.rank.to_string(),
                    &r.item_id,
                    &r.category_id,
                    &r.rk_pc.to_string(),
                    &r.rk_ic.to_string(),
                    &r.pc_score.to_string(),
                ])?;
            }
            w.flush().map_err(|e| Error::io("<recommendations>", e))?;
        }
        OutputFormat::Jsonl => {
            for r in lists {
                let line = json!({
                    "user_id": r.user_id,
                    "rank": r.rank,
                    "item_id": r.item_id,
                    "category_id": r.category_id,
                    "rk_pc": r.rk_pc,
                    "rk_ic": r.rk_ic,
                    "pc_score": r.pc_score,
                });
                writeln!(writer, "{line}").map_err(|e| Error::io("<recommendations>", e))?;
            }
        }
    }
    Ok(())
}
