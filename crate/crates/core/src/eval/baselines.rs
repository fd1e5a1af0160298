//! Popularity, personal-frequency and repeat-probability baselines. Each
//! ranks only items the user already bought; ties go to the item id.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ingest::{SplitUser, TemporalSplit};
use crate::recommend::repurchase_rates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Baseline {
    TopSell,
    FBought,
    Rcp,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::TopSell, Baseline::FBought, Baseline::Rcp];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::TopSell => "TopSell",
            Baseline::FBought => "FBought",
            Baseline::Rcp => "RCP",
        }
    }
}

impl FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownBaseline(s.to_string()))
    }
}

/// Corpus statistics shared by the baselines, from feature-period data only.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BaselineStats {
    /// Baskets containing each item, over all users.
    pub purchase_counts: BTreeMap<String, u64>,
    pub repurchase_rates: BTreeMap<String, f64>,
}

impl BaselineStats {
    pub fn from_split(split: &TemporalSplit) -> Self {
        let mut purchase_counts = BTreeMap::new();
        for u in &split.users {
            for b in &u.features.baskets {
                for l in &b.lines {
                    *purchase_counts.entry(l.item_id.clone()).or_insert(0) += 1;
                }
            }
        }
        Self {
            purchase_counts,
            repurchase_rates: repurchase_rates(split),
        }
    }

    /// The global TopSell order before restricting it to a user.
    pub fn top_sell_order(&self) -> Vec<&str> {
        let mut items: Vec<(&str, u64)> = self.purchase_counts.iter().map(|(i, &c)| (i.as_str(), c)).collect();
        items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        items.into_iter().map(|(i, _)| i).collect()
    }
}

fn user_counts(user: &SplitUser) -> BTreeMap<&str, u64> {
    let mut counts = BTreeMap::new();
    for b in &user.features.baskets {
        for l in &b.lines {
            *counts.entry(l.item_id.as_str()).or_insert(0) += 1;
        }
    }
    counts
}

fn ranked_by<F: Fn(&str) -> f64>(items: Vec<&str>, score: F) -> Vec<String> {
    let mut scored: Vec<(&str, f64)> = items.into_iter().map(|i| (i, score(i))).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    scored.into_iter().map(|(i, _)| i.to_string()).collect()
}

/// Ranked item list of one user under a baseline.
pub fn run_baseline(baseline: Baseline, user: &SplitUser, stats: &BaselineStats) -> Vec<String> {
    let counts = user_counts(user);
    let items: Vec<&str> = counts.keys().copied().collect();
    match baseline {
        Baseline::TopSell => ranked_by(items, |i| stats.purchase_counts.get(i).copied().unwrap_or(0) as f64),
        Baseline::FBought => ranked_by(items, |i| counts[i] as f64),
        Baseline::Rcp => ranked_by(items, |i| stats.repurchase_rates.get(i).copied().unwrap_or(0.0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{build_histories, temporal_split, SplitConfig, TransactionRecord};
    use chrono::NaiveDate;

    fn rec(user: &str, day: u32, item: &str) -> TransactionRecord {
        TransactionRecord {
            user_id: user.into(),
            order_id: format!("{user}-{day}"),
            order_date: NaiveDate::from_ymd_opt(2023, 1, 1).unwrap() + chrono::Days::new(u64::from(day)),
            item_id: item.into(),
            category_id: "c".into(),
            quantity: 1.0,
        }
    }

    fn split(records: &[TransactionRecord]) -> TemporalSplit {
        let mut records = records.to_vec();
        // A late basket so that everything above falls in the feature period.
        records.push(rec("zz", 200, "late"));
        temporal_split(&build_histories(&records), &SplitConfig::default()).unwrap()
    }

    #[test]
    fn fbought_orders_by_personal_frequency() {
        let s = split(&[rec("u", 1, "b"), rec("u", 2, "a"), rec("u", 3, "a"), rec("u", 4, "a")]);
        let stats = BaselineStats::from_split(&s);
        assert_eq!(run_baseline(Baseline::FBought, &s.users[0], &stats), ["a", "b"]);
    }

    #[test]
    fn repeat_probability_counts_buyers() {
        let mut records = Vec::new();
        for u in 0..10 {
            let user = format!("u{u}");
            records.push(rec(&user, 1, "x"));
            if u < 4 {
                records.push(rec(&user, 5, "x"));
            }
        }
        let s = split(&records);
        let stats = BaselineStats::from_split(&s);
        assert_eq!(stats.repurchase_rates["x"], 0.4);
    }

    #[test]
    fn top_sell_is_shared_then_restricted() {
        let s = split(&[
            rec("u", 1, "a"),
            rec("v", 1, "a"),
            rec("v", 2, "b"),
            rec("v", 3, "b"),
            rec("w", 1, "b"),
            rec("w", 2, "c"),
        ]);
        let stats = BaselineStats::from_split(&s);
        assert_eq!(stats.top_sell_order()[..3], ["b", "a", "c"]);
        assert_eq!(run_baseline(Baseline::TopSell, &s.users[0], &stats), ["a"]);
        assert_eq!(run_baseline(Baseline::TopSell, &s.users[2], &stats), ["b", "c"]);
        assert_eq!(run_baseline(Baseline::TopSell, &s.users[1], &stats), ["b", "a"]);
    }

    #[test]
    fn names_parse() {
        assert_eq!("rcp".parse::<Baseline>().unwrap(), Baseline::Rcp);
        assert_eq!("TopSell".parse::<Baseline>().unwrap(), Baseline::TopSell);
        assert!(matches!("Random".parse::<Baseline>(), Err(Error::UnknownBaseline(_))));
    }
}
