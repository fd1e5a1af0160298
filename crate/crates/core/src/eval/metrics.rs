//! Binary-relevance top-K metrics. Both return 0 for an empty truth set;
//! callers exclude such users from averages.

use std::collections::BTreeSet;

pub fn recall_at_k<S: AsRef<str>>(list: &[S], truth: &BTreeSet<String>, k: usize) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = list.iter().take(k).filter(|i| truth.contains(i.as_ref())).count();
    hits as f64 / truth.len() as f64
}

pub fn ndcg_at_k<S: AsRef<str>>(list: &[S], truth: &BTreeSet<String>, k: usize) -> f64 {
    if truth.is_empty() || k == 0 {
        return 0.0;
    }
    let discount = |pos: usize| 1.0 / ((pos + 2) as f64).log2();
    let dcg: f64 = list
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| truth.contains(i.as_ref()))
        .map(|(pos, _)| discount(pos))
        .sum();
    let idcg: f64 = (0..truth.len().min(k)).map(discount).sum();
    dcg / idcg
}
