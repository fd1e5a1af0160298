//! Five-fold cross-validation by user.
//!
//! Users are ordered by a seeded hash of their id and dealt round-robin into
//! folds, so fold sizes differ by at most one and the assignment does not
//! depend on input order. Inside each fold a further hash ordering of the
//! training users holds out the validation share used for early stopping
//! and the alpha/beta search.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::baselines::{run_baseline, Baseline};
use crate::eval::metrics::{ndcg_at_k, recall_at_k};
use crate::eval::report::{FoldMetrics, MetricsReport};
use crate::icrank::{tune_alpha_beta, IcConfig, TuningUser};
use crate::ingest::{repurchased_categories, repurchased_items, SplitUser};
use crate::pcmodel::{TrainConfig, TrainingReport};
use crate::pipeline::{recommend_users, score_rows, train_on_users, PipelineConfig, PreparedCorpus};
use crate::seed;

pub const MIN_CV_USERS: usize = 50;
pub const PCIC: &str = "PCIC";
/// Category-level ranking quality of the classifier alone.
pub const PC_CATEGORY: &str = "PC (category)";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

fn hash_order<'a>(users: &[&'a str], key: u64) -> Vec<&'a str> {
    let mut v = users.to_vec();
    v.sort_by(|a, b| seed::hash_str(key, a).cmp(&seed::hash_str(key, b)).then(a.cmp(b)));
    v.dedup();
    v
}

/// Splits users into (train, validation) by seeded hash order, holding out
/// `round(fraction * n)` users (at least one when `fraction > 0`, and never
/// all of them). Both halves come back sorted.
pub fn holdout(user_ids: &[&str], fraction: f64, key: u64) -> (Vec<String>, Vec<String>) {
    let ordered = hash_order(user_ids, key);
    let n_val = ((ordered.len() as f64 * fraction).round() as usize)
        .max(usize::from(fraction > 0.0))
        .min(ordered.len().saturating_sub(1));
    let mut validation: Vec<String> = ordered[..n_val].iter().map(|u| u.to_string()).collect();
    let mut train: Vec<String> = ordered[n_val..].iter().map(|u| u.to_string()).collect();
    validation.sort();
    train.sort();
    (train, validation)
}

pub fn assign_folds(user_ids: &[&str], folds: usize, validation_fraction: f64, seed_value: u64) -> Result<Vec<FoldSplit>> {
    if folds < 2 {
        return Err(Error::Config("eval.folds must be at least 2".into()));
    }
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::Config("eval.validation_fraction must lie in [0, 1)".into()));
    }
    let ordered = hash_order(user_ids, seed_value);
    if ordered.len() < MIN_CV_USERS.max(folds) {
        return Err(Error::TooFewUsers {
            found: ordered.len(),
            min: MIN_CV_USERS.max(folds),
        });
    }
    Ok((0..folds)
        .map(|fold| {
            let (test, rest): (Vec<(usize, &str)>, Vec<(usize, &str)>) =
                ordered.iter().copied().enumerate().partition(|(i, _)| i % folds == fold);
            let rest: Vec<&str> = rest.into_iter().map(|(_, u)| u).collect();
            let (train, validation) = holdout(&rest, validation_fraction, seed::derive(seed_value, 7, fold as u64));
            let mut test: Vec<String> = test.into_iter().map(|(_, u)| u.to_string()).collect();
            test.sort();
            FoldSplit {
                fold,
                train,
                validation,
                test,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldDetail {
    pub fold: usize,
    pub ic: IcConfig,
    pub training: TrainingReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOutcome {
    pub report: MetricsReport,
    pub folds: Vec<FoldDetail>,
}

fn metric_values<S: AsRef<str>>(
    lists: &[(Vec<S>, BTreeSet<String>)],
    ks: &[usize],
    with_recall: bool,
) -> (usize, BTreeMap<String, f64>) {
    let scored: Vec<&(Vec<S>, BTreeSet<String>)> = lists.iter().filter(|(_, t)| !t.is_empty()).collect();
    let n = scored.len();
    let mut values = BTreeMap::new();
    for &k in ks {
        let mean = |f: &dyn Fn(&[S], &BTreeSet<String>) -> f64| {
            if n == 0 {
                0.0
            } else {
                scored.iter().map(|(l, t)| f(l, t)).sum::<f64>() / n as f64
            }
        };
        values.insert(format!("ndcg@{k}"), mean(&|l, t| ndcg_at_k(l, t, k)));
        if with_recall {
            values.insert(format!("recall@{k}"), mean(&|l, t| recall_at_k(l, t, k)));
        }
    }
    (n, values)
}

fn as_set(v: &[String]) -> BTreeSet<&str> {
    v.iter().map(String::as_str).collect()
}

fn fold_train_config(config: &TrainConfig, seed_value: u64, fold: usize) -> TrainConfig {
    TrainConfig {
        seed: seed::derive(config.seed ^ seed_value, 0x51, fold as u64),
        ..config.clone()
    }
}

fn run_fold(corpus: &PreparedCorpus, config: &PipelineConfig, split: &FoldSplit) -> Result<(Vec<FoldMetrics>, FoldDetail)> {
    let (train, validation, test) = (as_set(&split.train), as_set(&split.validation), as_set(&split.test));
    let train_cfg = fold_train_config(&config.train, config.seed, split.fold);
    let model = train_on_users(&corpus.rows, &train, &validation, &train_cfg)?;

    let users: BTreeMap<&str, &SplitUser> = corpus.split.users.iter().map(|u| (u.user_id(), u)).collect();
    let score = |set: &BTreeSet<&str>| {
        let rows: Vec<_> = corpus
            .rows
            .iter()
            .filter(|r| set.contains(r.user_id.as_str()))
            .cloned()
            .collect();
        score_rows(&model.params, &model.stats, &rows)
    };

    let ic = if config.tune_ic {
        let tuning: Vec<TuningUser> = score(&validation)
            .into_iter()
            .map(|(user, pc_ranks)| TuningUser {
                item_stats: corpus.item_stats.get(&user).cloned().unwrap_or_default(),
                truth: users.get(user.as_str()).map(|u| repurchased_items(u)).unwrap_or_default(),
                pc_ranks,
            })
            .collect();
        match tune_alpha_beta(&tuning, config.ic.grid_step, config.merge_order) {
            Ok((cfg, _)) => cfg,
            // A fold whose validation users repurchased nothing keeps the given weights.
            Err(Error::Empty(_)) => config.ic,
            Err(e) => return Err(e),
        }
    } else {
        config.ic
    };

    let test_scores = score(&test);
    let filter = config.filter_in_eval.then_some(&config.filter);
    let lists = recommend_users(
        &corpus.split,
        &corpus.item_stats,
        &corpus.baseline_stats.repurchase_rates,
        &test_scores,
        &ic,
        config.merge_order,
        filter,
    );

    let test_users: Vec<&SplitUser> = test.iter().filter_map(|u| users.get(u).copied()).collect();
    let truth: BTreeMap<&str, BTreeSet<String>> = test_users.iter().map(|u| (u.user_id(), repurchased_items(u))).collect();

    let mut out = Vec::new();
    let mut push = |algorithm: &str, (users, values): (usize, BTreeMap<String, f64>)| {
        out.push(FoldMetrics {
            fold: split.fold,
            algorithm: algorithm.to_string(),
            users,
            values,
        });
    };

    let pcic: Vec<(Vec<String>, BTreeSet<String>)> = test_users
        .iter()
        .map(|u| {
            let items = lists
                .get(u.user_id())
                .map(|l| l.iter().map(|r| r.item_id.clone()).collect())
                .unwrap_or_default();
            (items, truth[u.user_id()].clone())
        })
        .collect();
    push(PCIC, metric_values(&pcic, &config.ks, true));

    for b in Baseline::ALL {
        let lists: Vec<(Vec<String>, BTreeSet<String>)> = test_users
            .iter()
            .map(|u| (run_baseline(b, u, &corpus.baseline_stats), truth[u.user_id()].clone()))
            .collect();
        push(b.name(), metric_values(&lists, &config.ks, true));
    }

    let categories: Vec<(Vec<String>, BTreeSet<String>)> = test_users
        .iter()
        .map(|u| {
            let ranked = test_scores
                .get(u.user_id())
                .map(|s| s.iter().map(|c| c.category_id.clone()).collect())
                .unwrap_or_default();
            (ranked, repurchased_categories(u))
        })
        .collect();
    push(PC_CATEGORY, metric_values(&categories, &config.ks, true));

    Ok((
        out,
        FoldDetail {
            fold: split.fold,
            ic,
            training: model.report,
        },
    ))
}

/// Trains and evaluates every fold in parallel; folds are reported in order.
pub fn cross_validate(corpus: &PreparedCorpus, config: &PipelineConfig) -> Result<CvOutcome> {
    if config.ks.is_empty() || config.ks.contains(&0) {
        return Err(Error::Config("eval.ks must be a non-empty list of positive cut-offs".into()));
    }
    let ids: Vec<&str> = corpus.split.users.iter().map(|u| u.user_id()).collect();
    let splits = assign_folds(&ids, config.folds, config.validation_fraction, config.seed)?;
    let results: Vec<(Vec<FoldMetrics>, FoldDetail)> = splits
        .par_iter()
        .map(|s| run_fold(corpus, config, s))
        .collect::<Result<_>>()?;
    let mut report = MetricsReport::default();
    let mut folds = Vec::new();
    for (metrics, detail) in results {
        report.folds.extend(metrics);
        folds.push(detail);
    }
    Ok(CvOutcome { report, folds })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("user{i}")).collect()
    }

    #[test]
    fn hundred_users_split_evenly() {
        let names = ids(100);
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let folds = assign_folds(&refs, 5, 0.1, 3).unwrap();
        let mut all = BTreeSet::new();
        for f in &folds {
            assert_eq!((f.test.len(), f.train.len(), f.validation.len()), (20, 72, 8));
            for u in &f.test {
                assert!(all.insert(u.clone()), "user tested twice");
            }
            let inside: BTreeSet<&String> = f.train.iter().chain(&f.validation).chain(&f.test).collect();
            assert_eq!(inside.len(), 100);
        }
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn assignment_is_seeded_and_order_free() {
        let names = ids(60);
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut reversed = refs.clone();
        reversed.reverse();
        let a = assign_folds(&refs, 5, 0.1, 9).unwrap();
        assert_eq!(a, assign_folds(&refs, 5, 0.1, 9).unwrap());
        assert_eq!(a, assign_folds(&reversed, 5, 0.1, 9).unwrap());
        assert_ne!(a, assign_folds(&refs, 5, 0.1, 10).unwrap());
    }

    #[test]
    fn too_few_users() {
        let names = ids(49);
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        assert!(matches!(
            assign_folds(&refs, 5, 0.1, 0),
            Err(Error::TooFewUsers { found: 49, min: 50 })
        ));
    }

    #[test]
    fn empty_truth_users_are_excluded() {
        let lists = vec![
            (vec!["a", "b"], ["a".to_string()].into()),
            (vec!["a"], BTreeSet::new()),
        ];
        let (n, v) = metric_values(&lists, &[1], true);
        assert_eq!(n, 1);
        assert_eq!(v["ndcg@1"], 1.0);
        assert_eq!(v["recall@1"], 1.0);
    }
}
