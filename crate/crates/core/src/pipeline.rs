//! End-to-end glue shared by the command line stages and the
//! cross-validation harness.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::error::Result;
use crate::eval::baselines::BaselineStats;
use crate::features::{assemble_feature_matrix, normalize, FeatureVector, NormStats};
use crate::forecast::{compute_forecasts, ForecastConfig, PairForecast};
use crate::icrank::{compute_item_stats, rank_user_items, IcConfig, ItemStats};
use crate::ingest::{build_labels, temporal_split, LabelSet, PairKey, SplitConfig, SplitUser, TemporalSplit, UserHistory};
use crate::pcmodel::{score_categories, train_pc_model, CategoryScore, MlpParams, TrainConfig, TrainingReport};
use crate::recommend::{apply_filters, lookback_purchase_counts, merge_pc_ic, FilterConfig, MergeOrder, RankedRecommendation};
use crate::survival::{build_life_tables, compute_curves, LifeTable, SurvivalCurves};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub split: SplitConfig,
    pub forecast: ForecastConfig,
    pub train: TrainConfig,
    pub ic: IcConfig,
    /// Search alpha/beta on validation users instead of using `ic` as given.
    pub tune_ic: bool,
    pub merge_order: MergeOrder,
    pub filter: FilterConfig,
    /// Apply deployment filters to evaluated lists too.
    pub filter_in_eval: bool,
    pub ks: Vec<usize>,
    pub folds: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            split: SplitConfig::default(),
            forecast: ForecastConfig::default(),
            train: TrainConfig::default(),
            ic: IcConfig::default(),
            tune_ic: true,
            merge_order: MergeOrder::RoundRobin,
            filter: FilterConfig::default(),
            filter_in_eval: false,
            ks: vec![5, 10],
            folds: 5,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Everything computed once per corpus. None of it looks at the label
/// period except the labels themselves, so folds can share it.
#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub split: TemporalSplit,
    pub labels: LabelSet,
    pub life_tables: BTreeMap<String, LifeTable>,
    pub curves: BTreeMap<String, SurvivalCurves>,
    pub forecasts: BTreeMap<PairKey, PairForecast>,
    /// Unnormalised feature rows in (user, category) order.
    pub rows: Vec<FeatureVector>,
    pub item_stats: BTreeMap<String, Vec<ItemStats>>,
    pub baseline_stats: BaselineStats,
}

pub fn curves_by_category(tables: &BTreeMap<String, LifeTable>) -> BTreeMap<String, SurvivalCurves> {
    tables
        .par_iter()
        .map(|(c, t)| (c.clone(), compute_curves(t)))
        .collect()
}

pub fn prepare(histories: &[UserHistory], config: &PipelineConfig) -> Result<PreparedCorpus> {
    let split = temporal_split(histories, &config.split)?;
    prepare_split(split, config)
}

pub fn prepare_split(split: TemporalSplit, config: &PipelineConfig) -> Result<PreparedCorpus> {
    let labels = build_labels(&split);
    let life_tables = build_life_tables(&split);
    let curves = curves_by_category(&life_tables);
    let forecasts = compute_forecasts(&split, &config.forecast);
    let rows = assemble_feature_matrix(&split, &curves, &forecasts, &labels);
    let item_stats = compute_item_stats(&split);
    let baseline_stats = BaselineStats::from_split(&split);
    Ok(PreparedCorpus {
        split,
        labels,
        life_tables,
        curves,
        forecasts,
        rows,
        item_stats,
        baseline_stats,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: MlpParams,
    pub stats: NormStats,
    pub report: TrainingReport,
}

pub fn rows_of(rows: &[FeatureVector], users: &BTreeSet<&str>) -> Vec<FeatureVector> {
    rows.iter()
        .filter(|r| users.contains(r.user_id.as_str()))
        .cloned()
        .collect()
}

/// Fits normalisation on the training users' rows, then trains.
pub fn train_on_users(
    rows: &[FeatureVector],
    train_users: &BTreeSet<&str>,
    validation_users: &BTreeSet<&str>,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    let (train, stats) = normalize(&rows_of(rows, train_users), None)?;
    let (validation, _) = normalize(&rows_of(rows, validation_users), Some(&stats))?;
    let (params, report) = train_pc_model(&train, &validation, config)?;
    Ok(TrainedModel { params, stats, report })
}

/// Category ranks grouped by user.
pub fn score_rows(params: &MlpParams, stats: &NormStats, rows: &[FeatureVector]) -> BTreeMap<String, Vec<CategoryScore>> {
    let normalised: Vec<FeatureVector> = rows
        .iter()
        .map(|r| FeatureVector {
            x: stats.apply(&r.x),
            ..r.clone()
        })
        .collect();
    group_scores(score_categories(params, &normalised))
}

pub fn group_scores(scores: Vec<CategoryScore>) -> BTreeMap<String, Vec<CategoryScore>> {
    let mut out: BTreeMap<String, Vec<CategoryScore>> = BTreeMap::new();
    for s in scores {
        out.entry(s.user_id.clone()).or_default().push(s);
    }
    out
}

/// Merged (and optionally filtered) list of every user present in `scores`.
pub fn recommend_users(
    split: &TemporalSplit,
    item_stats: &BTreeMap<String, Vec<ItemStats>>,
    repurchase_rates: &BTreeMap<String, f64>,
    scores: &BTreeMap<String, Vec<CategoryScore>>,
    ic: &IcConfig,
    order: MergeOrder,
    filter: Option<&FilterConfig>,
) -> BTreeMap<String, Vec<RankedRecommendation>> {
    let empty = Vec::new();
    let users: BTreeMap<&str, &SplitUser> = split.users.iter().map(|u| (u.user_id(), u)).collect();
    scores
        .par_iter()
        .map(|(user, pc)| {
            let stats = item_stats.get(user).unwrap_or(&empty);
            let merged = merge_pc_ic(pc, &rank_user_items(stats, ic), order);
            let list = match (filter, users.get(user.as_str())) {
                (Some(f), Some(u)) => apply_filters(
                    &merged,
                    f,
                    &lookback_purchase_counts(u, f.lookback_months),
                    repurchase_rates,
                ),
                _ => merged,
            };
            (user.clone(), list)
        })
        .collect()
}
