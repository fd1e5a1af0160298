//! Run configuration: line-oriented `key = value` text with dotted section
//! keys. `#` starts a comment, values may be double-quoted, unknown keys are
//! errors, and every key has a default.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::synth::SynthConfig;
use crate::ingest::{FormatOptions, SplitProtocol};
use crate::pcmodel::{Optimizer, PositiveWeight};
use crate::pipeline::PipelineConfig;
use crate::recommend::OutputFormat;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input: PathBuf,
    pub work_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub format: FormatOptions,
    pub pipeline: PipelineConfig,
    pub top_k: usize,
    pub output_format: OutputFormat,
    pub filter_in_recommend: bool,
    pub importance_repeats: usize,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::from("transactions.csv"),
            work_dir: PathBuf::from("work"),
            threads: 0,
            format: FormatOptions::default(),
            pipeline: PipelineConfig::default(),
            top_k: 10,
            output_format: OutputFormat::Csv,
            filter_in_recommend: true,
            importance_repeats: 5,
            synth: SynthConfig::default(),
        }
    }
}

/// Every key with a one-line description, in manifest order.
pub const KEYS: &[(&str, &str)] = &[
    ("run.seed", "master seed for folds, shuffles and tie-free hashing"),
    ("run.threads", "worker threads, 0 = all cores"),
    ("paths.input", "transaction CSV read by `ingest`"),
    ("paths.work_dir", "directory holding every stage artifact"),
    ("ingest.delimiter", "single-byte field delimiter"),
    ("ingest.max_reject_fraction", "abort when more rows than this are rejected"),
    ("ingest.user_column", "header of the user id column; alias col.user"),
    ("ingest.order_column", "header of the order id column; alias col.order"),
    ("ingest.date_column", "header of the order date column (YYYY-MM-DD); alias col.date"),
    ("ingest.item_column", "header of the item id column; alias col.item"),
    ("ingest.category_column", "header of the category id column; alias col.category"),
    ("ingest.quantity_column", "header of the quantity column; alias col.quantity"),
    ("split.label_window_days", "length m of the label window in days"),
    ("split.history_days", "feature history kept before the label window"),
    ("split.protocol", "window | last_basket"),
    ("split.engaged_only", "keep only users shopping many categories"),
    ("split.engaged_category_threshold", "engaged users buy from more categories than this"),
    ("forecast.feature_cap", "clamp of both forecast features, in days"),
    ("forecast.rate_epsilon", "floor of the forecast consumption rate"),
    ("train.learning_rate", "optimiser step size"),
    ("train.epochs", "maximum training epochs"),
    ("train.batch_size", "mini-batch size"),
    ("train.seed", "initialisation and shuffle seed"),
    ("train.patience", "epochs without validation improvement before stopping"),
    ("train.positive_weight", "ratio (negatives/positives) or a fixed positive number"),
    ("train.optimizer", "adam | sgd"),
    ("train.validation_fraction", "share of training users held out for validation"),
    ("ic.alpha", "weight of the recency rank"),
    ("ic.beta", "weight of the frequency rank"),
    ("ic.grid_step", "alpha/beta search grid spacing"),
    ("ic.tune", "search alpha/beta on validation users"),
    ("recommend.merge_order", "round_robin | category_first"),
    ("recommend.top_k", "list length written by `recommend`"),
    ("recommend.format", "csv | jsonl"),
    ("recommend.apply_filters", "apply deployment filters in `recommend`"),
    ("filter.min_item_purchases", "minimum purchases within the lookback"),
    ("filter.lookback_months", "lookback n in months"),
    ("filter.repurchase_rate_threshold", "drop items whose repurchase rate is below this; 0 disables"),
    ("filter.excluded_category_ids", "comma-separated categories never recommended"),
    ("eval.ks", "comma-separated metric cut-offs"),
    ("eval.folds", "cross-validation folds"),
    ("eval.apply_filters", "apply deployment filters to evaluated lists"),
    ("importance.repeats", "shuffles per feature"),
    ("synth.n_users", "synthetic users"),
    ("synth.n_categories", "synthetic categories"),
    ("synth.items_per_category", "items per synthetic category"),
    ("synth.horizon_days", "days of synthetic history"),
    ("synth.gap_shape", "gamma shape of per-pair mean gaps"),
    ("synth.gap_mean", "mean of per-pair mean gaps, in days"),
    ("synth.gap_regularity", "gamma shape of individual gaps, 1 = exponential"),
    ("synth.category_participation", "probability a user shops a category"),
    ("synth.popularity_skew", "Zipf exponent of per-user item preference"),
    ("synth.quantity_lambda", "quantity is 1 + Poisson(lambda)"),
    ("synth.start_date", "first synthetic day"),
    ("synth.seed", "synthetic generator seed"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for `{key}`"))),
    }
}

fn list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = &mut self.pipeline;
        let s = &mut self.synth;
        let c = &mut self.format.columns;
        match key {
            "run.seed" => p.seed = parse(key, value)?,
            "run.threads" => self.threads = parse(key, value)?,
            "paths.input" => self.input = PathBuf::from(value),
            "paths.work_dir" => self.work_dir = PathBuf::from(value),
            "ingest.delimiter" => match value.as_bytes() {
                [b] => self.format.delimiter = *b,
                _ if value == "\\t" => self.format.delimiter = b'\t',
                _ => return Err(Error::Config(format!("`{key}` must be a single byte"))),
            },
            "ingest.max_reject_fraction" => self.format.max_reject_fraction = parse(key, value)?,
            "ingest.user_column" | "col.user" => c.user = value.to_string(),
            "ingest.order_column" | "col.order" => c.order = value.to_string(),
            "ingest.date_column" | "col.date" => c.date = value.to_string(),
            "ingest.item_column" | "col.item" => c.item = value.to_string(),
            "ingest.category_column" | "col.category" => c.category = value.to_string(),
            "ingest.quantity_column" | "col.quantity" => c.quantity = value.to_string(),
            "split.label_window_days" => p.split.label_window_days = parse(key, value)?,
            "split.history_days" => p.split.history_days = parse(key, value)?,
            "split.protocol" => {
                p.split.protocol = match value {
                    "window" => SplitProtocol::Window,
                    "last_basket" => SplitProtocol::LastBasket,
                    _ => return Err(Error::Config(format!("`{key}` must be window or last_basket"))),
                }
            }
            "split.engaged_only" => p.split.engaged_only = parse_bool(key, value)?,
            "split.engaged_category_threshold" => p.split.engaged_category_threshold = parse(key, value)?,
            "forecast.feature_cap" => p.forecast.feature_cap = parse(key, value)?,
            "forecast.rate_epsilon" => p.forecast.rate_epsilon = parse(key, value)?,
            "train.learning_rate" => p.train.learning_rate = parse(key, value)?,
            "train.epochs" => p.train.epochs = parse(key, value)?,
            "train.batch_size" => p.train.batch_size = parse(key, value)?,
            "train.seed" => p.train.seed = parse(key, value)?,
            "train.patience" => p.train.patience = parse(key, value)?,
            "train.positive_weight" => {
                p.train.positive_weight = match value {
                    "ratio" => PositiveWeight::Ratio,
                    v => PositiveWeight::Fixed(parse(key, v)?),
                }
            }
            "train.optimizer" => {
                p.train.optimizer = match value {
                    "adam" => Optimizer::Adam,
                    "sgd" => Optimizer::Sgd,
                    _ => return Err(Error::Config(format!("`{key}` must be adam or sgd"))),
                }
            }
            "train.validation_fraction" => p.validation_fraction = parse(key, value)?,
            "ic.alpha" => p.ic.alpha = parse(key, value)?,
            "ic.beta" => p.ic.beta = parse(key, value)?,
            "ic.grid_step" => p.ic.grid_step = parse(key, value)?,
            "ic.tune" => p.tune_ic = parse_bool(key, value)?,
            "recommend.merge_order" => p.merge_order = value.parse()?,
            "recommend.top_k" => self.top_k = parse(key, value)?,
            "recommend.format" => self.output_format = value.parse()?,
            "recommend.apply_filters" => self.filter_in_recommend = parse_bool(key, value)?,
            "filter.min_item_purchases" => p.filter.min_item_purchases = parse(key, value)?,
            "filter.lookback_months" => p.filter.lookback_months = parse(key, value)?,
            "filter.repurchase_rate_threshold" => p.filter.repurchase_rate_threshold = parse(key, value)?,
            "filter.excluded_category_ids" => {
                p.filter.excluded_category_ids = list(value).map(str::to_string).collect::<BTreeSet<_>>()
            }
            "eval.ks" => p.ks = list(value).map(|k| parse(key, k)).collect::<Result<_>>()?,
            "eval.folds" => p.folds = parse(key, value)?,
            "eval.apply_filters" => p.filter_in_eval = parse_bool(key, value)?,
            "importance.repeats" => self.importance_repeats = parse(key, value)?,
            "synth.n_users" => s.n_users = parse(key, value)?,
            "synth.n_categories" => s.n_categories = parse(key, value)?,
            "synth.items_per_category" => s.items_per_category = parse(key, value)?,
            "synth.horizon_days" => s.horizon_days = parse(key, value)?,
            "synth.gap_shape" => s.gap_shape = parse(key, value)?,
            "synth.gap_mean" => s.gap_mean = parse(key, value)?,
            "synth.gap_regularity" => s.gap_regularity = parse(key, value)?,
            "synth.category_participation" => s.category_participation = parse(key, value)?,
            "synth.popularity_skew" => s.popularity_skew = parse(key, value)?,
            "synth.quantity_lambda" => s.quantity_lambda = parse(key, value)?,
            "synth.start_date" => {
                s.start_date = chrono::NaiveDate::parse_from_str(value, crate::ingest::DATE_FORMAT)
                    .map_err(|_| Error::Config(format!("`{key}` must be a YYYY-MM-DD date")))?
            }
            "synth.seed" => s.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let p = &self.pipeline;
        let s = &self.synth;
        let c = &self.format.columns;
        let join = |v: Vec<String>| v.join(",");
        Some(match key {
            "run.seed" => p.seed.to_string(),
            "run.threads" => self.threads.to_string(),
            "paths.input" => self.input.display().to_string(),
            "paths.work_dir" => self.work_dir.display().to_string(),
            "ingest.delimiter" => match self.format.delimiter {
                b'\t' => "\\t".to_string(),
                b => char::from(b).to_string(),
            },
            "ingest.max_reject_fraction" => format!("{:?}", self.format.max_reject_fraction),
            "ingest.user_column" => c.user.clone(),
            "ingest.order_column" => c.order.clone(),
            "ingest.date_column" => c.date.clone(),
            "ingest.item_column" => c.item.clone(),
            "ingest.category_column" => c.category.clone(),
            "ingest.quantity_column" => c.quantity.clone(),
            "split.label_window_days" => p.split.label_window_days.to_string(),
            "split.history_days" => p.split.history_days.to_string(),
            "split.protocol" => match p.split.protocol {
                SplitProtocol::Window => "window".into(),
                SplitProtocol::LastBasket => "last_basket".into(),
            },
            "split.engaged_only" => p.split.engaged_only.to_string(),
            "split.engaged_category_threshold" => p.split.engaged_category_threshold.to_string(),
            "forecast.feature_cap" => format!("{:?}", p.forecast.feature_cap),
            "forecast.rate_epsilon" => format!("{:?}", p.forecast.rate_epsilon),
            "train.learning_rate" => format!("{:?}", p.train.learning_rate),
            "train.epochs" => p.train.epochs.to_string(),
            "train.batch_size" => p.train.batch_size.to_string(),
            "train.seed" => p.train.seed.to_string(),
            "train.patience" => p.train.patience.to_string(),
            "train.positive_weight" => match p.train.positive_weight {
                PositiveWeight::Ratio => "ratio".into(),
                PositiveWeight::Fixed(w) => format!("{w:?}"),
            },
            "train.optimizer" => match p.train.optimizer {
                Optimizer::Adam => "adam".into(),
                Optimizer::Sgd => "sgd".into(),
            },
            "train.validation_fraction" => format!("{:?}", p.validation_fraction),
            "ic.alpha" => format!("{:?}", p.ic.alpha),
            "ic.beta" => format!("{:?}", p.ic.beta),
            "ic.grid_step" => format!("{:?}", p.ic.grid_step),
            "ic.tune" => p.tune_ic.to_string(),
            "recommend.merge_order" => p.merge_order.to_string(),
            "recommend.top_k" => self.top_k.to_string(),
            "recommend.format" => self.output_format.to_string(),
            "recommend.apply_filters" => self.filter_in_recommend.to_string(),
            "filter.min_item_purchases" => p.filter.min_item_purchases.to_string(),
            "filter.lookback_months" => p.filter.lookback_months.to_string(),
            "filter.repurchase_rate_threshold" => format!("{:?}", p.filter.repurchase_rate_threshold),
            "filter.excluded_category_ids" => join(p.filter.excluded_category_ids.iter().cloned().collect()),
            "eval.ks" => join(p.ks.iter().map(|k| k.to_string()).collect()),
            "eval.folds" => p.folds.to_string(),
            "eval.apply_filters" => p.filter_in_eval.to_string(),
            "importance.repeats" => self.importance_repeats.to_string(),
            "synth.n_users" => s.n_users.to_string(),
            "synth.n_categories" => s.n_categories.to_string(),
            "synth.items_per_category" => s.items_per_category.to_string(),
            "synth.horizon_days" => s.horizon_days.to_string(),
            "synth.gap_shape" => format!("{:?}", s.gap_shape),
            "synth.gap_mean" => format!("{:?}", s.gap_mean),
            "synth.gap_regularity" => format!("{:?}", s.gap_regularity),
            "synth.category_participation" => format!("{:?}", s.category_participation),
            "synth.popularity_skew" => format!("{:?}", s.popularity_skew),
            "synth.quantity_lambda" => format!("{:?}", s.quantity_lambda),
            "synth.start_date" => s.start_date.format(crate::ingest::DATE_FORMAT).to_string(),
            "synth.seed" => s.seed.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines over the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            let value = value.trim();
            let value = value
                .strip_prefix('"')
                .and_then(|v| v.strip_suffix('"'))
                .unwrap_or(value);
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.pipeline;
        p.split.validate()?;
        p.train.validate()?;
        p.ic.validate()?;
        p.filter.validate()?;
        self.synth.validate()?;
        if !(p.forecast.feature_cap > 0.0 && p.forecast.rate_epsilon > 0.0) {
            return Err(Error::Config("forecast.feature_cap and forecast.rate_epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&p.validation_fraction) || p.validation_fraction == 0.0 {
            return Err(Error::Config("train.validation_fraction must lie in (0, 1)".into()));
        }
        if p.ks.is_empty() || p.ks.contains(&0) || self.top_k == 0 {
            return Err(Error::Config("eval.ks and recommend.top_k must be positive".into()));
        }
        if p.folds < 2 || self.importance_repeats == 0 {
            return Err(Error::Config("eval.folds must be at least 2 and importance.repeats positive".into()));
        }
        if !(0.0..=1.0).contains(&self.format.max_reject_fraction) {
            return Err(Error::Config("ingest.max_reject_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Every key with its current value, parseable by [`RunConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            let value = self.get(key).expect("listed key");
            let needs_quotes = value.is_empty() || value.contains('#') || value != value.trim();
            if needs_quotes {
                out.push_str(&format!("{key} = \"{value}\"\n"));
            } else {
                out.push_str(&format!("{key} = {value}\n"));
            }
        }
        out
    }

    /// `key  default  description` lines for help output.
    pub fn describe_keys() -> String {
        let defaults = Self::default();
        KEYS.iter()
            .map(|(k, d)| format!("  {k:<36} {:<18} {d}\n", defaults.get(k).expect("listed key")))
            .collect()
    }
}
