//! One function per subcommand. Stages talk to each other only through
//! files in the work directory; each checks that its inputs exist before
//! doing anything and names the stage that produces a missing one.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use pcic_core::config::RunConfig;
use pcic_core::eval::{cross_validate, generate_synthetic, holdout, write_truth};
use pcic_core::features::{read_feature_matrix, write_feature_matrix, FeatureVector, FEATURE_NAMES, FEATURE_SCHEMA_VERSION};
use pcic_core::forecast::write_forecast_diagnostics;
use pcic_core::icrank::{compute_item_stats, tune_alpha_beta, TuningUser};
use pcic_core::ingest::{
    build_histories, build_labels, parse_transactions, repurchased_items, temporal_split, write_transactions,
    FormatOptions, TemporalSplit, DATE_FORMAT,
};
use pcic_core::pcmodel::{
    load_model, permutation_importance, read_category_scores, save_model, write_category_scores, write_training_log,
    MODEL_FORMAT_VERSION,
};
use pcic_core::pipeline::{group_scores, prepare_split, recommend_users, rows_of, score_rows, train_on_users};
use pcic_core::recommend::{repurchase_rates, top_k, write_recommendations};
use pcic_core::seed;
use pcic_core::survival::write_life_tables;

const TRANSACTIONS: &str = "transactions.csv";
const INGEST_REPORT: &str = "ingest_report.txt";
const SPLIT: &str = "split.txt";
const LABELS: &str = "labels.csv";
const LIFE_TABLES: &str = "life_tables.csv";
const FORECASTS: &str = "forecasts.csv";
const FEATURES: &str = "features.csv";
const MODEL: &str = "model.txt";
const TRAINING_LOG: &str = "training_log.csv";
const VALIDATION_USERS: &str = "validation_users.txt";
const SCORES: &str = "category_scores.csv";
const IC_PARAMS: &str = "ic_params.txt";
const METRICS: &str = "metrics.csv";
const METRICS_TABLE: &str = "metrics_table.txt";
const FOLD_DETAILS: &str = "fold_details.csv";
const IMPORTANCE: &str = "importance.csv";
const SYNTH_TRUTH: &str = "synth_truth.csv";

/// Holdout stream for the validation users of the `train` stage.
const HOLDOUT_STREAM: u64 = 0x7a;

fn work(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.work_dir.join(name)
}

fn require(cfg: &RunConfig, name: &str, stage: &str) -> Result<PathBuf> {
    let path = work(cfg, name);
    if !path.is_file() {
        bail!("{} not found; run `pcic {stage}` first", path.display());
    }
    Ok(path)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .with_context(|| format!("writing {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn write_manifest(cfg: &RunConfig, stage: &str) -> Result<()> {
    let command: Vec<String> = std::env::args().collect();
    let text = format!(
        "# command: {}\n# stage: {stage}\n# seed: {}\n# pcic {}, feature schema {FEATURE_SCHEMA_VERSION}, model format {MODEL_FORMAT_VERSION}\n{}",
        command.join(" "),
        cfg.pipeline.seed,
        env!("CARGO_PKG_VERSION"),
        cfg.to_text()
    );
    write_text(&work(cfg, &format!("manifest_{stage}.txt")), &text)?;
    write_text(&work(cfg, "manifest.txt"), &text)
}

/// Canonical transactions re-read and split under the current settings.
fn load_split(cfg: &RunConfig) -> Result<TemporalSplit> {
    let path = require(cfg, TRANSACTIONS, "ingest")?;
    let parsed = parse_transactions(&path, &FormatOptions::default())?;
    let histories = build_histories(&parsed.records);
    Ok(temporal_split(&histories, &cfg.pipeline.split)?)
}

fn read_features(cfg: &RunConfig) -> Result<Vec<FeatureVector>> {
    let path = require(cfg, FEATURES, "featurize")?;
    let f = File::open(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(read_feature_matrix(f)?)
}

fn read_user_list(path: &Path) -> Result<BTreeSet<String>> {
    Ok(read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

fn users_of(rows: &[FeatureVector]) -> Vec<&str> {
    let set: BTreeSet<&str> = rows.iter().map(|r| r.user_id.as_str()).collect();
    set.into_iter().collect()
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let out = generate_synthetic(&cfg.synth)?;
    write_transactions(create(&cfg.input)?, &out.records)?;
    let truth = work(cfg, SYNTH_TRUTH);
    write_truth(create(&truth)?, &out.truth)?;
    println!(
        "wrote {} transaction rows to {} and {} truth rows to {}",
        out.records.len(),
        cfg.input.display(),
        out.truth.len(),
        truth.display()
    );
    Ok(())
}

pub fn ingest(cfg: &RunConfig) -> Result<()> {
    let parsed = parse_transactions(&cfg.input, &cfg.format)
        .with_context(|| format!("ingesting {}", cfg.input.display()))?;
    write_transactions(create(&work(cfg, TRANSACTIONS))?, &parsed.records)?;
    let histories = build_histories(&parsed.records);
    let categories: BTreeSet<&str> = parsed.records.iter().map(|r| r.category_id.as_str()).collect();
    let items: BTreeSet<&str> = parsed.records.iter().map(|r| r.item_id.as_str()).collect();
    let first = parsed.records.iter().map(|r| r.order_date).min();
    let last = parsed.records.iter().map(|r| r.order_date).max();
    let date = |d: Option<NaiveDate>| d.map(|d| d.format(DATE_FORMAT).to_string()).unwrap_or_default();
    let report = format!(
        "input = {}\nrows = {}\nrejected = {}\nmerged = {}\nrecords = {}\nusers = {}\ncategories = {}\nitems = {}\nfirst_date = {}\nlast_date = {}\n",
        cfg.input.display(),
        parsed.total_rows,
        parsed.rejected,
        parsed.merged,
        parsed.records.len(),
        histories.len(),
        categories.len(),
        items.len(),
        date(first),
        date(last),
    );
    write_text(&work(cfg, INGEST_REPORT), &report)?;
    print!("{report}");
    Ok(())
}

fn split_summary(split: &TemporalSplit, label_rows: usize) -> String {
    format!(
        "split_date = {}\nusers = {}\nlabel_rows = {label_rows}\n",
        split.split_date.format(DATE_FORMAT),
        split.users.len()
    )
}

pub fn split(cfg: &RunConfig) -> Result<()> {
    let split = load_split(cfg)?;
    let labels = build_labels(&split);
    let mut w = create(&work(cfg, LABELS))?;
    writeln!(w, "user_id,category_id,label")?;
    for ((u, c), l) in &labels.labels {
        writeln!(w, "{u},{c},{l}")?;
    }
    w.flush()?;
    let summary = split_summary(&split, labels.len());
    write_text(&work(cfg, SPLIT), &summary)?;
    print!("{summary}");
    Ok(())
}

fn recorded_split_date(cfg: &RunConfig) -> Result<String> {
    let path = require(cfg, SPLIT, "split")?;
    read_text(&path)?
        .lines()
        .find_map(|l| l.strip_prefix("split_date = ").map(str::to_string))
        .with_context(|| format!("{} has no split_date line", path.display()))
}

pub fn featurize(cfg: &RunConfig) -> Result<()> {
    let recorded = recorded_split_date(cfg)?;
    let split = load_split(cfg)?;
    let current = split.split_date.format(DATE_FORMAT).to_string();
    if recorded != current {
        bail!("split date changed from {recorded} to {current}; rerun `pcic split` with the same settings");
    }
    let corpus = prepare_split(split, &cfg.pipeline)?;
    write_life_tables(create(&work(cfg, LIFE_TABLES))?, corpus.life_tables.values())?;
    write_forecast_diagnostics(create(&work(cfg, FORECASTS))?, &corpus.forecasts)?;
    write_feature_matrix(create(&work(cfg, FEATURES))?, &corpus.rows)?;
    let positives = corpus.rows.iter().filter(|r| r.label == 1).count();
    println!(
        "{} feature rows ({} positive) over {} categories",
        corpus.rows.len(),
        positives,
        corpus.life_tables.len()
    );
    Ok(())
}

fn holdout_users(cfg: &RunConfig, rows: &[FeatureVector]) -> (Vec<String>, Vec<String>) {
    holdout(
        &users_of(rows),
        cfg.pipeline.validation_fraction,
        seed::derive(cfg.pipeline.seed, HOLDOUT_STREAM, 0),
    )
}

fn as_refs(v: &[String]) -> BTreeSet<&str> {
    v.iter().map(String::as_str).collect()
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let rows = read_features(cfg)?;
    let (train_users, validation_users) = holdout_users(cfg, &rows);
    let model = train_on_users(&rows, &as_refs(&train_users), &as_refs(&validation_users), &cfg.pipeline.train)?;
    write_text(&work(cfg, MODEL), &save_model(&model.params, &model.stats))?;
    write_training_log(create(&work(cfg, TRAINING_LOG))?, &model.report)?;
    let mut list = validation_users.join("\n");
    list.push('\n');
    write_text(&work(cfg, VALIDATION_USERS), &list)?;
    println!(
        "trained on {} users, validated on {}; best epoch {} of {} (validation loss {:.6})",
        train_users.len(),
        validation_users.len(),
        model.report.best_epoch,
        model.report.epochs_run,
        model.report.best_validation_loss
    );
    Ok(())
}

pub fn score(cfg: &RunConfig) -> Result<()> {
    let rows = read_features(cfg)?;
    let model_path = require(cfg, MODEL, "train")?;
    let (params, stats) = load_model(&read_text(&model_path)?)?;
    let scores: Vec<_> = score_rows(&params, &stats, &rows).into_values().flatten().collect();
    write_category_scores(create(&work(cfg, SCORES))?, &scores)?;
    println!("scored {} (user, category) pairs", scores.len());
    Ok(())
}

pub fn recommend(cfg: &RunConfig) -> Result<()> {
    let scores_path = require(cfg, SCORES, "score")?;
    let validation = read_user_list(&require(cfg, VALIDATION_USERS, "train")?)?;
    let scores = group_scores(read_category_scores(File::open(&scores_path)?)?);
    let split = load_split(cfg)?;
    let item_stats = compute_item_stats(&split);

    let ic = if cfg.pipeline.tune_ic {
        let tuning: Vec<TuningUser> = split
            .users
            .iter()
            .filter(|u| validation.contains(u.user_id()))
            .map(|u| TuningUser {
                pc_ranks: scores.get(u.user_id()).cloned().unwrap_or_default(),
                item_stats: item_stats.get(u.user_id()).cloned().unwrap_or_default(),
                truth: repurchased_items(u),
            })
            .collect();
        match tune_alpha_beta(&tuning, cfg.pipeline.ic.grid_step, cfg.pipeline.merge_order) {
            Ok((ic, _)) => ic,
            Err(pcic_core::Error::Empty(_)) => {
                eprintln!("no validation user repurchased anything; keeping configured alpha/beta");
                cfg.pipeline.ic
            }
            Err(e) => return Err(e.into()),
        }
    } else {
        cfg.pipeline.ic
    };
    write_text(
        &work(cfg, IC_PARAMS),
        &format!("ic.alpha = {}\nic.beta = {}\n", ic.alpha, ic.beta),
    )?;

    let rates = repurchase_rates(&split);
    let filter = cfg.filter_in_recommend.then_some(&cfg.pipeline.filter);
    let lists = recommend_users(&split, &item_stats, &rates, &scores, &ic, cfg.pipeline.merge_order, filter);
    let flat: Vec<_> = lists.values().flat_map(|l| top_k(l, cfg.top_k).iter().cloned()).collect();
    let path = work(cfg, &format!("recommendations.{}", cfg.output_format));
    write_recommendations(create(&path)?, &flat, cfg.output_format)?;
    println!(
        "alpha = {}, beta = {}; {} recommendations for {} users in {}",
        ic.alpha,
        ic.beta,
        flat.len(),
        lists.len(),
        path.display()
    );
    Ok(())
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    require(cfg, FEATURES, "featurize")?;
    let split = load_split(cfg)?;
    let corpus = prepare_split(split, &cfg.pipeline)?;
    let outcome = cross_validate(&corpus, &cfg.pipeline)?;
    outcome.report.write_csv(create(&work(cfg, METRICS))?)?;
    let table = outcome.report.to_table();
    write_text(&work(cfg, METRICS_TABLE), &table)?;
    let mut w = create(&work(cfg, FOLD_DETAILS))?;
    writeln!(w, "fold,alpha,beta,best_epoch,epochs_run,best_validation_loss")?;
    for f in &outcome.folds {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            f.fold, f.ic.alpha, f.ic.beta, f.training.best_epoch, f.training.epochs_run, f.training.best_validation_loss
        )?;
    }
    w.flush()?;
    print!("{table}");
    Ok(())
}

pub fn importance(cfg: &RunConfig) -> Result<()> {
    let rows = read_features(cfg)?;
    let (params, stats) = load_model(&read_text(&require(cfg, MODEL, "train")?)?)?;
    let validation = read_user_list(&require(cfg, VALIDATION_USERS, "train")?)?;
    let normalise = |users: &BTreeSet<&str>| -> Vec<FeatureVector> {
        rows_of(&rows, users)
            .into_iter()
            .map(|r| FeatureVector { x: stats.apply(&r.x), ..r })
            .collect()
    };
    let val_refs: BTreeSet<&str> = validation.iter().map(String::as_str).collect();
    let train_refs: BTreeSet<&str> = users_of(&rows).into_iter().filter(|u| !val_refs.contains(u)).collect();
    let weights = cfg.pipeline.train.class_weights(&normalise(&train_refs));
    let report = permutation_importance(
        &params,
        &normalise(&val_refs),
        weights,
        cfg.importance_repeats,
        cfg.pipeline.seed,
    );

    let mut by_column: BTreeMap<usize, usize> = BTreeMap::new();
    for (rank, (col, _)) in report.ranked().into_iter().enumerate() {
        by_column.insert(col, rank + 1);
    }
    let mut w = create(&work(cfg, IMPORTANCE))?;
    writeln!(w, "column,feature,importance,rank")?;
    for (col, name) in FEATURE_NAMES.iter().enumerate() {
        writeln!(w, "{},{name},{:?},{}", col + 1, report.importance[col], by_column[&col])?;
    }
    w.flush()?;
    println!("baseline validation loss {:.6}", report.baseline_loss);
    for (col, imp) in report.ranked() {
        println!("{:>2} {:<32} {imp:+.6}", col + 1, FEATURE_NAMES[col]);
    }
    Ok(())
}
