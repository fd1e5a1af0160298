//! The category classifier: 11 inputs, two sigmoid hidden layers of 10 and 5
//! units, and a two-way softmax trained on weighted cross-entropy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{FeatureVector, FEATURE_NAMES, NUM_FEATURES, NUM_PURCHASES};
use crate::features::NormStats;
use crate::seed;

pub const HIDDEN1: usize = 10;
pub const HIDDEN2: usize = 5;
pub const OUTPUTS: usize = 2;
pub const NUM_PARAMS: usize =
    HIDDEN1 * NUM_FEATURES + HIDDEN1 + HIDDEN2 * HIDDEN1 + HIDDEN2 + OUTPUTS * HIDDEN2 + OUTPUTS;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: [[f64; NUM_FEATURES]; HIDDEN1],
    pub b1: [f64; HIDDEN1],
    pub w2: [[f64; HIDDEN1]; HIDDEN2],
    pub b2: [f64; HIDDEN2],
    pub w3: [[f64; HIDDEN2]; OUTPUTS],
    pub b3: [f64; OUTPUTS],
}

impl MlpParams {
    pub fn zeros() -> Self {
        Self {
            w1: [[0.0; NUM_FEATURES]; HIDDEN1],
            b1: [0.0; HIDDEN1],
            w2: [[0.0; HIDDEN1]; HIDDEN2],
            b2: [0.0; HIDDEN2],
            w3: [[0.0; HIDDEN2]; OUTPUTS],
            b3: [0.0; OUTPUTS],
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros();
        fn fill<const I: usize, const O: usize>(w: &mut [[f64; I]; O], rng: &mut ChaCha8Rng) {
            let a = (6.0 / (I + O) as f64).sqrt();
            for row in w.iter_mut() {
                for v in row.iter_mut() {
                    *v = rng.random_range(-a..a);
                }
            }
        }
        fill(&mut p.w1, &mut rng);
        fill(&mut p.w2, &mut rng);
        fill(&mut p.w3, &mut rng);
        p
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .iter()
            .flatten()
            .chain(&self.b1)
            .chain(self.w2.iter().flatten())
            .chain(&self.b2)
            .chain(self.w3.iter().flatten())
            .chain(&self.b3)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .flatten()
            .chain(&mut self.b1)
            .chain(self.w2.iter_mut().flatten())
            .chain(&mut self.b2)
            .chain(self.w3.iter_mut().flatten())
            .chain(&mut self.b3)
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn affine<const I: usize, const O: usize>(w: &[[f64; I]; O], b: &[f64; O], x: &[f64; I]) -> [f64; O] {
    std::array::from_fn(|o| b[o] + w[o].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
}

fn softmax2(o: [f64; 2]) -> (f64, f64) {
    let m = o[0].max(o[1]);
    let e0 = (o[0] - m).exp();
    let e1 = (o[1] - m).exp();
    let s = e0 + e1;
    (e0 / s, e1 / s)
}

struct Activations {
    h1: [f64; HIDDEN1],
    h2: [f64; HIDDEN2],
    logits: [f64; OUTPUTS],
    p: [f64; OUTPUTS],
}

fn activations(params: &MlpParams, x: &[f64; NUM_FEATURES]) -> Activations {
    let h1 = affine(&params.w1, &params.b1, x).map(sigmoid);
    let h2 = affine(&params.w2, &params.b2, &h1).map(sigmoid);
    let logits = affine(&params.w3, &params.b3, &h2);
    let (p0, p1) = softmax2(logits);
    Activations {
        h1,
        h2,
        logits,
        p: [p0, p1],
    }
}

/// Class probabilities `(p0, p1)`.
pub fn forward(params: &MlpParams, x: &[f64; NUM_FEATURES]) -> (f64, f64) {
    let a = activations(params, x);
    (a.p[0], a.p[1])
}

/// Per-class sample weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights {
    pub negative: f64,
    pub positive: f64,
}

impl ClassWeights {
    pub const UNIT: Self = Self {
        negative: 1.0,
        positive: 1.0,
    };

    fn of(&self, label: u8) -> f64 {
        if label == 1 {
            self.positive
        } else {
            self.negative
        }
    }
}

/// `-ln softmax(o)[label]` in log-space, so saturated outputs still give a
/// finite (and growing) loss instead of `-ln 0`.
fn row_loss(o: &[f64; OUTPUTS], label: u8) -> f64 {
    let m = o[0].max(o[1]);
    m + ((o[0] - m).exp() + (o[1] - m).exp()).ln() - o[usize::from(label == 1)]
}

/// Weighted mean cross-entropy, normalised by the total weight.
pub fn mean_loss(params: &MlpParams, rows: &[FeatureVector], weights: ClassWeights) -> f64 {
    let mut total = 0.0;
    let mut wsum = 0.0;
    for r in rows {
        let w = weights.of(r.label);
        total += w * row_loss(&activations(params, &r.x).logits, r.label);
        wsum += w;
    }
    if wsum > 0.0 {
        total / wsum
    } else {
        0.0
    }
}

/// Loss and its gradient with respect to every parameter.
pub fn loss_and_gradient<'a>(
    params: &MlpParams,
    rows: impl IntoIterator<Item = &'a FeatureVector>,
    weights: ClassWeights,
) -> (f64, MlpParams) {
    let mut g = MlpParams::zeros();
    let mut total = 0.0;
    let mut wsum = 0.0;
    for r in rows {
        let w = weights.of(r.label);
        let a = activations(params, &r.x);
        total += w * row_loss(&a.logits, r.label);
        wsum += w;

        let y = [f64::from(u8::from(r.label != 1)), f64::from(r.label == 1)];
        let d_out: [f64; OUTPUTS] = std::array::from_fn(|c| w * (a.p[c] - y[c]));
        for c in 0..OUTPUTS {
            g.b3[c] += d_out[c];
            for i in 0..HIDDEN2 {
                g.w3[c][i] += d_out[c] * a.h2[i];
            }
        }
        let d_z2: [f64; HIDDEN2] = std::array::from_fn(|i| {
            let dh: f64 = (0..OUTPUTS).map(|c| params.w3[c][i] * d_out[c]).sum();
            dh * a.h2[i] * (1.0 - a.h2[i])
        });
        for i in 0..HIDDEN2 {
            g.b2[i] += d_z2[i];
            for j in 0..HIDDEN1 {
                g.w2[i][j] += d_z2[i] * a.h1[j];
            }
        }
        let d_z1: [f64; HIDDEN1] = std::array::from_fn(|j| {
            let dh: f64 = (0..HIDDEN2).map(|i| params.w2[i][j] * d_z2[i]).sum();
            dh * a.h1[j] * (1.0 - a.h1[j])
        });
        for j in 0..HIDDEN1 {
            g.b1[j] += d_z1[j];
            for k in 0..NUM_FEATURES {
                g.w1[j][k] += d_z1[j] * r.x[k];
            }
        }
    }
    if wsum > 0.0 {
        g.values_mut().for_each(|v| *v /= wsum);
        (total / wsum, g)
    } else {
        (0.0, g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PositiveWeight {
    /// negatives / positives of the training rows.
    Ratio,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub positive_weight: PositiveWeight,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 256,
            seed: 0,
            patience: 5,
            positive_weight: PositiveWeight::Ratio,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.epochs > 0
            && self.batch_size > 0
            && self.patience > 0
            && match self.positive_weight {
                PositiveWeight::Ratio => true,
                PositiveWeight::Fixed(w) => w > 0.0 && w.is_finite(),
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "train.learning_rate, epochs, batch_size, patience and positive_weight must be positive".into(),
            ))
        }
    }

    pub fn class_weights(&self, train: &[FeatureVector]) -> ClassWeights {
        let positive = match self.positive_weight {
            PositiveWeight::Fixed(w) => w,
            PositiveWeight::Ratio => {
                let pos = train.iter().filter(|r| r.label == 1).count();
                let neg = train.len() - pos;
                if pos == 0 || neg == 0 {
                    1.0
                } else {
                    neg as f64 / pos as f64
                }
            }
        };
        ClassWeights {
            negative: 1.0,
            positive,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub epochs_run: usize,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub class_weights: ClassWeights,
}

struct Adam {
    m: MlpParams,
    v: MlpParams,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, params: &mut MlpParams, grad: &MlpParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in params
            .values_mut()
            .zip(grad.values())
            .zip(self.m.values_mut())
            .zip(self.v.values_mut())
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Mini-batch training with early stopping on validation loss. Returns the
/// parameters of the best validation epoch.
pub fn train_pc_model(
    train: &[FeatureVector],
    validation: &[FeatureVector],
    config: &TrainConfig,
) -> Result<(MlpParams, TrainingReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training rows"));
    }
    if validation.is_empty() {
        return Err(Error::Empty("validation rows"));
    }
    let weights = config.class_weights(train);
    let mut params = MlpParams::xavier(seed::derive(config.seed, 1, 0));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, 2, 0));
    let mut adam = Adam {
        m: MlpParams::zeros(),
        v: MlpParams::zeros(),
        t: 0,
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut train_loss = Vec::new();
    let mut validation_loss = Vec::new();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(config.batch_size) {
            let (_, grad) = loss_and_gradient(&params, batch.iter().map(|&i| &train[i]), weights);
            match config.optimizer {
                Optimizer::Adam => adam.step(&mut params, &grad, config.learning_rate),
                Optimizer::Sgd => {
                    for (p, g) in params.values_mut().zip(grad.values()) {
                        *p -= config.learning_rate * g;
                    }
                }
            }
        }
        let tl = mean_loss(&params, train, weights);
        let vl = mean_loss(&params, validation, weights);
        if !tl.is_finite() || !vl.is_finite() || !params.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: if tl.is_finite() { vl } else { tl },
            });
        }
        train_loss.push(tl);
        validation_loss.push(vl);
        if vl < best_loss {
            best_loss = vl;
            best_epoch = epoch;
            best = params.clone();
        } else if epoch - best_epoch >= config.patience {
            break;
        }
    }

    let report = TrainingReport {
        epochs_run: train_loss.len(),
        best_epoch,
        best_validation_loss: best_loss,
        train_loss,
        validation_loss,
        class_weights: weights,
    };
    Ok((best, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryScore {
    pub user_id: String,
    pub category_id: String,
    /// Repurchase probability p1.
    pub score: f64,
    /// 1-based rank within the user.
    pub rank: usize,
}

/// Scores every row and ranks categories within each user: probability
/// descending, then purchase count descending, then category id.
pub fn score_categories(params: &MlpParams, rows: &[FeatureVector]) -> Vec<CategoryScore> {
    let mut by_user: BTreeMap<&str, Vec<(&FeatureVector, f64)>> = BTreeMap::new();
    for r in rows {
        by_user
            .entry(r.user_id.as_str())
            .or_default()
            .push((r, forward(params, &r.x).1));
    }
    rank_scored(by_user)
}

/// Ranks pre-computed scores with the same tie rule as [`score_categories`].
pub fn rank_scored(by_user: BTreeMap<&str, Vec<(&FeatureVector, f64)>>) -> Vec<CategoryScore> {
    let mut out = Vec::new();
    for (user, mut scored) in by_user {
        scored.sort_by(|(a, sa), (b, sb)| {
            sb.total_cmp(sa)
                .then(b.x[NUM_PURCHASES].total_cmp(&a.x[NUM_PURCHASES]))
                .then(a.category_id.cmp(&b.category_id))
        });
        out.extend(scored.into_iter().enumerate().map(|(i, (r, s))| CategoryScore {
            user_id: user.to_string(),
            category_id: r.category_id.clone(),
            score: s,
            rank: i + 1,
        }));
    }
    out
}

pub const SCORE_HEADER: [&str; 4] = ["user_id", "category_id", "score", "rank"];

pub fn write_category_scores<W: std::io::Write>(writer: W, scores: &[CategoryScore]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SCORE_HEADER)?;
    for s in scores {
        w.write_record([&s.user_id, &s.category_id, &format!("{:?}", s.score), &s.rank.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<category scores>", e))?;
    Ok(())
}

pub fn read_category_scores<R: std::io::Read>(reader: R) -> Result<Vec<CategoryScore>> {
    let mut r = csv::Reader::from_reader(reader);
    if r.headers()?.iter().ne(SCORE_HEADER) {
        return Err(Error::Parse("category score header mismatch".into()));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = |what: &str| Error::Parse(format!("bad {what} in category scores: {rec:?}"));
        out.push(CategoryScore {
            user_id: rec[0].to_string(),
            category_id: rec[1].to_string(),
            score: rec[2].parse().map_err(|_| bad("score"))?,
            rank: rec[3].parse().map_err(|_| bad("rank"))?,
        });
    }
    Ok(out)
}

/// `epoch,train_loss,validation_loss`.
pub fn write_training_log<W: std::io::Write>(writer: W, report: &TrainingReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "train_loss", "validation_loss"])?;
    for (i, (t, v)) in report.train_loss.iter().zip(&report.validation_loss).enumerate() {
        w.write_record([&(i + 1).to_string(), &format!("{t:?}"), &format!("{v:?}")])?;
    }
    w.flush().map_err(|e| Error::io("<training log>", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    pub baseline_loss: f64,
    /// Mean loss increase per feature column, in [`FEATURE_NAMES`] order.
    pub importance: [f64; NUM_FEATURES],
    pub per_repeat: Vec<[f64; NUM_FEATURES]>,
}

impl ImportanceReport {
    /// (column, importance) sorted by importance descending.
    pub fn ranked(&self) -> Vec<(usize, f64)> {
        let mut r: Vec<_> = self.importance.iter().copied().enumerate().collect();
        r.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        r
    }
}

/// Increase in validation loss after shuffling each column. The shuffle of
/// (column, repeat) depends only on `seed`, so repeat `r` is the same
/// whatever the total number of repeats.
pub fn permutation_importance(
    params: &MlpParams,
    rows: &[FeatureVector],
    weights: ClassWeights,
    repeats: usize,
    seed_value: u64,
) -> ImportanceReport {
    let baseline_loss = mean_loss(params, rows, weights);
    let mut per_repeat = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut inc = [0.0; NUM_FEATURES];
        for (j, slot) in inc.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, j as u64, r as u64));
            let mut column: Vec<f64> = rows.iter().map(|row| row.x[j]).collect();
            column.shuffle(&mut rng);
            let shuffled: Vec<FeatureVector> = rows
                .iter()
                .zip(&column)
                .map(|(row, &v)| {
                    let mut row = row.clone();
                    row.x[j] = v;
                    row
                })
                .collect();
            *slot = mean_loss(params, &shuffled, weights) - baseline_loss;
        }
        per_repeat.push(inc);
    }
    let importance = std::array::from_fn(|j| {
        if per_repeat.is_empty() {
            0.0
        } else {
            per_repeat.iter().map(|r| r[j]).sum::<f64>() / per_repeat.len() as f64
        }
    });
    ImportanceReport {
        baseline_loss,
        importance,
        per_repeat,
    }
}

fn write_matrix<const I: usize, const O: usize>(out: &mut String, name: &str, w: &[[f64; I]; O]) {
    let _ = writeln!(out, "{name} {O} {I}");
    for row in w {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
}

fn write_vector<const O: usize>(out: &mut String, name: &str, b: &[f64; O]) {
    let _ = writeln!(out, "{name} {O}");
    let line: Vec<String> = b.iter().map(|v| format!("{v:?}")).collect();
    let _ = writeln!(out, "{}", line.join(" "));
}

/// Text dump of the parameters and the normalisation the model was trained with.
pub fn save_model(params: &MlpParams, stats: &NormStats) -> String {
    let mut out = format!("pcic-pc-model {MODEL_FORMAT_VERSION}\nfeatures {}\n", FEATURE_NAMES.join(","));
    write_matrix(&mut out, "w1", &params.w1);
    write_vector(&mut out, "b1", &params.b1);
    write_matrix(&mut out, "w2", &params.w2);
    write_vector(&mut out, "b2", &params.b2);
    write_matrix(&mut out, "w3", &params.w3);
    write_vector(&mut out, "b3", &params.b3);
    out.push_str("norm_stats\n");
    out.push_str(&stats.to_text());
    out
}

struct Lines<'a> {
    inner: std::str::Lines<'a>,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<&'a str> {
        self.inner
            .next()
            .map(str::trim)
            .ok_or_else(|| Error::Model(format!("truncated model file, expected {what}")))
    }

    fn header(&mut self, name: &str, dims: &[usize]) -> Result<()> {
        let line = self.next(name)?;
        let expected = std::iter::once(name.to_string())
            .chain(dims.iter().map(usize::to_string))
            .collect::<Vec<_>>()
            .join(" ");
        if line != expected {
            return Err(Error::Model(format!("expected `{expected}`, found `{line}`")));
        }
        Ok(())
    }

    fn values<const N: usize>(&mut self, name: &str) -> Result<[f64; N]> {
        let line = self.next(name)?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Model(format!("bad number in `{name}`")))?;
        let arr: [f64; N] = vals
            .try_into()
            .map_err(|_| Error::Model(format!("`{name}` row has the wrong length")))?;
        if arr.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model(format!("non-finite value in `{name}`")));
        }
        Ok(arr)
    }

    fn matrix<const I: usize, const O: usize>(&mut self, name: &str) -> Result<[[f64; I]; O]> {
        self.header(name, &[O, I])?;
        let mut w = [[0.0; I]; O];
        for row in &mut w {
            *row = self.values::<I>(name)?;
        }
        Ok(w)
    }

    fn vector<const O: usize>(&mut self, name: &str) -> Result<[f64; O]> {
        self.header(name, &[O])?;
        self.values::<O>(name)
    }
}

pub fn load_model(text: &str) -> Result<(MlpParams, NormStats)> {
    let mut lines = Lines { inner: text.lines() };
    let magic = lines.next("header")?;
    if magic != format!("pcic-pc-model {MODEL_FORMAT_VERSION}") {
        return Err(Error::Model(format!("unsupported model header `{magic}`")));
    }
    let features = lines.next("feature list")?;
    if features != format!("features {}", FEATURE_NAMES.join(",")) {
        return Err(Error::Model(format!("feature schema mismatch: `{features}`")));
    }
    let params = MlpParams {
        w1: lines.matrix("w1")?,
        b1: lines.vector("b1")?,
        w2: lines.matrix("w2")?,
        b2: lines.vector("b2")?,
        w3: lines.matrix("w3")?,
        b3: lines.vector("b3")?,
    };
    if lines.next("norm_stats")? != "norm_stats" {
        return Err(Error::Model("missing norm_stats section".into()));
    }
    let rest: Vec<&str> = lines.inner.collect();
    let stats = NormStats::from_text(&rest.join("\n"))?;
    Ok((params, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(x: [f64; NUM_FEATURES], label: u8) -> FeatureVector {
        FeatureVector {
            user_id: "u".into(),
            category_id: "c".into(),
            x,
            label,
        }
    }

    fn random_x(rng: &mut ChaCha8Rng) -> [f64; NUM_FEATURES] {
        std::array::from_fn(|_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn zero_params_are_indifferent() {
        let (p0, p1) = forward(&MlpParams::zeros(), &[3.0; NUM_FEATURES]);
        assert_eq!((p0, p1), (0.5, 0.5));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..100 {
            let mut p = MlpParams::xavier(i);
            p.values_mut().for_each(|v| *v *= 4.0);
            let (p0, p1) = forward(&p, &random_x(&mut rng));
            assert!((p0 + p1 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_shift_leaves_output_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = MlpParams::xavier(1);
        let mut shifted = p.clone();
        shifted.b3[0] += 2.5;
        shifted.b3[1] += 2.5;
        for _ in 0..20 {
            let x = random_x(&mut rng);
            let (a0, a1) = forward(&p, &x);
            let (b0, b1) = forward(&shifted, &x);
            assert!((a0 - b0).abs() < 1e-12 && (a1 - b1).abs() < 1e-12);
        }
    }

    /// Straight-line forward pass written independently of `activations`.
    fn reference_forward(p: &MlpParams, x: &[f64; NUM_FEATURES]) -> (f64, f64) {
        let mut h1 = vec![0.0; HIDDEN1];
        for j in 0..HIDDEN1 {
            let mut z = p.b1[j];
            for k in 0..NUM_FEATURES {
                z += p.w1[j][k] * x[k];
            }
            h1[j] = 1.0 / (1.0 + (-z).exp());
        }
        let mut h2 = vec![0.0; HIDDEN2];
        for i in 0..HIDDEN2 {
            let mut z = p.b2[i];
            for j in 0..HIDDEN1 {
                z += p.w2[i][j] * h1[j];
            }
            h2[i] = 1.0 / (1.0 + (-z).exp());
        }
        let mut o = [p.b3[0], p.b3[1]];
        for c in 0..2 {
            for i in 0..HIDDEN2 {
                o[c] += p.w3[c][i] * h2[i];
            }
        }
        let e0 = o[0].exp();
        let e1 = o[1].exp();
        (e0 / (e0 + e1), e1 / (e0 + e1))
    }

    #[test]
    fn matches_reference_forward() {
        let p = MlpParams::xavier(0);
        let (a0, a1) = forward(&p, &[1.0; NUM_FEATURES]);
        let (b0, b1) = reference_forward(&p, &[1.0; NUM_FEATURES]);
        assert!((a0 - b0).abs() < 1e-12 && (a1 - b1).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<_> = (0..8).map(|i| fv(random_x(&mut rng), (i % 3 == 0) as u8)).collect();
        let weights = ClassWeights {
            negative: 1.0,
            positive: 2.0,
        };
        let params = MlpParams::xavier(5);
        let (_, g) = loss_and_gradient(&params, &rows, weights);
        let analytic: Vec<f64> = g.values().copied().collect();
        let h = 1e-5;
        for idx in 0..NUM_PARAMS {
            let bump = |delta: f64| {
                let mut p = params.clone();
                *p.values_mut().nth(idx).unwrap() += delta;
                mean_loss(&p, &rows, weights)
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            let denom = (analytic[idx].abs() + numeric.abs()).max(1e-10);
            assert!(
                (analytic[idx] - numeric).abs() / denom < 1e-4 || (analytic[idx] - numeric).abs() < 1e-10,
                "param {idx}: {} vs {numeric}",
                analytic[idx]
            );
        }
    }

    #[test]
    fn learns_a_linear_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let make = |rng: &mut ChaCha8Rng, n: usize| -> Vec<FeatureVector> {
            (0..n)
                .map(|_| {
                    let x = random_x(rng);
                    let label = (x[0] - 0.5 * x[3] + 0.25 > 0.0) as u8;
                    fv(x, label)
                })
                .collect()
        };
        let train = make(&mut rng, 200);
        let val = make(&mut rng, 60);
        let cfg = TrainConfig {
            learning_rate: 0.01,
            batch_size: 16,
            patience: 50,
            positive_weight: PositiveWeight::Fixed(1.0),
            ..TrainConfig::default()
        };
        let (params, report) = train_pc_model(&train, &val, &cfg).unwrap();
        assert!(report.epochs_run <= 50);
        let acc = train
            .iter()
            .filter(|r| (forward(&params, &r.x).1 > 0.5) as u8 == r.label)
            .count() as f64
            / train.len() as f64;
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    #[test]
    fn no_signal_means_no_better_than_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let train: Vec<_> = (0..400).map(|i| fv(random_x(&mut rng), (i % 2) as u8)).collect();
        let val: Vec<_> = (0..200).map(|i| fv(random_x(&mut rng), (i % 2) as u8)).collect();
        let (_, report) = train_pc_model(&train, &val, &TrainConfig::default()).unwrap();
        assert!(report.best_validation_loss >= 0.99 * std::f64::consts::LN_2, "{report:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let train: Vec<_> = (0..300).map(|i| fv(random_x(&mut rng), (i % 4 == 0) as u8)).collect();
        let val: Vec<_> = (0..50).map(|i| fv(random_x(&mut rng), (i % 4 == 0) as u8)).collect();
        let cfg = TrainConfig {
            seed: 42,
            epochs: 5,
            ..TrainConfig::default()
        };
        let a = train_pc_model(&train, &val, &cfg).unwrap();
        let b = train_pc_model(&train, &val, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(matches!(train_pc_model(&[], &val, &cfg), Err(Error::Empty(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let train: Vec<_> = (0..64).map(|i| fv([(i as f64 - 32.0) / 8.0; NUM_FEATURES], (i % 2) as u8)).collect();
        let cfg = TrainConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 1e307,
            ..TrainConfig::default()
        };
        assert!(matches!(train_pc_model(&train, &train, &cfg), Err(Error::Diverged { .. })));
    }

    fn scored(user: &str, cat: &str, purchases: f64) -> FeatureVector {
        let mut x = [0.0; NUM_FEATURES];
        x[NUM_PURCHASES] = purchases;
        FeatureVector {
            user_id: user.into(),
            category_id: cat.into(),
            x,
            label: 0,
        }
    }

    #[test]
    fn ranking_and_ties() {
        let a = scored("u", "A", 1.0);
        let b = scored("u", "B", 1.0);
        let mut m = BTreeMap::new();
        m.insert("u", vec![(&b, 0.4), (&a, 0.9)]);
        let r = rank_scored(m);
        assert_eq!((r[0].category_id.as_str(), r[0].rank), ("A", 1));
        assert_eq!((r[1].category_id.as_str(), r[1].rank), ("B", 2));

        let a = scored("u", "A", 5.0);
        let b = scored("u", "B", 2.0);
        let mut m = BTreeMap::new();
        m.insert("u", vec![(&b, 0.5), (&a, 0.5)]);
        assert_eq!(rank_scored(m)[0].category_id, "A");

        let only = scored("v", "Z", 0.0);
        let r = score_categories(&MlpParams::xavier(1), &[only]);
        assert_eq!(r[0].rank, 1);
    }

    #[test]
    fn rank_invariant_under_monotone_transform() {
        let rows: Vec<_> = (0..8).map(|i| scored("u", &format!("c{i}"), (i % 3) as f64)).collect();
        let scores = [0.1, 0.7, 0.7, 0.3, 0.9, 0.2, 0.3, 0.05];
        let rank = |f: &dyn Fn(f64) -> f64| {
            let mut m = BTreeMap::new();
            m.insert("u", rows.iter().zip(scores).map(|(r, s)| (r, f(s))).collect());
            rank_scored(m).into_iter().map(|s| s.category_id).collect::<Vec<_>>()
        };
        assert_eq!(rank(&|s| s), rank(&|s| (5.0 * s).exp() - 3.0));
    }

    #[test]
    fn constant_column_has_zero_importance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<_> = (0..100)
            .map(|i| {
                let mut x = random_x(&mut rng);
                x[4] = 1.0;
                fv(x, (i % 2) as u8)
            })
            .collect();
        let params = MlpParams::xavier(3);
        let rep = permutation_importance(&params, &rows, ClassWeights::UNIT, 3, 1);
        assert!(rep.importance[4].abs() < 1e-9);
    }

    #[test]
    fn repeats_average_single_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<_> = (0..80).map(|i| fv(random_x(&mut rng), (i % 2) as u8)).collect();
        let params = MlpParams::xavier(3);
        let five = permutation_importance(&params, &rows, ClassWeights::UNIT, 5, 9);
        let one = permutation_importance(&params, &rows, ClassWeights::UNIT, 1, 9);
        assert_eq!(one.per_repeat[0], five.per_repeat[0]);
        for j in 0..NUM_FEATURES {
            let mean = five.per_repeat.iter().map(|r| r[j]).sum::<f64>() / 5.0;
            assert!((mean - five.importance[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn category_scores_round_trip() {
        let scores = vec![
            CategoryScore { user_id: "u".into(), category_id: "c1".into(), score: 0.7123456789, rank: 1 },
            CategoryScore { user_id: "u".into(), category_id: "c2".into(), score: 0.1, rank: 2 },
        ];
        let mut buf = Vec::new();
        write_category_scores(&mut buf, &scores).unwrap();
        assert_eq!(read_category_scores(buf.as_slice()).unwrap(), scores);
        assert!(read_category_scores("a,b\n".as_bytes()).is_err());
    }

    #[test]
    fn model_round_trips_and_rejects_mismatch() {
        let params = MlpParams::xavier(17);
        let stats = NormStats {
            mean: [0.5; NUM_FEATURES],
            std: [2.0; NUM_FEATURES],
        };
        let text = save_model(&params, &stats);
        let (p, s) = load_model(&text).unwrap();
        assert_eq!(p, params);
        assert_eq!(s, stats);

        let bad_version = text.replacen("pcic-pc-model 1", "pcic-pc-model 2", 1);
        assert!(matches!(load_model(&bad_version), Err(Error::Model(_))));
        let bad_shape = text.replacen("w2 5 10", "w2 6 10", 1);
        assert!(matches!(load_model(&bad_shape), Err(Error::Model(_))));
        let bad_features = text.replacen("hazard,cum_hazard", "cum_hazard,hazard", 1);
        assert!(matches!(load_model(&bad_features), Err(Error::Model(_))));
    }
}
