//! Offline evaluation: ranking metrics, baseline recommenders, the
//! cross-validation harness and the synthetic shopper generator.

pub mod baselines;
pub mod cv;
pub mod metrics;
pub mod report;
pub mod synth;

pub use baselines::{run_baseline, Baseline, BaselineStats};
pub use cv::{assign_folds, cross_validate, holdout, CvOutcome, FoldSplit, MIN_CV_USERS};
pub use metrics::{ndcg_at_k, recall_at_k};
pub use report::{FoldMetrics, MetricsReport};
pub use synth::{generate_synthetic, write_truth, SynthConfig, SynthOutput, TruthRow};
