use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use crate::error::{Error, Result};

/// Metric means of one algorithm on one fold's test users.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldMetrics {
    pub fold: usize,
    pub algorithm: String,
    /// Users with a non-empty truth set, i.e. the averaging population.
    pub users: usize,
    /// e.g. "recall@10" -> mean.
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub folds: Vec<FoldMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation over folds; 0 for a single fold.
    pub std: f64,
    pub folds: usize,
}

fn summarise(values: &[f64]) -> Summary {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Summary { mean, std, folds: n }
}

impl MetricsReport {
    /// Algorithms in first-seen order.
    pub fn algorithms(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for f in &self.folds {
            if !out.contains(&f.algorithm.as_str()) {
                out.push(&f.algorithm);
            }
        }
        out
    }

    /// Metric names in first-seen order.
    pub fn metrics(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for f in &self.folds {
            for m in f.values.keys() {
                if !out.contains(&m.as_str()) {
                    out.push(m);
                }
            }
        }
        out.sort_by_key(|m| {
            let (name, k) = m.split_once('@').unwrap_or((m, "0"));
            (name.to_string(), k.parse::<usize>().unwrap_or(0))
        });
        out
    }

    pub fn summary(&self, algorithm: &str, metric: &str) -> Option<Summary> {
        let values: Vec<f64> = self
            .folds
            .iter()
            .filter(|f| f.algorithm == algorithm)
            .filter_map(|f| f.values.get(metric).copied())
            .collect();
        (!values.is_empty()).then(|| summarise(&values))
    }

    pub fn mean(&self, algorithm: &str, metric: &str) -> Option<f64> {
        self.summary(algorithm, metric).map(|s| s.mean)
    }

    /// Long format: one row per (fold, algorithm, metric), then mean and std
    /// rows with fold set to "mean" / "std".
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["fold", "algorithm", "metric", "value", "users"])?;
        for f in &self.folds {
            for (m, v) in &f.values {
                w.write_record([&f.fold.to_string(), &f.algorithm, m, &v.to_string(), &f.users.to_string()])?;
            }
        }
        for a in self.algorithms() {
            for m in self.metrics() {
                if let Some(s) = self.summary(a, m) {
                    let users: usize = self.folds.iter().filter(|f| f.algorithm == a).map(|f| f.users).sum();
                    w.write_record(["mean", a, m, &s.mean.to_string(), &users.to_string()])?;
                    w.write_record(["std", a, m, &s.std.to_string(), &users.to_string()])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<metrics>", e))?;
        Ok(())
    }

    /// Fixed-width comparison grid, algorithms as rows and `mean ± std` cells.
    pub fn to_table(&self) -> String {
        let metrics = self.metrics();
        let algorithms = self.algorithms();
        let name_width = algorithms.iter().map(|a| a.len()).max().unwrap_or(9).max(9);
        let mut out = String::new();
        let _ = write!(out, "{:<name_width$}", "algorithm");
        for m in &metrics {
            let _ = write!(out, "  {m:>17}");
        }
        out.push('\n');
        for a in algorithms {
            let _ = write!(out, "{a:<name_width$}");
            for m in &metrics {
                match self.summary(a, m) {
                    Some(s) => {
                        let _ = write!(out, "  {:>17}", format!("{:.4} ± {:.4}", s.mean, s.std));
                    }
                    None => {
                        let _ = write!(out, "  {:>17}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> MetricsReport {
        let fold = |fold, alg: &str, v: f64| FoldMetrics {
            fold,
            algorithm: alg.into(),
            users: 10,
            values: BTreeMap::from([("ndcg@10".into(), v), ("ndcg@5".into(), v / 2.0), ("recall@10".into(), v)]),
        };
        MetricsReport {
            folds: vec![fold(0, "PCIC", 0.4), fold(1, "PCIC", 0.6), fold(0, "TopSell", 0.2), fold(1, "TopSell", 0.2)],
        }
    }

    #[test]
    fn summary_over_folds() {
        let r = report();
        let s = r.summary("PCIC", "ndcg@10").unwrap();
        assert!((s.mean - 0.5).abs() < 1e-12);
        assert!((s.std - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.summary("TopSell", "ndcg@10").unwrap().std, 0.0);
        assert!(r.summary("RCP", "ndcg@10").is_none());
        assert_eq!(r.metrics(), ["ndcg@5", "ndcg@10", "recall@10"]);
    }

    #[test]
    fn csv_and_table() {
        let r = report();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("fold,algorithm,metric,value,users\n0,PCIC,ndcg@10,0.4,10\n"));
        assert!(text.contains("mean,PCIC,ndcg@10,0.5,20"));
        let table = r.to_table();
        assert!(table.lines().next().unwrap().starts_with("algorithm"));
        assert!(table.contains("0.5000 ± 0.1414"));
        assert_eq!(table.lines().count(), 3);
    }
}
