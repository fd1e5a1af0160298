use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required column `{column}` (looked for header `{header}`)")]
    MissingColumn { column: &'static str, header: String },
    #[error("{rejected} of {total} rows rejected (more than half); check the column mapping and date format")]
    TooManyRejected { rejected: usize, total: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("no purchases fall before the split date {split_date}; every basket is inside the label window")]
    NoFeaturePeriod { split_date: chrono::NaiveDate },
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("series too short for ARIMA: {len} observations, need at least {min}")]
    SeriesTooShort { len: usize, min: usize },
    #[error("every ARIMA candidate order was singular")]
    AllCandidatesSingular,
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model file rejected: {0}")]
    Model(String),
    #[error("unknown baseline `{0}`; expected TopSell, FBought or RCP")]
    UnknownBaseline(String),
    #[error("not enough users for cross-validation: {found}, need at least {min}")]
    TooFewUsers { found: usize, min: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
