//! Transaction log parsing, per-user basket histories and the temporal
//! feature/label split.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Days, NaiveDate};

use crate::error::{Error, Result};

pub const DATE_FORMAT: &str = "%Y-%m-%d";

pub const CANONICAL_HEADER: [&str; 6] = [
    "user_id",
    "order_id",
    "order_date",
    "item_id",
    "category_id",
    "quantity",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TransactionRecord {
    pub user_id: String,
    pub order_id: String,
    pub order_date: NaiveDate,
    pub item_id: String,
    pub category_id: String,
    /// Units purchased. Treated as an opaque non-negative magnitude.
    pub quantity: f64,
}

/// Header names to look up for each canonical column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMap {
    pub user: String,
    pub order: String,
    pub date: String,
    pub item: String,
    pub category: String,
    pub quantity: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            user: CANONICAL_HEADER[0].to_string(),
            order: CANONICAL_HEADER[1].to_string(),
            date: CANONICAL_HEADER[2].to_string(),
            item: CANONICAL_HEADER[3].to_string(),
            category: CANONICAL_HEADER[4].to_string(),
            quantity: CANONICAL_HEADER[5].to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormatOptions {
    pub columns: ColumnMap,
    pub delimiter: u8,
    /// Abort when more than this fraction of data rows is rejected.
    pub max_reject_fraction: f64,
}

impl Default for FormatOptions {
    fn default() -> Self {
        Self {
            columns: ColumnMap::default(),
            delimiter: b',',
            max_reject_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTransactions {
    pub records: Vec<TransactionRecord>,
    /// Data rows seen, excluding the header.
    pub total_rows: usize,
    pub rejected: usize,
    /// Rows folded into an earlier (user, order, item) row.
    pub merged: usize,
}

pub fn parse_transactions(path: impl AsRef<Path>, options: &FormatOptions) -> Result<ParsedTransactions> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_reader(file, options)
}

pub fn parse_reader<R: Read>(reader: R, options: &FormatOptions) -> Result<ParsedTransactions> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let headers = rdr.headers()?.clone();
    let find = |column: &'static str, header: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == header)
            .ok_or_else(|| Error::MissingColumn {
                column,
                header: header.to_string(),
            })
    };
    let cols = &options.columns;
    let i_user = find("user", &cols.user)?;
    let i_order = find("order", &cols.order)?;
    let i_date = find("date", &cols.date)?;
    let i_item = find("item", &cols.item)?;
    let i_category = find("category", &cols.category)?;
    let i_quantity = find("quantity", &cols.quantity)?;

    let mut records: Vec<TransactionRecord> = Vec::new();
    let mut index: HashMap<(String, String, String), usize> = HashMap::new();
    let mut total_rows = 0;
    let mut rejected = 0;
    let mut merged = 0;

    for row in rdr.records() {
        total_rows += 1;
        let row = match row {
            Ok(r) => r,
            Err(_) => {
                rejected += 1;
                continue;
            }
        };
        let field = |i: usize| row.get(i).filter(|s| !s.is_empty());
        let parsed = (|| {
            let user_id = field(i_user)?;
            let order_id = field(i_order)?;
            let item_id = field(i_item)?;
            let category_id = field(i_category)?;
            let order_date = NaiveDate::parse_from_str(field(i_date)?, DATE_FORMAT).ok()?;
            let quantity: f64 = field(i_quantity)?.parse().ok()?;
            if !quantity.is_finite() || quantity < 0.0 {
                return None;
            }
            Some(TransactionRecord {
                user_id: user_id.to_string(),
                order_id: order_id.to_string(),
                order_date,
                item_id: item_id.to_string(),
                category_id: category_id.to_string(),
                quantity,
            })
        })();
        let Some(record) = parsed else {
            rejected += 1;
            continue;
        };
        let key = (
            record.user_id.clone(),
            record.order_id.clone(),
            record.item_id.clone(),
        );
        match index.get(&key) {
            Some(&at) => {
                records[at].quantity += record.quantity;
                merged += 1;
            }
            None => {
                index.insert(key, records.len());
                records.push(record);
            }
        }
    }

    if total_rows > 0 && rejected as f64 > options.max_reject_fraction * total_rows as f64 {
        return Err(Error::TooManyRejected {
            rejected,
            total: total_rows,
        });
    }

    Ok(ParsedTransactions {
        records,
        total_rows,
        rejected,
        merged,
    })
}

/// Writes records in the canonical six-column layout.
pub fn write_transactions<W: Write>(writer: W, records: &[TransactionRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(CANONICAL_HEADER)?;
    for r in records {
        let date = r.order_date.format(DATE_FORMAT).to_string();
        let quantity = r.quantity.to_string();
        wtr.write_record([
            r.user_id.as_str(),
            r.order_id.as_str(),
            date.as_str(),
            r.item_id.as_str(),
            r.category_id.as_str(),
            quantity.as_str(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn write_transactions_file(path: impl AsRef<Path>, records: &[TransactionRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_transactions(std::io::BufWriter::new(file), records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasketLine {
    pub item_id: String,
    pub category_id: String,
    pub quantity: f64,
}

/// One order. Lines carry no temporal order; they are kept sorted by item id.
#[derive(Debug, Clone, PartialEq)]
pub struct Basket {
    pub order_id: String,
    pub date: NaiveDate,
    pub lines: Vec<BasketLine>,
}

impl Basket {
    pub fn contains_category(&self, category_id: &str) -> bool {
        self.lines.iter().any(|l| l.category_id == category_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserHistory {
    pub user_id: String,
    /// Sorted by (date, order_id).
    pub baskets: Vec<Basket>,
}

impl UserHistory {
    pub fn categories(&self) -> BTreeSet<&str> {
        self.baskets
            .iter()
            .flat_map(|b| b.lines.iter().map(|l| l.category_id.as_str()))
            .collect()
    }

    pub fn items(&self) -> BTreeSet<&str> {
        self.baskets
            .iter()
            .flat_map(|b| b.lines.iter().map(|l| l.item_id.as_str()))
            .collect()
    }

    pub fn records(&self) -> impl Iterator<Item = TransactionRecord> + '_ {
        self.baskets.iter().flat_map(move |b| {
            b.lines.iter().map(move |l| TransactionRecord {
                user_id: self.user_id.clone(),
                order_id: b.order_id.clone(),
                order_date: b.date,
                item_id: l.item_id.clone(),
                category_id: l.category_id.clone(),
                quantity: l.quantity,
            })
        })
    }
}

/// A day on which the user bought from a category, with the units bought that day.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoryEvent {
    pub date: NaiveDate,
    pub quantity: f64,
}

impl UserHistory {
    /// Purchase events per category. Same-day baskets collapse into one event.
    pub fn category_events(&self) -> BTreeMap<&str, Vec<CategoryEvent>> {
        let mut out: BTreeMap<&str, Vec<CategoryEvent>> = BTreeMap::new();
        for b in &self.baskets {
            for l in &b.lines {
                let events = out.entry(l.category_id.as_str()).or_default();
                match events.last_mut() {
                    Some(e) if e.date == b.date => e.quantity += l.quantity,
                    _ => events.push(CategoryEvent {
                        date: b.date,
                        quantity: l.quantity,
                    }),
                }
            }
        }
        out
    }
}

/// Groups records into per-user histories, sorted by user id.
pub fn build_histories(records: &[TransactionRecord]) -> Vec<UserHistory> {
    let mut users: BTreeMap<&str, BTreeMap<(NaiveDate, &str), Vec<BasketLine>>> = BTreeMap::new();
    for r in records {
        users
            .entry(r.user_id.as_str())
            .or_default()
            .entry((r.order_date, r.order_id.as_str()))
            .or_default()
            .push(BasketLine {
                item_id: r.item_id.clone(),
                category_id: r.category_id.clone(),
                quantity: r.quantity,
            });
    }
    users
        .into_iter()
        .map(|(user_id, baskets)| UserHistory {
            user_id: user_id.to_string(),
            baskets: baskets
                .into_iter()
                .map(|((date, order_id), mut lines)| {
                    lines.sort_by(|a, b| a.item_id.cmp(&b.item_id));
                    Basket {
                        order_id: order_id.to_string(),
                        date,
                        lines,
                    }
                })
                .collect(),
        })
        .collect()
}

/// How the label period is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitProtocol {
    /// The last `label_window_days` of the corpus, shared by all users.
    #[default]
    Window,
    /// Each user's last shopping day is their own label period.
    LastBasket,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitConfig {
    pub label_window_days: u32,
    pub history_days: u32,
    pub engaged_only: bool,
    pub engaged_category_threshold: usize,
    pub protocol: SplitProtocol,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            label_window_days: 7,
            history_days: 548,
            engaged_only: false,
            engaged_category_threshold: 25,
            protocol: SplitProtocol::Window,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.label_window_days == 0 || self.history_days == 0 {
            return Err(Error::Config(
                "split.label_window_days and split.history_days must be positive".into(),
            ));
        }
        if self.label_window_days >= self.history_days {
            return Err(Error::Config(format!(
                "split.label_window_days ({}) must be smaller than split.history_days ({})",
                self.label_window_days, self.history_days
            )));
        }
        if self.engaged_category_threshold == 0 {
            return Err(Error::Config(
                "split.engaged_category_threshold must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitUser {
    pub features: UserHistory,
    pub labels: UserHistory,
    /// First day of this user's label period.
    pub cutoff: NaiveDate,
}

impl SplitUser {
    pub fn user_id(&self) -> &str {
        &self.features.user_id
    }

    /// Last fully observed day of the feature period; "today" for features.
    pub fn reference_date(&self) -> NaiveDate {
        self.cutoff - Days::new(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSplit {
    /// Users with at least one feature-period basket, sorted by user id.
    pub users: Vec<SplitUser>,
    /// Corpus-wide first label day. Under [`SplitProtocol::LastBasket`] this is
    /// the latest per-user cutoff.
    pub split_date: NaiveDate,
}

pub fn temporal_split(histories: &[UserHistory], config: &SplitConfig) -> Result<TemporalSplit> {
    config.validate()?;
    let max_date = histories
        .iter()
        .flat_map(|h| h.baskets.iter().map(|b| b.date))
        .max()
        .ok_or(Error::EmptyCorpus)?;
    let m = u64::from(config.label_window_days);
    let history = u64::from(config.history_days);

    let split_date = max_date - Days::new(m - 1);
    let mut users = Vec::new();
    let mut any_feature = false;
    for h in histories {
        let (cutoff, window_end) = match config.protocol {
            SplitProtocol::Window => (split_date, max_date),
            SplitProtocol::LastBasket => match h.baskets.last() {
                Some(b) => (b.date, b.date),
                None => continue,
            },
        };
        let earliest = window_end.checked_sub_days(Days::new(history)).unwrap_or(NaiveDate::MIN);
        let (mut features, mut labels) = (Vec::new(), Vec::new());
        for b in &h.baskets {
            if b.date >= cutoff {
                labels.push(b.clone());
            } else if b.date >= earliest {
                features.push(b.clone());
            }
        }
        if features.is_empty() {
            continue;
        }
        any_feature = true;
        let features = UserHistory {
            user_id: h.user_id.clone(),
            baskets: features,
        };
        if config.engaged_only && features.categories().len() <= config.engaged_category_threshold {
            continue;
        }
        users.push(SplitUser {
            labels: UserHistory {
                user_id: h.user_id.clone(),
                baskets: labels,
            },
            features,
            cutoff,
        });
    }
    if !any_feature {
        return Err(Error::NoFeaturePeriod { split_date });
    }
    if users.is_empty() {
        return Err(Error::Empty("no users left after the engaged-user filter"));
    }
    users.sort_by(|a, b| a.user_id().cmp(b.user_id()));
    let split_date = match config.protocol {
        SplitProtocol::Window => split_date,
        SplitProtocol::LastBasket => users.iter().map(|u| u.cutoff).max().unwrap_or(split_date),
    };
    Ok(TemporalSplit { users, split_date })
}

pub type PairKey = (String, String);

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    /// (user_id, category_id) -> 0 or 1.
    pub labels: BTreeMap<PairKey, u8>,
    pub split_date: NaiveDate,
}

impl LabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, user_id: &str, category_id: &str) -> Option<u8> {
        self.labels
            .get(&(user_id.to_string(), category_id.to_string()))
            .copied()
    }
}

/// One row per category bought in the feature period; label 1 when the user
/// bought from it again during the label period.
pub fn build_labels(split: &TemporalSplit) -> LabelSet {
    let mut labels = BTreeMap::new();
    for u in &split.users {
        let later = u.labels.categories();
        for c in u.features.categories() {
            let label = u8::from(later.contains(c));
            labels.insert((u.user_id().to_string(), c.to_string()), label);
        }
    }
    LabelSet {
        labels,
        split_date: split.split_date,
    }
}

/// Items bought in the label period that the user had also bought before.
pub fn repurchased_items(user: &SplitUser) -> BTreeSet<String> {
    let before = user.features.items();
    user.labels
        .items()
        .into_iter()
        .filter(|i| before.contains(i))
        .map(str::to_string)
        .collect()
}

/// Categories with label 1 for this user.
pub fn repurchased_categories(user: &SplitUser) -> BTreeSet<String> {
    let before = user.features.categories();
    user.labels
        .categories()
        .into_iter()
        .filter(|c| before.contains(c))
        .map(str::to_string)
        .collect()
}
