//! Sliding-window sample generation over per-stock trading calendars.
//!
//! A sample targets trading day `d` of one stock. Its inputs come from the
//! five preceding trading days `d−5 … d−1`; relative price features for each
//! window day also need that day's predecessor, so a target needs six days
//! of history. The label is the sign of the adjusted-close move on `d`,
//! with small moves discarded.

mod ingest;
mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ingest::{
    load_corpus, load_tweets, parse_price_csv, parse_price_reader, parse_tweet_file,
    parse_tweet_str, Corpus, PriceDay, Tweet, TweetFile, PRICE_HEADER,
};
pub use store::{
    build_sample_store, iterate_batches, resolve_sample, Batch, Batches, SampleStore,
    StoreSummary, StoredSample, STORE_MAGIC, STORE_VERSION,
};

pub const WINDOW: usize = 5;
pub const PRICE_DIM: usize = 6;
/// Movements at or above this percentage are positive.
pub const POSITIVE_THRESHOLD_PCT: f64 = 0.55;
/// Movements strictly below this percentage are negative.
pub const NEGATIVE_THRESHOLD_PCT: f64 = -0.5;
/// Slack for comparing a computed percentage against a threshold, so that a
/// move printed as exactly +0.55% is not lost to binary rounding.
const THRESHOLD_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub(crate) fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::UnknownSplit(other.to_string())),
        }
    }
}

/// Date boundaries; each split is the half-open range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_start: NaiveDate,
    pub train_end: NaiveDate,
    pub val_end: NaiveDate,
    pub test_end: NaiveDate,
}

impl Default for SplitSpec {
    fn default() -> Self {
        let d = |y, m| NaiveDate::from_ymd_opt(y, m, 1).unwrap();
        SplitSpec {
            train_start: d(2014, 1),
            train_end: d(2015, 8),
            val_end: d(2015, 10),
            test_end: d(2016, 1),
        }
    }
}

impl SplitSpec {
    pub fn new(
        train_start: NaiveDate,
        train_end: NaiveDate,
        val_end: NaiveDate,
        test_end: NaiveDate,
    ) -> Result<Self> {
        if !(train_start < train_end && train_end < val_end && val_end < test_end) {
            return Err(Error::config(
                "splits",
                format!("dates must increase: {train_start} {train_end} {val_end} {test_end}"),
            ));
        }
        Ok(SplitSpec {
            train_start,
            train_end,
            val_end,
            test_end,
        })
    }

    pub fn assign(&self, date: NaiveDate) -> Option<Split> {
        if date < self.train_start || date >= self.test_end {
            None
        } else if date < self.train_end {
            Some(Split::Train)
        } else if date < self.val_end {
            Some(Split::Validation)
        } else {
            Some(Split::Test)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Movement {
    Positive,
    Negative,
    Discard,
}

impl Movement {
    pub const ALL: [Movement; 3] = [Movement::Positive, Movement::Negative, Movement::Discard];

    fn index(self) -> usize {
        self as usize
    }
}

/// Classifies the move from `prev_adj` to `cur_adj`. Returns the class and
/// the signed percentage `100·(cur/prev − 1)`.
pub fn label_movement(prev_adj: f64, cur_adj: f64) -> Result<(Movement, f64)> {
    if !(prev_adj > 0.0) || !prev_adj.is_finite() || !cur_adj.is_finite() {
        return Err(Error::Domain(format!(
            "cannot label move from {prev_adj} to {cur_adj}"
        )));
    }
    let pct = 100.0 * (cur_adj / prev_adj - 1.0);
    let class = if pct >= POSITIVE_THRESHOLD_PCT - THRESHOLD_SLACK {
        Movement::Positive
    } else if pct < NEGATIVE_THRESHOLD_PCT - THRESHOLD_SLACK {
        Movement::Negative
    } else {
        Movement::Discard
    };
    Ok((class, pct))
}

pub type PriceFeatures = [[f64; PRICE_DIM]; WINDOW];

/// Relative features for the last five of six consecutive trading days:
/// open, high, low, close and adjusted close of day `t` over the adjusted
/// close of `t−1`, each minus one, and `ln(volume_t / volume_{t−1})` with
/// volumes floored at 1.
pub fn price_features(window: &[PriceDay]) -> Result<PriceFeatures> {
    if window.len() != WINDOW + 1 {
        return Err(Error::Alignment(format!(
            "price window needs {} days, got {}",
            WINDOW + 1,
            window.len()
        )));
    }
    for pair in window.windows(2) {
        if pair[0].stock != pair[1].stock {
            return Err(Error::Alignment(format!(
                "window mixes {} and {}",
                pair[0].stock, pair[1].stock
            )));
        }
        if pair[0].date >= pair[1].date {
            return Err(Error::Alignment(format!(
                "{}: window dates {} and {} are not ascending",
                pair[0].stock, pair[0].date, pair[1].date
            )));
        }
    }
    let mut out = [[0.0; PRICE_DIM]; WINDOW];
    for (row, pair) in out.iter_mut().zip(window.windows(2)) {
        let (prev, cur) = (&pair[0], &pair[1]);
        let base = prev.adj_close;
        *row = [
            cur.open / base - 1.0,
            cur.high / base - 1.0,
            cur.low / base - 1.0,
            cur.close / base - 1.0,
            cur.adj_close / base - 1.0,
            (cur.volume.max(1.0) / prev.volume.max(1.0)).ln(),
        ];
    }
    Ok(out)
}

/// One window day: its trading date and the calendar dates whose tweets
/// are attributed to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowDay {
    pub trading_date: NaiveDate,
    pub tweet_dates: Vec<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub stock: String,
    pub target_date: NaiveDate,
    pub price_feats: PriceFeatures,
    pub tweet_days: Vec<WindowDay>,
    pub label: u8,
    /// Raw up/down sign of each window day against its predecessor.
    pub aux_labels: [u8; WINDOW],
    pub movement_pct: f64,
}

/// Candidate counts per split and movement class.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelStats {
    counts: [[usize; 3]; 3],
    /// Candidates whose target date falls outside every split.
    pub out_of_range: usize,
    /// Labeled samples dropped because no window day had tweets.
    pub dropped_without_tweets: usize,
}

impl LabelStats {
    pub fn count(&self, split: Split, movement: Movement) -> usize {
        self.counts[split.index()][movement.index()]
    }

    fn bump(&mut self, split: Split, movement: Movement) {
        self.counts[split.index()][movement.index()] += 1;
    }

    fn merge(&mut self, other: &LabelStats) {
        for s in 0..3 {
            for m in 0..3 {
                self.counts[s][m] += other.counts[s][m];
            }
        }
        self.out_of_range += other.out_of_range;
        self.dropped_without_tweets += other.dropped_without_tweets;
    }
}

#[derive(Debug, Clone, Default)]
pub struct GeneratedSamples {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
    pub stats: LabelStats,
}

impl GeneratedSamples {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Sample> {
        match split {
            Split::Train => &mut self.train,
            Split::Validation => &mut self.validation,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generates labeled samples for every stock. Tweets dated on a calendar
/// day without trading are attributed to the stock's next trading day.
pub fn generate_samples(
    prices: &BTreeMap<String, Vec<PriceDay>>,
    tweet_dates: &BTreeMap<String, BTreeSet<NaiveDate>>,
    splits: &SplitSpec,
    require_tweets: bool,
) -> Result<GeneratedSamples> {
    let empty = BTreeSet::new();
    let per_stock: Vec<(Vec<(Split, Sample)>, LabelStats)> = prices
        .par_iter()
        .map(|(ticker, days)| {
            let dates = tweet_dates.get(ticker).unwrap_or(&empty);
            stock_samples(days, dates, splits, require_tweets)
        })
        .collect::<Result<_>>()?;

    let mut out = GeneratedSamples::default();
    for (samples, stats) in per_stock {
        out.stats.merge(&stats);
        for (split, sample) in samples {
            out.split_mut(split).push(sample);
        }
    }
    Ok(out)
}

fn stock_samples(
    days: &[PriceDay],
    tweet_dates: &BTreeSet<NaiveDate>,
    splits: &SplitSpec,
    require_tweets: bool,
) -> Result<(Vec<(Split, Sample)>, LabelStats)> {
    let mut stats = LabelStats::default();
    let mut out = Vec::new();
    for target in WINDOW + 1..days.len() {
        let (movement, pct) = label_movement(days[target - 1].adj_close, days[target].adj_close)?;
        let Some(split) = splits.assign(days[target].date) else {
            stats.out_of_range += 1;
            continue;
        };
        stats.bump(split, movement);
        let label = match movement {
            Movement::Positive => 1,
            Movement::Negative => 0,
            Movement::Discard => continue,
        };

        let window = &days[target - WINDOW - 1..target];
        let price_feats = price_features(window)?;
        let mut aux_labels = [0u8; WINDOW];
        let mut tweet_days = Vec::with_capacity(WINDOW);
        for (t, pair) in window.windows(2).enumerate() {
            aux_labels[t] = u8::from(pair[1].adj_close > pair[0].adj_close);
            let after = pair[0].date.succ_opt().expect("date in range");
            tweet_days.push(WindowDay {
                trading_date: pair[1].date,
                tweet_dates: tweet_dates.range(after..=pair[1].date).copied().collect(),
            });
        }
        if require_tweets && tweet_days.iter().all(|d| d.tweet_dates.is_empty()) {
            stats.dropped_without_tweets += 1;
            continue;
        }
        out.push((
            split,
            Sample {
                stock: days[target].stock.clone(),
                target_date: days[target].date,
                price_feats,
                tweet_days,
                label,
                aux_labels,
                movement_pct: pct,
            },
        ));
    }
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn day(date: NaiveDate, adj: f64, volume: f64) -> PriceDay {
        PriceDay {
            stock: "T".into(),
            date,
            open: adj,
            high: adj,
            low: adj,
            close: adj,
            adj_close: adj,
            volume,
        }
    }

    fn series(start: &str, adj: &[f64]) -> Vec<PriceDay> {
        let start = d(start);
        adj.iter()
            .enumerate()
            .map(|(i, &a)| day(start + chrono::Duration::days(i as i64), a, 1000.0))
            .collect()
    }

    #[test]
    fn thresholds() {
        assert_eq!(label_movement(100.0, 100.6).unwrap().0, Movement::Positive);
        assert_eq!(label_movement(100.0, 99.4).unwrap().0, Movement::Negative);
        assert_eq!(label_movement(100.0, 100.2).unwrap().0, Movement::Discard);
        assert_eq!(label_movement(100.0, 100.55).unwrap().0, Movement::Positive);
        assert_eq!(label_movement(100.0, 99.5).unwrap().0, Movement::Discard);
        assert_eq!(label_movement(100.0, 100.549).unwrap().0, Movement::Discard);
        assert_eq!(label_movement(100.0, 99.499).unwrap().0, Movement::Negative);
        let (_, pct) = label_movement(100.0, 100.6).unwrap();
        assert!((pct - 0.6).abs() < 1e-9);
        assert!(matches!(label_movement(0.0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn features_flat_and_hand_example() {
        let flat = series("2015-01-01", &[50.0; 6]);
        assert_eq!(price_features(&flat).unwrap(), [[0.0; 6]; 5]);

        let e = std::f64::consts::E;
        let mut w = series("2015-01-01", &[100.0, 100.0, 100.0, 100.0, 100.0, 102.0]);
        w[4].volume = e * 1000.0;
        w[5].volume = 1000.0;
        let f = price_features(&w).unwrap();
        for v in &f[4][..5] {
            assert!((v - 0.02).abs() < 1e-12);
        }
        assert!((f[4][5] + 1.0).abs() < 1e-12);
        assert_eq!(f.len(), 5);
    }

    #[test]
    fn features_floor_zero_volume() {
        let mut w = series("2015-01-01", &[10.0; 6]);
        w[2].volume = 0.0;
        let f = price_features(&w).unwrap();
        assert!((f[1][5] - (1.0f64 / 1000.0).ln()).abs() < 1e-12);
        assert!(f.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn features_reject_misaligned_windows() {
        let mut w = series("2015-01-01", &[10.0; 6]);
        w.swap(2, 3);
        assert!(matches!(price_features(&w), Err(Error::Alignment(_))));
        assert!(price_features(&w[..5]).is_err());
        let mut mixed = series("2015-01-01", &[10.0; 6]);
        mixed[3].stock = "OTHER".into();
        assert!(price_features(&mixed).is_err());
    }

    fn one_stock(days: Vec<PriceDay>) -> BTreeMap<String, Vec<PriceDay>> {
        BTreeMap::from([("T".to_string(), days)])
    }

    #[test]
    fn flat_series_yields_only_discards() {
        let prices = one_stock(series("2015-01-01", &[10.0; 8]));
        let out = generate_samples(&prices, &BTreeMap::new(), &SplitSpec::default(), false).unwrap();
        assert!(out.is_empty());
        assert_eq!(out.stats.count(Split::Train, Movement::Discard), 2);
    }

    #[test]
    fn six_days_of_history_are_required() {
        let prices = one_stock(series("2015-01-01", &[10.0, 10.0, 10.0, 10.0, 10.0, 10.1]));
        let out = generate_samples(&prices, &BTreeMap::new(), &SplitSpec::default(), false).unwrap();
        assert!(out.is_empty());
        assert_eq!(out.stats, LabelStats::default());
    }

    #[test]
    fn single_positive_sample_with_window_signs() {
        let adj = [10.0, 10.2, 10.1, 10.1, 10.3, 10.0, 10.1];
        let prices = one_stock(series("2015-01-01", &adj));
        let out = generate_samples(&prices, &BTreeMap::new(), &SplitSpec::default(), false).unwrap();
        assert_eq!(out.len(), 1);
        let s = &out.train[0];
        assert_eq!(s.label, 1);
        assert!((s.movement_pct - 1.0).abs() < 1e-9);
        assert_eq!(s.aux_labels, [1, 0, 0, 1, 0]);
        assert_eq!(s.target_date, d("2015-01-07"));
        assert_eq!(s.tweet_days[0].trading_date, d("2015-01-02"));
        assert_eq!(s.tweet_days[4].trading_date, d("2015-01-06"));
    }

    #[test]
    fn split_assignment_by_target_date() {
        let spec = SplitSpec::default();
        assert_eq!(spec.assign(d("2015-09-15")), Some(Split::Validation));
        assert_eq!(spec.assign(d("2014-01-01")), Some(Split::Train));
        assert_eq!(spec.assign(d("2015-08-01")), Some(Split::Validation));
        assert_eq!(spec.assign(d("2015-10-01")), Some(Split::Test));
        assert_eq!(spec.assign(d("2016-01-01")), None);
        assert_eq!(spec.assign(d("2013-12-31")), None);
        assert!(SplitSpec::new(d("2015-01-01"), d("2014-01-01"), d("2016-01-01"), d("2017-01-01")).is_err());
    }

    #[test]
    fn weekend_tweets_attach_to_next_trading_day() {
        // Fri 2015-01-02, then Mon 2015-01-05 ..
        let dates = ["2014-12-29", "2014-12-30", "2014-12-31", "2015-01-02", "2015-01-05",
                     "2015-01-06", "2015-01-07"];
        let adj = [10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.2];
        let days: Vec<PriceDay> = dates.iter().zip(adj).map(|(s, a)| day(d(s), a, 1.0)).collect();
        let tweets = BTreeMap::from([(
            "T".to_string(),
            BTreeSet::from([d("2015-01-03"), d("2015-01-04"), d("2015-01-05"), d("2015-01-07")]),
        )]);
        let out = generate_samples(&one_stock(days), &tweets, &SplitSpec::default(), false).unwrap();
        let s = &out.train[0];
        let monday = s.tweet_days.iter().find(|w| w.trading_date == d("2015-01-05")).unwrap();
        assert_eq!(monday.tweet_dates, vec![d("2015-01-03"), d("2015-01-04"), d("2015-01-05")]);
        // The target day's own tweets never enter the window.
        assert!(s.tweet_days.iter().all(|w| w.tweet_dates.iter().all(|&t| t < s.target_date)));
    }

    #[test]
    fn require_tweets_drops_silent_windows() {
        let adj = [10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.2, 10.4];
        let prices = one_stock(series("2015-01-01", &adj));
        let tweets = BTreeMap::from([("T".to_string(), BTreeSet::from([d("2015-01-07")]))]);
        let kept = generate_samples(&prices, &tweets, &SplitSpec::default(), true).unwrap();
        // target 01-07 has a window ending 01-06 without tweets; target 01-08 sees 01-07.
        assert_eq!(kept.len(), 1);
        assert_eq!(kept.train[0].target_date, d("2015-01-08"));
        assert_eq!(kept.stats.dropped_without_tweets, 1);
        let all = generate_samples(&prices, &tweets, &SplitSpec::default(), false).unwrap();
        assert_eq!(all.len(), 2);
    }

    #[test]
    fn split_names_parse() {
        assert_eq!("val".parse::<Split>().unwrap(), Split::Validation);
        assert!(matches!("dev".parse::<Split>(), Err(Error::UnknownSplit(_))));
    }
}
