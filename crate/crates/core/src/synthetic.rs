//! Synthetic data for tests, examples and smoke runs.
//!
//! [`write_corpus`] produces a StockNet-format directory tree. Prices are
//! whole cents, so label thresholds can be checked with integer arithmetic,
//! and some days are planted exactly on the +0.55% and −0.5% boundaries.
//! [`separable_store`] builds an in-memory store whose labels follow a
//! planted direction in both modalities.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{SampleStore, Split, StoredSample, PRICE_HEADER, PRICE_DIM, WINDOW};
use crate::embeddings::pseudo_embed;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub stocks: usize,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub seed: u64,
    /// Probability that a calendar day has tweets for a stock.
    pub tweet_rate: f64,
    /// Probability of a planted boundary move on a trading day.
    pub boundary_rate: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            stocks: 5,
            start: NaiveDate::from_ymd_opt(2013, 12, 1).expect("valid date"),
            end: NaiveDate::from_ymd_opt(2016, 1, 1).expect("valid date"),
            seed: 0,
            tweet_rate: 0.6,
            boundary_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub prices: PathBuf,
    pub tweets: PathBuf,
    pub tickers: Vec<String>,
}

fn ticker(i: usize) -> String {
    let mut name = String::from("S");
    let mut n = i;
    loop {
        name.push((b'A' + (n % 26) as u8) as char);
        n /= 26;
        if n == 0 {
            break;
        }
    }
    name
}

fn cents(v: i64) -> String {
    format!("{}.{:02}", v / 100, v % 100)
}

const WORDS: &[&str] = &[
    "earnings", "beat", "miss", "guidance", "upgrade", "downgrade", "rally", "selloff",
    "bullish", "bearish", "dividend", "buyback", "volume", "breakout", "support", "resistance",
];

/// Writes `prices/<TICKER>.csv` and `tweets/<TICKER>/<YYYY-MM-DD>` under
/// `root`. Trading days are weekdays minus a few random closures.
pub fn write_corpus(root: &Path, spec: &CorpusSpec) -> Result<CorpusPaths> {
    if spec.start >= spec.end {
        return Err(Error::config("end", "corpus end must follow start"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prices_dir = root.join("prices");
    let tweets_dir = root.join("tweets");
    for dir in [&prices_dir, &tweets_dir] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut calendar = Vec::new();
    let mut day = spec.start;
    while day < spec.end {
        calendar.push(day);
        day += Duration::days(1);
    }

    let mut tickers = Vec::with_capacity(spec.stocks);
    for i in 0..spec.stocks {
        let name = ticker(i);
        let mut csv = format!("{}\n", PRICE_HEADER.join(","));
        // +0.55% and −0.5% of a multiple of 2000 cents are whole cents.
        let mut close: i64 = 2000 * rng.random_range(5..50);
        let mut volume: i64 = rng.random_range(100_000..5_000_000);
        for &date in &calendar {
            if matches!(date.weekday(), Weekday::Sat | Weekday::Sun) || rng.random_bool(0.02) {
                continue;
            }
            let next = if close % 2000 == 0 && rng.random_bool(spec.boundary_rate) {
                if rng.random_bool(0.5) {
                    close + close * 55 / 10_000
                } else {
                    close - close * 50 / 10_000
                }
            } else if rng.random_bool(spec.boundary_rate) {
                ((close + 1000) / 2000).max(1) * 2000
            } else {
                let step: f64 = StandardNormal.sample(&mut rng);
                (close as f64 * (1.0 + 0.012 * step)).round().max(100.0) as i64
            };
            let open = (next as f64 * (1.0 + 0.004 * rng.random_range(-1.0..1.0))).round() as i64;
            let high = next.max(open) + rng.random_range(0..50);
            let low = (next.min(open) - rng.random_range(0..50)).max(1);
            volume = (volume as f64 * (1.0 + 0.2 * rng.random_range(-1.0..1.0))).round().max(0.0) as i64;
            csv.push_str(&format!(
                "{date},{},{},{},{},{},{volume}\n",
                cents(open),
                cents(high),
                cents(low),
                cents(next),
                cents(next)
            ));
            close = next;
        }
        let path = prices_dir.join(format!("{name}.csv"));
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;

        let stock_dir = tweets_dir.join(&name);
        fs::create_dir_all(&stock_dir).map_err(|e| Error::io(&stock_dir, e))?;
        for &date in &calendar {
            if !rng.random_bool(spec.tweet_rate) {
                continue;
            }
            let mut lines = String::new();
            for k in 0..rng.random_range(1..4) {
                let words: Vec<&str> = (0..4).map(|_| *WORDS.choose(&mut rng).expect("words")).collect();
                let hour = rng.random_range(0..24);
                let record = serde_json::json!({
                    "id": rng.random_range(1..u64::MAX / 2),
                    "text": format!("${name} {}", words.join(" ")),
                    "created_at": format!("{date}T{hour:02}:{:02}:00Z", k * 7),
                });
                lines.push_str(&record.to_string());
                lines.push('\n');
            }
            let path = stock_dir.join(date.to_string());
            fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
        }
        tickers.push(name);
    }
    Ok(CorpusPaths {
        prices: prices_dir,
        tweets: tweets_dir,
        tickers,
    })
}

#[derive(Debug, Clone)]
pub struct SeparableSpec {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub embed_dim: usize,
    /// Length of the planted text component relative to unit-norm noise.
    pub text_signal: f64,
    /// Planted shift of the daily relative prices.
    pub price_signal: f64,
    /// Draw labels independently of the features.
    pub random_labels: bool,
    pub seed: u64,
}

impl Default for SeparableSpec {
    fn default() -> Self {
        SeparableSpec {
            train: 200,
            validation: 100,
            test: 200,
            embed_dim: 32,
            text_signal: 1.0,
            price_signal: 0.01,
            random_labels: false,
            seed: 0,
        }
    }
}

/// A store whose features carry `±direction` according to a hidden class.
/// With `random_labels`, the stored label is a fresh coin flip instead of
/// the hidden class.
pub fn separable_store(spec: &SeparableSpec) -> Result<SampleStore> {
    let dim = spec.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let direction = pseudo_embed("planted direction", dim, spec.seed);
    let mut store = SampleStore::new(dim)?;
    let base = NaiveDate::from_ymd_opt(2014, 1, 1).expect("valid date");
    let splits = [
        (Split::Train, spec.train),
        (Split::Validation, spec.validation),
        (Split::Test, spec.test),
    ];
    let mut serial = 0usize;
    for (split, count) in splits {
        for _ in 0..count {
            let class = rng.random_bool(0.5);
            let sign = if class { 1.0 } else { -1.0 };
            let label = if spec.random_labels { rng.random_bool(0.5) } else { class };
            let mut text = Vec::with_capacity(WINDOW * dim);
            for day in 0..WINDOW {
                let noise = pseudo_embed(&format!("noise {serial} {day}"), dim, spec.seed);
                text.extend(
                    noise
                        .iter()
                        .zip(&direction)
                        .map(|(n, d)| (n + sign * spec.text_signal * d) as f32),
                );
            }
            let mut price = Vec::with_capacity(WINDOW * PRICE_DIM);
            let mut aux_labels = [0u8; WINDOW];
            for a in &mut aux_labels {
                let shift = sign * spec.price_signal;
                let day_move = shift + 0.01 * rng.sample::<f64, _>(StandardNormal);
                *a = u8::from(day_move > 0.0);
                for k in 0..PRICE_DIM - 1 {
                    price.push((day_move + 0.002 * rng.sample::<f64, _>(StandardNormal) * k as f64) as f32);
                }
                price.push((0.1 * rng.sample::<f64, _>(StandardNormal)) as f32);
            }
            store.push(
                split,
                StoredSample {
                    stock: format!("SYN{:03}", serial % 50),
                    target_date: base + Duration::days(serial as i64),
                    label: u8::from(label),
                    aux_labels,
                    text_present: [true; WINDOW],
                    movement_pct: if label { 1.0 } else { -1.0 },
                    price,
                    text,
                },
            )?;
            serial += 1;
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_corpus, Movement};

    #[test]
    fn tickers_are_distinct() {
        let names: std::collections::BTreeSet<String> = (0..2000).map(ticker).collect();
        assert_eq!(names.len(), 2000);
    }

    #[test]
    fn corpus_loads_and_plants_boundaries() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec { stocks: 3, boundary_rate: 0.3, ..CorpusSpec::default() };
        let paths = write_corpus(dir.path(), &spec).unwrap();
        let corpus = load_corpus(&paths.prices, Some(&paths.tweets)).unwrap();
        assert_eq!(corpus.prices.len(), 3);
        assert_eq!(corpus.skipped_tweet_lines, 0);
        let mut boundary = [0usize; 2];
        for days in corpus.prices.values() {
            for w in days.windows(2) {
                let (c, pct) = crate::dataset::label_movement(w[0].adj_close, w[1].adj_close).unwrap();
                if (pct - 0.55).abs() < 1e-9 {
                    assert_eq!(c, Movement::Positive);
                    boundary[0] += 1;
                }
                if (pct + 0.5).abs() < 1e-9 {
                    assert_eq!(c, Movement::Discard);
                    boundary[1] += 1;
                }
            }
        }
        assert!(boundary[0] > 0 && boundary[1] > 0, "{boundary:?}");
    }

    #[test]
    fn separable_store_is_deterministic() {
        let spec = SeparableSpec { train: 10, validation: 4, test: 4, embed_dim: 8, ..SeparableSpec::default() };
        let a = separable_store(&spec).unwrap();
        assert_eq!(a, separable_store(&spec).unwrap());
        assert_eq!(a.summary().total(), 18);
    }
}
