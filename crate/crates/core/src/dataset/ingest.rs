//! Readers for per-ticker price CSVs and tweet JSON-lines files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use serde_json::Value;

use crate::error::{Error, Result};

pub const PRICE_HEADER: [&str; 7] = ["Date", "Open", "High", "Low", "Close", "Adj Close", "Volume"];

/// One trading day of one stock.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceDay {
    pub stock: String,
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub adj_close: f64,
    pub volume: f64,
}

impl PriceDay {
    fn check(&self) -> std::result::Result<(), String> {
        let values = [self.open, self.high, self.low, self.close, self.adj_close, self.volume];
        if values.iter().any(|v| !v.is_finite()) {
            return Err("non-finite value".into());
        }
        if self.high < self.low {
            return Err(format!("high {} below low {}", self.high, self.low));
        }
        if self.low > self.open.min(self.close) || self.high < self.open.max(self.close) {
            return Err(format!(
                "open/close outside [low, high] = [{}, {}]",
                self.low, self.high
            ));
        }
        if self.adj_close <= 0.0 {
            return Err(format!("adjusted close {} is not positive", self.adj_close));
        }
        if self.volume < 0.0 {
            return Err(format!("negative volume {}", self.volume));
        }
        Ok(())
    }
}

/// Reads `<TICKER>.csv`; the ticker is the file stem.
pub fn parse_price_csv(path: &Path) -> Result<Vec<PriceDay>> {
    let ticker = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::config("prices", format!("cannot derive ticker from {}", path.display())))?
        .to_string();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_price_reader(&ticker, file, path)
}

pub fn parse_price_reader(ticker: &str, reader: impl Read, origin: &Path) -> Result<Vec<PriceDay>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?;
    if header.iter().ne(PRICE_HEADER) {
        return Err(parse_err(
            1,
            format!("header {:?}, expected {:?}", header.iter().collect::<Vec<_>>(), PRICE_HEADER),
        ));
    }

    let mut days = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        if record.len() != 7 {
            return Err(parse_err(line, format!("expected 7 fields, found {}", record.len())));
        }
        let date: NaiveDate = record[0]
            .parse()
            .map_err(|e| parse_err(line, format!("date {:?}: {e}", &record[0])))?;
        let mut nums = [0.0; 6];
        for (j, slot) in nums.iter_mut().enumerate() {
            let raw = &record[j + 1];
            *slot = raw
                .parse()
                .map_err(|_| parse_err(line, format!("{} {raw:?} is not a number", PRICE_HEADER[j + 1])))?;
        }
        let day = PriceDay {
            stock: ticker.to_string(),
            date,
            open: nums[0],
            high: nums[1],
            low: nums[2],
            close: nums[3],
            adj_close: nums[4],
            volume: nums[5],
        };
        day.check().map_err(|m| {
            Error::Integrity(format!("{}:{line}: {m}", origin.display()))
        })?;
        days.push(day);
    }
    days.sort_by_key(|d| d.date);
    if let Some(w) = days.windows(2).find(|w| w[0].date == w[1].date) {
        return Err(Error::Integrity(format!(
            "{}: duplicate date {}",
            origin.display(),
            w[0].date
        )));
    }
    Ok(days)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tweet {
    /// UTC calendar date of `created_at`.
    pub date: NaiveDate,
    pub text: String,
    pub id: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TweetFile {
    pub tweets: Vec<Tweet>,
    /// Lines that could not be parsed and were skipped.
    pub skipped: usize,
}

fn parse_timestamp(raw: &str) -> Option<NaiveDate> {
    if let Ok(t) = DateTime::parse_from_rfc3339(raw) {
        return Some(t.with_timezone(&Utc).date_naive());
    }
    // Twitter API style: "Wed Jan 01 03:59:04 +0000 2014"
    DateTime::parse_from_str(raw, "%a %b %d %H:%M:%S %z %Y")
        .ok()
        .map(|t| t.with_timezone(&Utc).date_naive())
}

fn parse_tweet_line(line: &str) -> Option<Tweet> {
    let value: Value = serde_json::from_str(line).ok()?;
    let text = value.get("text")?.as_str()?.to_string();
    let date = parse_timestamp(value.get("created_at")?.as_str()?)?;
    let id = match value.get("id") {
        Some(Value::Number(n)) => n.as_u64(),
        _ => value
            .get("id_str")
            .and_then(Value::as_str)
            .and_then(|s| s.parse().ok()),
    };
    Some(Tweet { date, text, id })
}

/// Parses one JSON object per line. Unparseable lines are counted and
/// skipped; a file without a single valid line is an error.
pub fn parse_tweet_file(path: &Path) -> Result<TweetFile> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tweet_str(&raw, path)
}

pub fn parse_tweet_str(raw: &str, origin: &Path) -> Result<TweetFile> {
    let mut out = TweetFile::default();
    for line in raw.lines().filter(|l| !l.trim().is_empty()) {
        match parse_tweet_line(line) {
            Some(t) => out.tweets.push(t),
            None => out.skipped += 1,
        }
    }
    if out.skipped > 0 {
        log::warn!("{}: skipped {} unparseable lines", origin.display(), out.skipped);
    }
    if out.tweets.is_empty() {
        return Err(Error::Empty(format!(
            "{}: no parseable tweets",
            origin.display()
        )));
    }
    Ok(out)
}

/// Raw prices and tweets for a set of tickers, plus a record of which files
/// were opened.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub prices: BTreeMap<String, Vec<PriceDay>>,
    pub tweets: BTreeMap<String, Vec<Tweet>>,
    pub skipped_tweet_lines: usize,
    /// Number of times each source file was read.
    pub files_read: BTreeMap<PathBuf, usize>,
}

impl Corpus {
    /// Calendar dates with at least one tweet, per ticker.
    pub fn tweet_dates(&self) -> BTreeMap<String, BTreeSet<NaiveDate>> {
        self.tweets
            .iter()
            .map(|(t, list)| (t.clone(), list.iter().map(|tw| tw.date).collect()))
            .collect()
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Loads every `<TICKER>.csv` under `prices_dir` and, when given, every file
/// under `tweets_dir/<TICKER>/`. Each file is read exactly once.
pub fn load_corpus(prices_dir: &Path, tweets_dir: Option<&Path>) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    for path in sorted_entries(prices_dir)? {
        if path.extension().and_then(|e| e.to_str()) != Some("csv") {
            continue;
        }
        let days = parse_price_csv(&path)?;
        *corpus.files_read.entry(path.clone()).or_default() += 1;
        let ticker = days
            .first()
            .map(|d| d.stock.clone())
            .unwrap_or_else(|| path.file_stem().unwrap().to_string_lossy().into_owned());
        corpus.prices.insert(ticker, days);
    }
    if corpus.prices.is_empty() {
        return Err(Error::Empty(format!(
            "no price files in {}",
            prices_dir.display()
        )));
    }

    if let Some(tweets_dir) = tweets_dir {
        let (tweets, skipped) = read_tweet_dirs(tweets_dir, &mut corpus.files_read)?;
        corpus.tweets = tweets;
        corpus.skipped_tweet_lines = skipped;
    }
    Ok(corpus)
}

/// Loads tweets alone, keyed by ticker directory name. Returns the tweets
/// and the number of skipped lines.
pub fn load_tweets(tweets_dir: &Path) -> Result<(BTreeMap<String, Vec<Tweet>>, usize)> {
    read_tweet_dirs(tweets_dir, &mut BTreeMap::new())
}

fn read_tweet_dirs(
    tweets_dir: &Path,
    files_read: &mut BTreeMap<PathBuf, usize>,
) -> Result<(BTreeMap<String, Vec<Tweet>>, usize)> {
    let mut out = BTreeMap::new();
    let mut skipped = 0;
    for ticker_dir in sorted_entries(tweets_dir)? {
        if !ticker_dir.is_dir() {
            continue;
        }
        let ticker = ticker_dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut tweets = Vec::new();
        for file in sorted_entries(&ticker_dir)? {
            if !file.is_file() {
                continue;
            }
            let parsed = parse_tweet_file(&file)?;
            *files_read.entry(file).or_default() += 1;
            skipped += parsed.skipped;
            tweets.extend(parsed.tweets);
        }
        tweets.sort_by(|a, b| a.date.cmp(&b.date));
        out.insert(ticker, tweets);
    }
    Ok((out, skipped))
}
