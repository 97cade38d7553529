//! Per-(ticker, calendar date) tweet embeddings.
//!
//! The pretrained tweet encoder is frozen, so embeddings are computed once
//! and consumed through [`EmbeddingCache`]. [`pseudo_embed`] is a
//! deterministic stand-in used when no exported cache is available.
//!
//! Cache file layout (little-endian):
//!
//! ```text
//! "EMBC" | u32 version=1 | u32 dim | u16 tag_len | tag bytes | u64 entries
//! entry: u16 ticker_len | ticker bytes | i32 days since 1970-01-01 | f32 × dim
//! ```
//!
//! Entries are written in (ticker, date) order.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::binfmt::{self, Reader, Writer};
use crate::dataset::Tweet;
use crate::error::{Error, Result};

pub const DEFAULT_EMBED_DIM: usize = 768;
const MAGIC: &[u8; 4] = b"EMBC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DayKey {
    pub ticker: String,
    pub date: NaiveDate,
}

impl DayKey {
    pub fn new(ticker: impl Into<String>, date: NaiveDate) -> Self {
        DayKey {
            ticker: ticker.into(),
            date,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    dim: usize,
    source_tag: String,
    entries: BTreeMap<DayKey, Vec<f32>>,
}

impl EmbeddingCache {
    pub fn new(dim: usize, source_tag: impl Into<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("dim", "embedding dimension must be positive"));
        }
        Ok(EmbeddingCache {
            dim,
            source_tag: source_tag.into(),
            entries: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, key: DayKey, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::config(
                "dim",
                format!(
                    "vector for {} {} has {} values, cache dim is {}",
                    key.ticker,
                    key.date,
                    vector.len(),
                    self.dim
                ),
            ));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite embedding for {} {}",
                key.ticker, key.date
            )));
        }
        self.entries.insert(key, vector);
        Ok(())
    }

    pub fn get(&self, ticker: &str, date: NaiveDate) -> Option<&[f32]> {
        self.entries
            .get(&DayKey::new(ticker, date))
            .map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DayKey, &[f32])> {
        self.entries.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// The stored vector and `true`, or a zero vector and `false` when the
    /// day has no entry.
    pub fn resolve_day(&self, ticker: &str, date: NaiveDate) -> (Vec<f32>, bool) {
        match self.get(ticker, date) {
            Some(v) => (v.to_vec(), true),
            None => (vec![0.0; self.dim], false),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.dim as u32);
        w.short_str(&self.source_tag)?;
        w.u64(self.entries.len() as u64);
        for (key, vector) in &self.entries {
            w.short_str(&key.ticker)?;
            w.i32(binfmt::date_to_days(key.date));
            vector.iter().for_each(|&v| w.f32(v));
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "embedding cache");
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let dim = r.u32()? as usize;
        let tag = r.short_str()?;
        let mut cache = EmbeddingCache::new(dim, tag)?;
        let count = r.u64()?;
        for _ in 0..count {
            let ticker = r.short_str()?;
            let date = binfmt::days_to_date(r.i32()?)?;
            let vector = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            let key = DayKey::new(ticker, date);
            if cache.entries.contains_key(&key) {
                return Err(Error::Format(format!(
                    "embedding cache: duplicate entry {} {}",
                    key.ticker, key.date
                )));
            }
            cache.insert(key, vector)?;
        }
        r.finish()?;
        Ok(cache)
    }
}

pub fn write_cache(cache: &EmbeddingCache, path: &Path) -> Result<()> {
    binfmt::write_atomic(path, &cache.to_bytes()?)
}

pub fn read_cache(path: &Path) -> Result<EmbeddingCache> {
    EmbeddingCache::from_bytes(&binfmt::read_file(path)?)
}

/// Coordinate-wise arithmetic mean.
pub fn average_day_embeddings<V: AsRef<[f64]>>(vectors: &[V]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Empty("no vectors to average".into()))?;
    let dim = first.as_ref().len();
    let mut mean = vec![0.0; dim];
    for v in vectors {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(Error::config(
                "dim",
                format!("mixed vector lengths {dim} and {}", v.len()),
            ));
        }
        mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
    }
    let n = vectors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Deterministic unit-norm vector derived from `(text, seed)`.
pub fn pseudo_embed(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    assert!(dim >= 1, "embedding dimension must be positive");
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(text.as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Builds a cache by pseudo-embedding every tweet and averaging per
/// (ticker, calendar date).
pub fn build_pseudo_cache(
    tweets: &BTreeMap<String, Vec<Tweet>>,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingCache> {
    let mut cache = EmbeddingCache::new(dim, format!("pseudo-embed seed={seed}"))?;
    for (ticker, list) in tweets {
        let mut by_day: BTreeMap<NaiveDate, Vec<Vec<f64>>> = BTreeMap::new();
        for tweet in list {
            by_day
                .entry(tweet.date)
                .or_default()
                .push(pseudo_embed(&tweet.text, dim, seed));
        }
        for (date, vectors) in by_day {
            let mean = average_day_embeddings(&vectors)?;
            cache.insert(
                DayKey::new(ticker.clone(), date),
                mean.iter().map(|&v| v as f32).collect(),
            )?;
        }
    }
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    #[test]
    fn average_examples() {
        let v = vec![vec![0.25, -1.0, 3.0]];
        assert_eq!(average_day_embeddings(&v).unwrap(), v[0]);
        let pair = [vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(average_day_embeddings(&pair).unwrap(), vec![0.5, 0.5]);
        let empty: [Vec<f64>; 0] = [];
        assert!(matches!(average_day_embeddings(&empty), Err(Error::Empty(_))));
        assert!(average_day_embeddings(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn average_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..16).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let mean = average_day_embeddings(&vs).unwrap();
        for j in 0..16 {
            let brute = (vs[0][j] + vs[1][j] + vs[2][j]) / 3.0;
            assert!((mean[j] - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn pseudo_embed_is_deterministic_unit_norm() {
        let a = pseudo_embed("$AAPL to the moon", 768, 3);
        let b = pseudo_embed("$AAPL to the moon", 768, 3);
        assert_eq!(a, b);
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_ne!(a, pseudo_embed("$AAPL to the moon", 768, 4));
        let one = pseudo_embed("x", 1, 0);
        assert!((one[0].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pseudo_embed_repeated_calls_byte_identical() {
        let first = pseudo_embed("repeat", 32, 1);
        for _ in 0..10_000 {
            let again = pseudo_embed("repeat", 32, 1);
            assert!(first.iter().zip(&again).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn pseudo_embed_distinct_texts_nearly_orthogonal() {
        let mut within = 0;
        for i in 0..1000u64 {
            let a = pseudo_embed(&format!("tweet a{i}"), 768, i);
            let b = pseudo_embed(&format!("tweet b{i}"), 768, i);
            let cos: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            if cos.abs() < 0.2 {
                within += 1;
            }
        }
        assert!(within >= 990, "{within}/1000");
    }

    #[test]
    fn resolve_day_flags_absence() {
        let mut cache = EmbeddingCache::new(3, "t").unwrap();
        cache.insert(DayKey::new("AAPL", d("2015-01-05")), vec![1.0, 2.0, 3.0]).unwrap();
        cache.insert(DayKey::new("AAPL", d("2015-01-06")), vec![0.0; 3]).unwrap();
        assert_eq!(cache.resolve_day("AAPL", d("2015-01-07")), (vec![0.0; 3], false));
        assert_eq!(cache.resolve_day("AAPL", d("2015-01-05")), (vec![1.0, 2.0, 3.0], true));
        assert_eq!(cache.resolve_day("AAPL", d("2015-01-06")), (vec![0.0; 3], true));
    }

    #[test]
    fn insert_validates_dim_and_finiteness() {
        let mut cache = EmbeddingCache::new(2, "t").unwrap();
        assert!(cache.insert(DayKey::new("A", d("2015-01-01")), vec![1.0]).is_err());
        assert!(cache
            .insert(DayKey::new("A", d("2015-01-01")), vec![1.0, f32::NAN])
            .is_err());
    }

    #[test]
    fn cache_file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.embc");
        let empty = EmbeddingCache::new(4, "empty").unwrap();
        write_cache(&empty, &path).unwrap();
        assert_eq!(read_cache(&path).unwrap(), empty);

        let mut cache = EmbeddingCache::new(3, "pseudo").unwrap();
        cache.insert(DayKey::new("GOOG", d("2014-03-01")), vec![0.1, 0.2, 0.3]).unwrap();
        cache.insert(DayKey::new("AAPL", d("2015-12-31")), vec![-1.5, 0.0, 9.0]).unwrap();
        write_cache(&cache, &path).unwrap();
        assert_eq!(read_cache(&path).unwrap(), cache);

        let bytes = cache.to_bytes().unwrap();
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(
                EmbeddingCache::from_bytes(&bytes[..cut]),
                Err(Error::Format(_))
            ));
        }
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(EmbeddingCache::from_bytes(&wrong_version).is_err());
        let mut wrong_magic = bytes;
        wrong_magic[0] = b'X';
        assert!(EmbeddingCache::from_bytes(&wrong_magic).is_err());
    }

    #[test]
    fn pseudo_cache_averages_per_calendar_day() {
        let mut tweets = BTreeMap::new();
        tweets.insert(
            "AAPL".to_string(),
            vec![
                Tweet { date: d("2015-01-05"), text: "a".into(), id: None },
                Tweet { date: d("2015-01-05"), text: "b".into(), id: None },
                Tweet { date: d("2015-01-06"), text: "c".into(), id: None },
            ],
        );
        let cache = build_pseudo_cache(&tweets, 8, 1).unwrap();
        assert_eq!(cache.len(), 2);
        let expect = average_day_embeddings(&[pseudo_embed("a", 8, 1), pseudo_embed("b", 8, 1)]).unwrap();
        let got = cache.get("AAPL", d("2015-01-05")).unwrap();
        for (g, e) in got.iter().zip(expect) {
            assert_eq!(*g, e as f32);
        }
    }

    proptest! {
        #[test]
        fn average_is_permutation_invariant(
            vs in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 4), 1..6),
            rot in 0usize..6,
        ) {
            let mut rotated = vs.clone();
            rotated.rotate_left(rot % vs.len());
            let a = average_day_embeddings(&vs).unwrap();
            let b = average_day_embeddings(&rotated).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn randomized_cache_round_trip_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut cache = EmbeddingCache::new(16, "random").unwrap();
        let start = d("2014-01-01");
        for i in 0..1000 {
            let ticker = format!("T{}", i % 37);
            let date = start + chrono::Duration::days(i / 37);
            let v = (0..16).map(|_| rng.random_range(-3.0f32..3.0)).collect();
            cache.insert(DayKey::new(ticker, date), v).unwrap();
        }
        let back = EmbeddingCache::from_bytes(&cache.to_bytes().unwrap()).unwrap();
        assert_eq!(back.len(), 1000);
        assert_eq!(back, cache);
    }
}
