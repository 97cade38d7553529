//! Single-file sample store.
//!
//! Every sample is written fully resolved, with its five day embeddings
//! inlined, so training and evaluation never go back to raw files.
//!
//! ```text
//! "STKF" | u32 version=1 | u32 embed_dim | u64 count × 3 (train, validation, test)
//! u64 offset × total     absolute byte offset of each record, split-major
//! record: u16 ticker_len | ticker | i32 target days since 1970-01-01
//!         | u8 label | u8 aux bits | u8 text-present bits | f64 movement_pct
//!         | f32 × 30 price features | f32 × 5·embed_dim text
//! ```

use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{GeneratedSamples, Sample, Split, PRICE_DIM, WINDOW};
use crate::binfmt::{self, Reader, Writer};
use crate::embeddings::EmbeddingCache;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STORE_MAGIC: &[u8; 4] = b"STKF";
pub const STORE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 3 * 8;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredSample {
    pub stock: String,
    pub target_date: NaiveDate,
    pub label: u8,
    pub aux_labels: [u8; WINDOW],
    /// Whether any tweet embedding was found for each window day.
    pub text_present: [bool; WINDOW],
    pub movement_pct: f64,
    /// Row-major `[5 × 6]`.
    pub price: Vec<f32>,
    /// Row-major `[5 × embed_dim]`.
    pub text: Vec<f32>,
}

/// Resolves a sample's window days against the cache. A day's vector is the
/// mean of the cached vectors of every calendar date attributed to it.
pub fn resolve_sample(sample: &Sample, cache: &EmbeddingCache) -> StoredSample {
    let dim = cache.dim();
    let mut text = Vec::with_capacity(WINDOW * dim);
    let mut text_present = [false; WINDOW];
    for (present, day) in text_present.iter_mut().zip(&sample.tweet_days) {
        let mut sum = vec![0.0f64; dim];
        let mut found = 0usize;
        for &date in &day.tweet_dates {
            if let Some(v) = cache.get(&sample.stock, date) {
                sum.iter_mut().zip(v).for_each(|(s, &x)| *s += f64::from(x));
                found += 1;
            }
        }
        *present = found > 0;
        let n = found.max(1) as f64;
        text.extend(sum.iter().map(|s| (s / n) as f32));
    }
    StoredSample {
        stock: sample.stock.clone(),
        target_date: sample.target_date,
        label: sample.label,
        aux_labels: sample.aux_labels,
        text_present,
        movement_pct: sample.movement_pct,
        price: sample.price_feats.iter().flatten().map(|&v| v as f32).collect(),
        text,
    }
}

fn bits(flags: impl Iterator<Item = bool>) -> u8 {
    flags.enumerate().fold(0, |acc, (i, f)| acc | (u8::from(f) << i))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleStore {
    embed_dim: usize,
    splits: [Vec<StoredSample>; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreSummary {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub embed_dim: usize,
    pub bytes: usize,
}

impl StoreSummary {
    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

impl SampleStore {
    pub fn new(embed_dim: usize) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::config("embed_dim", "must be positive"));
        }
        Ok(SampleStore {
            embed_dim,
            splits: Default::default(),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn push(&mut self, split: Split, sample: StoredSample) -> Result<()> {
        if sample.text.len() != WINDOW * self.embed_dim || sample.price.len() != WINDOW * PRICE_DIM {
            return Err(Error::Format(format!(
                "sample {} {} has {} text and {} price values for embed_dim {}",
                sample.stock,
                sample.target_date,
                sample.text.len(),
                sample.price.len(),
                self.embed_dim
            )));
        }
        if sample.label > 1 || sample.aux_labels.iter().any(|&a| a > 1) {
            return Err(Error::Format(format!(
                "sample {} {} has non-binary labels",
                sample.stock, sample.target_date
            )));
        }
        self.splits[split.index()].push(sample);
        Ok(())
    }

    pub fn samples(&self, split: Split) -> &[StoredSample] {
        &self.splits[split.index()]
    }

    pub fn len(&self, split: Split) -> usize {
        self.splits[split.index()].len()
    }

    pub fn summary(&self) -> StoreSummary {
        StoreSummary {
            train: self.len(Split::Train),
            validation: self.len(Split::Validation),
            test: self.len(Split::Test),
            embed_dim: self.embed_dim,
            bytes: 0,
        }
    }

    fn record_len(&self, ticker_len: usize) -> usize {
        2 + ticker_len + 4 + 3 + 8 + 4 * WINDOW * (PRICE_DIM + self.embed_dim)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let total: usize = self.splits.iter().map(Vec::len).sum();
        let mut w = Writer::default();
        w.bytes(STORE_MAGIC);
        w.u32(STORE_VERSION);
        w.u32(self.embed_dim as u32);
        for split in &self.splits {
            w.u64(split.len() as u64);
        }
        let mut offset = HEADER_LEN + 8 * total;
        for s in self.splits.iter().flatten() {
            w.u64(offset as u64);
            offset += self.record_len(s.stock.len());
        }
        for s in self.splits.iter().flatten() {
            w.short_str(&s.stock)?;
            w.i32(binfmt::date_to_days(s.target_date));
            w.u8(s.label);
            w.u8(bits(s.aux_labels.iter().map(|&a| a == 1)));
            w.u8(bits(s.text_present.iter().copied()));
            w.f64(s.movement_pct);
            s.price.iter().chain(&s.text).for_each(|&v| w.f32(v));
        }
        debug_assert_eq!(w.buf.len(), offset);
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "sample store");
        r.magic(STORE_MAGIC)?;
        r.version(STORE_VERSION)?;
        let embed_dim = r.u32()? as usize;
        let mut store = SampleStore::new(embed_dim)
            .map_err(|_| Error::Format("sample store: zero embed_dim".into()))?;
        let mut counts = [0usize; 3];
        for c in &mut counts {
            *c = usize::try_from(r.u64()?)
                .map_err(|_| Error::Format("sample store: count overflow".into()))?;
        }
        let total = counts.iter().try_fold(0usize, |a, &c| a.checked_add(c));
        let total = total
            .filter(|&t| t.checked_mul(8).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| Error::Format("sample store: index larger than file".into()))?;
        let offsets = (0..total).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        if offsets.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Format(
                "sample store: index offsets not strictly increasing".into(),
            ));
        }

        let mut ordinal = 0;
        for (split, &count) in Split::ALL.iter().zip(&counts) {
            for _ in 0..count {
                if offsets[ordinal] != r.pos() as u64 {
                    return Err(Error::Format(format!(
                        "sample store: record {ordinal} at byte {} but index says {}",
                        r.pos(),
                        offsets[ordinal]
                    )));
                }
                let record = read_record(&mut r, embed_dim)?;
                store.push(*split, record)?;
                ordinal += 1;
            }
        }
        r.finish()?;
        Ok(store)
    }

    pub fn write(&self, path: &Path) -> Result<StoreSummary> {
        let bytes = self.to_bytes()?;
        binfmt::write_atomic(path, &bytes)?;
        Ok(StoreSummary {
            bytes: bytes.len(),
            ..self.summary()
        })
    }

    pub fn open(path: &Path) -> Result<Self> {
        SampleStore::from_bytes(&binfmt::read_file(path)?)
    }
}

fn read_record(r: &mut Reader<'_>, embed_dim: usize) -> Result<StoredSample> {
    let stock = r.short_str()?;
    let target_date = binfmt::days_to_date(r.i32()?)?;
    let label = r.u8()?;
    let aux = r.u8()?;
    let present = r.u8()?;
    if aux >> WINDOW != 0 || present >> WINDOW != 0 {
        return Err(Error::Format(format!(
            "sample store: {stock} {target_date} has stray flag bits"
        )));
    }
    let movement_pct = r.f64()?;
    let price = (0..WINDOW * PRICE_DIM)
        .map(|_| r.f32())
        .collect::<Result<Vec<_>>>()?;
    let text = (0..WINDOW * embed_dim)
        .map(|_| r.f32())
        .collect::<Result<Vec<_>>>()?;
    Ok(StoredSample {
        stock,
        target_date,
        label,
        aux_labels: std::array::from_fn(|i| (aux >> i) & 1),
        text_present: std::array::from_fn(|i| (present >> i) & 1 == 1),
        movement_pct,
        price,
        text,
    })
}

/// Resolves all samples against the cache and writes the store file.
pub fn build_sample_store(
    samples: &GeneratedSamples,
    cache: &EmbeddingCache,
    path: &Path,
) -> Result<StoreSummary> {
    let mut store = SampleStore::new(cache.dim())?;
    for split in Split::ALL {
        for sample in samples.split(split) {
            store.push(split, resolve_sample(sample, cache))?;
        }
    }
    store.write(path)
}

/// A minibatch promoted to f64.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B × 5 × 6]`
    pub price: Tensor,
    /// `[B × 5 × embed_dim]`
    pub text: Tensor,
    pub labels: Vec<f64>,
    /// Row-major `[B × 5]` window-day signs.
    pub aux_labels: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-position targets for auxiliary heads, row-major `[B × 5]`:
    /// position `t` is scored against the day after window day `t`, so
    /// the row is the last four window signs followed by the label.
    pub fn aux_targets(&self) -> Vec<f64> {
        self.aux_labels
            .chunks(WINDOW)
            .zip(&self.labels)
            .flat_map(|(signs, &y)| signs[1..].iter().copied().chain([y]))
            .collect()
    }

    /// Builds a batch from stored samples in the given order.
    pub fn from_samples(samples: &[&StoredSample], embed_dim: usize) -> Result<Batch> {
        let b = samples.len();
        let price = samples
            .iter()
            .flat_map(|s| s.price.iter().map(|&v| f64::from(v)))
            .collect();
        let text = samples
            .iter()
            .flat_map(|s| s.text.iter().map(|&v| f64::from(v)))
            .collect();
        Ok(Batch {
            price: Tensor::new(vec![b, WINDOW, PRICE_DIM], price)?,
            text: Tensor::new(vec![b, WINDOW, embed_dim], text)?,
            labels: samples.iter().map(|s| f64::from(s.label)).collect(),
            aux_labels: samples
                .iter()
                .flat_map(|s| s.aux_labels.iter().map(|&a| f64::from(a)))
                .collect(),
        })
    }
}

/// Iterator over the batches of one split.
pub struct Batches<'a> {
    store: &'a SampleStore,
    split: Split,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let rows = self.store.samples(self.split);
        let picked: Vec<&StoredSample> =
            self.order[self.next..end].iter().map(|&i| &rows[i]).collect();
        self.next = end;
        Some(Batch::from_samples(&picked, self.store.embed_dim).expect("store validated shapes"))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.next).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}

/// Batches of `split` in store order, or shuffled deterministically when a
/// seed is given. The final batch may be short.
pub fn iterate_batches(
    store: &SampleStore,
    split: Split,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let mut order: Vec<usize> = (0..store.len(split)).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(Batches {
        store,
        split,
        order,
        batch_size,
        next: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::WindowDay;
    use crate::embeddings::DayKey;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn stored(i: usize, dim: usize) -> StoredSample {
        StoredSample {
            stock: format!("S{i}"),
            target_date: d("2015-03-02") + chrono::Duration::days(i as i64),
            label: (i % 2) as u8,
            aux_labels: [1, 0, (i % 2) as u8, 1, 0],
            text_present: [true, false, true, i % 3 == 0, false],
            movement_pct: 0.6 + i as f64 * 0.013,
            price: (0..30).map(|k| (k + i) as f32 * 0.01).collect(),
            text: (0..5 * dim).map(|k| (k * 7 + i) as f32 * -0.25).collect(),
        }
    }

    fn store_with(n: usize, dim: usize) -> SampleStore {
        let mut s = SampleStore::new(dim).unwrap();
        for i in 0..n {
            s.push(Split::ALL[i % 3], stored(i, dim)).unwrap();
        }
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let store = store_with(17, 4);
        let bytes = store.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"STKF");
        let back = SampleStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = store_with(5, 3).to_bytes().unwrap();
        for cut in [3, 10, HEADER_LEN + 4, bytes.len() - 1] {
            assert!(matches!(SampleStore::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(SampleStore::from_bytes(&bad).is_err());
        let mut swapped = bytes.clone();
        let (a, b) = (HEADER_LEN, HEADER_LEN + 8);
        let first: Vec<u8> = swapped[a..b].to_vec();
        swapped.copy_within(b..b + 8, a);
        swapped[b..b + 8].copy_from_slice(&first);
        assert!(SampleStore::from_bytes(&swapped).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(SampleStore::from_bytes(&extra).is_err());
    }

    #[test]
    fn batch_partition_and_order() {
        let mut store = SampleStore::new(2).unwrap();
        for i in 0..10 {
            store.push(Split::Train, stored(i, 2)).unwrap();
        }
        let sizes: Vec<usize> = iterate_batches(&store, Split::Train, 4, None)
            .unwrap()
            .map(|b| b.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);

        let first = iterate_batches(&store, Split::Train, 4, None).unwrap().next().unwrap();
        assert_eq!(first.labels, vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(first.price.shape(), &[4, 5, 6]);
        assert_eq!(first.text.shape(), &[4, 5, 2]);

        let order = |seed| -> Vec<f64> {
            iterate_batches(&store, Split::Train, 3, Some(seed))
                .unwrap()
                .flat_map(|b| b.price.data().chunks(30).map(|c| c[0]).collect::<Vec<_>>())
                .collect()
        };
        assert_eq!(order(7), order(7));
        assert_ne!(order(7), order(8));
        let mut seen = order(7);
        seen.sort_by(f64::total_cmp);
        let expect: Vec<f64> = (0..10).map(|i| f64::from(i as f32 * 0.01)).collect();
        assert_eq!(seen, expect);
        assert!(iterate_batches(&store, Split::Train, 0, None).is_err());
    }

    #[test]
    fn resolve_averages_attributed_dates() {
        let mut cache = EmbeddingCache::new(2, "t").unwrap();
        cache.insert(DayKey::new("A", d("2015-01-03")), vec![1.0, 2.0]).unwrap();
        cache.insert(DayKey::new("A", d("2015-01-05")), vec![3.0, 0.0]).unwrap();
        cache.insert(DayKey::new("A", d("2015-01-06")), vec![0.0, 0.0]).unwrap();
        let day = |t: &str, ds: &[&str]| WindowDay {
            trading_date: d(t),
            tweet_dates: ds.iter().map(|s| d(s)).collect(),
        };
        let sample = Sample {
            stock: "A".into(),
            target_date: d("2015-01-09"),
            price_feats: [[0.5; 6]; 5],
            tweet_days: vec![
                day("2015-01-02", &[]),
                day("2015-01-05", &["2015-01-03", "2015-01-04", "2015-01-05"]),
                day("2015-01-06", &["2015-01-06"]),
                day("2015-01-07", &[]),
                day("2015-01-08", &[]),
            ],
            label: 1,
            aux_labels: [0, 1, 1, 0, 1],
            movement_pct: 1.0,
        };
        let r = resolve_sample(&sample, &cache);
        assert_eq!(r.text_present, [false, true, true, false, false]);
        assert_eq!(&r.text[2..4], &[2.0, 1.0]);
        assert_eq!(&r.text[4..6], &[0.0, 0.0]);
        assert!(r.text[..2].iter().chain(&r.text[6..]).all(|&v| v == 0.0));
    }
}
