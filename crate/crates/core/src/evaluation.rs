//! Confusion counts, accuracy and the Matthews correlation coefficient.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, SampleStore, Split, StoredSample};
use crate::error::{Error, Result};
use crate::models::StockModel;
use crate::training::{clamp_prob, DECISION_THRESHOLD};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn merge(self, other: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            tn: self.tn + other.tn,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }

    fn record(&mut self, pred: u8, truth: u8) {
        match (pred, truth) {
            (1, 1) => self.tp += 1,
            (0, 0) => self.tn += 1,
            (1, 0) => self.fp += 1,
            _ => self.fn_ += 1,
        }
    }
}

pub fn confusion_counts(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::Alignment(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("no predictions to score".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        if p > 1 || t > 1 {
            return Err(Error::Domain(format!("labels must be 0 or 1, got {p} and {t}")));
        }
        c.record(p, t);
    }
    Ok(c)
}

/// Percentage of correct predictions; 0 for empty counts.
pub fn accuracy(c: &ConfusionCounts) -> f64 {
    match c.total() {
        0 => 0.0,
        n => 100.0 * (c.tp + c.tn) as f64 / n as f64,
    }
}

/// Matthews correlation coefficient, 0 when any marginal is empty.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, tn, fp, fn_) = (c.tp as i128, c.tn as i128, c.fp as i128, c.fn_ as i128);
    let numerator = tp * tn - fp * fn_;
    let left = ((tp + fp) * (tp + fn_)) as f64;
    let right = ((tn + fp) * (tn + fn_)) as f64;
    if left == 0.0 || right == 0.0 {
        return 0.0;
    }
    (numerator as f64 / (left.sqrt() * right.sqrt())).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub samples: usize,
    /// Percent.
    pub accuracy: f64,
    pub mcc: f64,
    /// Mean binary cross-entropy of the target prediction.
    pub loss: f64,
    pub counts: ConfusionCounts,
}

impl EvalReport {
    pub fn from_counts(split: Split, counts: ConfusionCounts, loss: f64) -> Self {
        EvalReport {
            split,
            samples: counts.total() as usize,
            accuracy: accuracy(&counts),
            mcc: mcc(&counts),
            loss,
            counts,
        }
    }

    /// One-line `key=value` record.
    pub fn to_record(&self) -> String {
        format!(
            "split={} samples={} accuracy={:.3} mcc={:.5} loss={:.6} tp={} tn={} fp={} fn={}",
            self.split,
            self.samples,
            self.accuracy,
            self.mcc,
            self.loss,
            self.counts.tp,
            self.counts.tn,
            self.counts.fp,
            self.counts.fn_
        )
    }
}

/// Scores `model` on one split in evaluation mode. Batches run in parallel
/// and are reduced in store order.
pub fn evaluate(
    model: &StockModel,
    store: &SampleStore,
    split: Split,
    batch_size: usize,
) -> Result<EvalReport> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let samples = store.samples(split);
    if samples.is_empty() {
        return Err(Error::Empty(format!("{split} split has no samples")));
    }
    let parts: Vec<(ConfusionCounts, f64)> = samples
        .par_chunks(batch_size)
        .map(|chunk| score_chunk(model, chunk, store.embed_dim()))
        .collect::<Result<_>>()?;
    let mut counts = ConfusionCounts::default();
    let mut loss_sum = 0.0;
    for (c, l) in parts {
        counts = counts.merge(c);
        loss_sum += l;
    }
    Ok(EvalReport::from_counts(split, counts, loss_sum / samples.len() as f64))
}

fn score_chunk(
    model: &StockModel,
    chunk: &[StoredSample],
    embed_dim: usize,
) -> Result<(ConfusionCounts, f64)> {
    let refs: Vec<&StoredSample> = chunk.iter().collect();
    let batch = Batch::from_samples(&refs, embed_dim)?;
    let probs = model.predict_probs(&batch)?.final_prob;
    let mut counts = ConfusionCounts::default();
    let mut loss = 0.0;
    for (&p, s) in probs.iter().zip(chunk) {
        counts.record(u8::from(p >= DECISION_THRESHOLD), s.label);
        let q = clamp_prob(p);
        loss -= if s.label == 1 { q.ln() } else { (1.0 - q).ln() };
    }
    Ok((counts, loss))
}
