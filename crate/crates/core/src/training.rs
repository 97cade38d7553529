//! Losses, Adam, and the epoch loop with early stopping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{iterate_batches, Batch, SampleStore, Split, WINDOW};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::models::StockModel;
use crate::nn::{Mode, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

pub const PROB_FLOOR: f64 = 1e-12;
/// Probabilities at or above this are predicted positive.
pub const DECISION_THRESHOLD: f64 = 0.5;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

fn check_labels(labels: &[f64]) -> Result<()> {
    match labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        Some(y) => Err(Error::Domain(format!("label {y} is not 0 or 1"))),
        None => Ok(()),
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::config("aux_weight", format!("{alpha} is outside [0, 1]")))
    }
}

/// Element-wise `−[y·ln p + (1−y)·ln(1−p)]` with clamped probabilities.
fn bce_terms(tape: &mut Tape, probs: Var, labels: &[f64]) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    if shape.iter().product::<usize>() != labels.len() {
        return Err(Error::Alignment(format!(
            "{} labels for probabilities of shape {shape:?}",
            labels.len()
        )));
    }
    check_labels(labels)?;
    let p = tape.clamp(probs, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let log_p = tape.ln(p);
    let neg = tape.scale(p, -1.0);
    let q = tape.add_scalar(neg, 1.0);
    let log_q = tape.ln(q);
    let y = tape.constant(Tensor::new(shape.clone(), labels.to_vec())?);
    let not_y = tape.constant(Tensor::new(shape, labels.iter().map(|y| 1.0 - y).collect())?);
    let a = tape.mul(log_p, y)?;
    let b = tape.mul(log_q, not_y)?;
    let sum = tape.add(a, b)?;
    Ok(tape.scale(sum, -1.0))
}

/// Mean binary cross-entropy of `probs` (`[B]`) on the tape.
pub fn bce_loss_var(tape: &mut Tape, probs: Var, labels: &[f64]) -> Result<Var> {
    let terms = bce_terms(tape, probs, labels)?;
    Ok(tape.mean(terms))
}

/// Weighted sum over window positions of per-position mean cross-entropy.
/// The last position weighs 1 and the others `alpha`. `targets` is
/// row-major `[B × 5]`.
pub fn auxiliary_loss_var(tape: &mut Tape, aux_probs: Var, targets: &[f64], alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let shape = tape.shape(aux_probs).to_vec();
    if shape.len() != 2 || shape[1] != WINDOW {
        return Err(Error::Alignment(format!("auxiliary probabilities have shape {shape:?}")));
    }
    let terms = bce_terms(tape, aux_probs, targets)?;
    let b = shape[0] as f64;
    let weights = (0..shape[0] * WINDOW)
        .map(|i| if i % WINDOW == WINDOW - 1 { 1.0 } else { alpha } / b)
        .collect();
    let w = tape.constant(Tensor::new(shape, weights)?);
    let weighted = tape.mul(terms, w)?;
    Ok(tape.sum(weighted))
}

pub fn bce_loss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(vec![probs.len()], probs.to_vec())?);
    let loss = bce_loss_var(&mut tape, p, labels)?;
    Ok(tape.value(loss).item())
}

pub fn auxiliary_loss(aux_probs: &[f64], targets: &[f64], alpha: f64) -> Result<f64> {
    if aux_probs.len() % WINDOW != 0 {
        return Err(Error::Alignment(format!(
            "{} auxiliary probabilities are not a multiple of {WINDOW}",
            aux_probs.len()
        )));
    }
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(vec![aux_probs.len() / WINDOW, WINDOW], aux_probs.to_vec())?);
    let loss = auxiliary_loss_var(&mut tape, p, targets, alpha)?;
    Ok(tape.value(loss).item())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 128,
            max_epochs: 100,
            patience: 4,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta", "Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        Ok(())
    }
}

/// Adam moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamState {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts the step
/// before anything is modified.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::Alignment(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.first.len(),
            params.len()
        )));
    }
    for ((name, tensor), g) in params.iter().zip(grads) {
        if g.len() != tensor.numel() {
            return Err(Error::Alignment(format!("gradient for {name} has {} values", g.len())));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient {} at index {i} of {name}",
                g[i]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, tensor) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (&mut state.first[k], &mut state.second[k]);
        for (i, w) in tensor.data_mut().iter_mut().enumerate() {
            let g = grads[k][i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Counts epochs without strict improvement of the monitored loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        let improved = match self.best {
            None => !loss.is_nan(),
            Some((_, best)) => loss < best,
        };
        if improved {
            self.best = Some((epoch, loss));
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_mcc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_epoch: usize,
    pub early_stopped: bool,
}

impl TrainReport {
    /// Line-delimited JSON, one record per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record serializes") + "\n")
            .collect()
    }
}

/// Validation metrics consumed by the epoch loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    pub loss: f64,
    pub accuracy: f64,
    pub mcc: f64,
}

impl From<&EvalReport> for Validation {
    fn from(r: &EvalReport) -> Self {
        Validation {
            loss: r.loss,
            accuracy: r.accuracy,
            mcc: r.mcc,
        }
    }
}

/// Loss of one minibatch on a fresh tape, with parameter gradients after
/// `backward`.
pub fn batch_loss(model: &StockModel, batch: &Batch, mode: &mut Mode<'_>) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape);
    let price = tape.constant(batch.price.clone());
    let text = tape.constant(batch.text.clone());
    let out = model.forward(&mut tape, &p, price, text, mode)?;
    let loss = match out.aux_probs {
        Some(aux) => auxiliary_loss_var(&mut tape, aux, &batch.aux_targets(), model.config().aux_weight)?,
        None => bce_loss_var(&mut tape, out.final_prob, &batch.labels)?,
    };
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Training(format!("non-finite loss {value}")));
    }
    tape.backward(loss)?;
    Ok((value, p.grads(&tape)))
}

/// Trains on the train split, validating on the validation split after
/// every epoch, and leaves the model at its best-validation parameters.
pub fn train(model: &mut StockModel, store: &SampleStore, cfg: &TrainConfig) -> Result<TrainReport> {
    if store.len(Split::Validation) == 0 {
        return Err(Error::Empty("validation split has no samples".into()));
    }
    let batch_size = cfg.batch_size;
    train_with(model, store, cfg, |m| {
        Ok(Validation::from(&evaluate(m, store, Split::Validation, batch_size)?))
    })
}

/// The epoch loop with a caller-supplied validation pass.
pub fn train_with(
    model: &mut StockModel,
    store: &SampleStore,
    cfg: &TrainConfig,
    mut validate: impl FnMut(&StockModel) -> Result<Validation>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let n_train = store.len(Split::Train);
    if n_train == 0 {
        return Err(Error::Empty("train split has no samples".into()));
    }
    if store.embed_dim() != model.config().embed_dim {
        return Err(Error::config(
            "embed_dim",
            format!(
                "store holds {}-d embeddings, model expects {}",
                store.embed_dim(),
                model.config().embed_dim
            ),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params: Vec<Tensor> = model.params().tensors().to_vec();
    let mut epochs = Vec::new();
    let mut early_stopped = false;

    for epoch in 1..=cfg.max_epochs {
        let shuffle_seed: u64 = rng.random();
        let mut loss_sum = 0.0;
        for batch in iterate_batches(store, Split::Train, cfg.batch_size, Some(shuffle_seed))? {
            let (loss, grads) = batch_loss(model, &batch, &mut Mode::Train(&mut rng))?;
            adam_step(model.params_mut(), &grads, &mut adam, cfg)?;
            loss_sum += loss * batch.len() as f64;
        }
        let val = validate(model)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n_train as f64,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
            val_mcc: val.mcc,
        };
        log::info!(
            "epoch {epoch}: train_loss={:.6} val_loss={:.6} val_accuracy={:.3} val_mcc={:.5}",
            record.train_loss,
            record.val_loss,
            record.val_accuracy,
            record.val_mcc
        );
        epochs.push(record);
        match stopper.observe(epoch, val.loss) {
            StopDecision::Improved => best_params = model.params().tensors().to_vec(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                early_stopped = true;
                break;
            }
        }
    }

    let stopped_epoch = epochs.len();
    let (best_epoch, best_val_loss) = stopper
        .best()
        .ok_or_else(|| Error::Training("validation loss was never finite".into()))?;
    for (dst, src) in model.params_mut().tensors_mut().iter_mut().zip(best_params) {
        dst.data_mut().copy_from_slice(src.data());
    }
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_val_loss,
        stopped_epoch,
        early_stopped,
    })
}

/// Hard labels from the target prediction; auxiliary outputs are ignored.
pub fn predict(model: &StockModel, batch: &Batch) -> Result<Vec<u8>> {
    let out = model.predict_probs(batch)?;
    Ok(threshold(&out.final_prob))
}

pub fn threshold(probs: &[f64]) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= DECISION_THRESHOLD)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bce_examples() {
        assert!((bce_loss(&[0.5; 4], &[0.0, 1.0, 1.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((bce_loss(&[0.9], &[0.0]).unwrap() - -(0.1f64).ln()).abs() < 1e-12);
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() <= 1e-11);
        assert!(matches!(bce_loss(&[0.5], &[2.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn auxiliary_examples() {
        let probs = [0.9, 0.2, 0.6, 0.7, 0.4];
        let targets = [1.0, 0.0, 0.0, 1.0, 1.0];
        let zero = auxiliary_loss(&probs, &targets, 0.0).unwrap();
        assert!((zero - bce_loss(&[0.4], &[1.0]).unwrap()).abs() < 1e-12);
        let per_day: Vec<f64> = probs
            .iter()
            .zip(&targets)
            .map(|(&p, &y)| bce_loss(&[p], &[y]).unwrap())
            .collect();
        let one = auxiliary_loss(&probs, &targets, 1.0).unwrap();
        assert!((one - per_day.iter().sum::<f64>()).abs() < 1e-12);
        assert!(auxiliary_loss(&probs, &targets, 1.1).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut params = ParamSet::new();
        params.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let cfg = TrainConfig { learning_rate: 1e-3, ..TrainConfig::default() };
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &[vec![0.0, 0.0, 0.0]], &mut state, &cfg).unwrap();
        assert_eq!(params.tensors()[0].data(), &[1.0, -2.0, 0.5]);
        assert!(state.first[0].iter().chain(&state.second[0]).all(|&v| v == 0.0));

        let mut state = AdamState::new(&params);
        adam_step(&mut params, &[vec![3.0, -0.5, 100.0]], &mut state, &cfg).unwrap();
        let moved: Vec<f64> = params.tensors()[0].data().iter().zip([1.0, -2.0, 0.5]).map(|(a, b)| a - b).collect();
        for (d, sign) in moved.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((d - sign * 1e-3).abs() < 1e-6);
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut params = ParamSet::new();
        params.add("layer.weight", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut state = AdamState::new(&params);
        let err = adam_step(&mut params, &[vec![0.1, f64::NAN]], &mut state, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("layer.weight"));
        assert_eq!(params.tensors()[0].data(), &[1.0, 2.0]);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn early_stopping_counts_stagnant_epochs() {
        let losses = [1.0, 0.9, 0.95, 0.96, 0.97, 0.98, 0.5];
        let mut s = EarlyStopping::new(4);
        let stop = losses
            .iter()
            .enumerate()
            .find_map(|(i, &l)| (s.observe(i + 1, l) == StopDecision::Stop).then_some(i + 1));
        assert_eq!(stop, Some(6));
        assert_eq!(s.best(), Some((2, 0.9)));

        let mut s = EarlyStopping::new(1);
        assert_eq!(s.observe(1, 1.0), StopDecision::Improved);
        assert_eq!(s.observe(2, 1.0), StopDecision::Stop);
    }

    #[test]
    fn threshold_ties_are_positive() {
        assert_eq!(threshold(&[0.5, 0.49, 0.51]), vec![1, 0, 1]);
    }

    proptest! {
        #[test]
        fn bce_symmetry(pairs in prop::collection::vec((0.001f64..0.999, any::<bool>()), 1..20)) {
            let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
            let y: Vec<f64> = pairs.iter().map(|x| f64::from(u8::from(x.1))).collect();
            let p2: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
            let y2: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
            prop_assert!((bce_loss(&p, &y).unwrap() - bce_loss(&p2, &y2).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn auxiliary_monotone_in_alpha(
            probs in prop::collection::vec(0.01f64..0.99, 10),
            bits in prop::collection::vec(any::<bool>(), 10),
            a in 0.0f64..1.0, b in 0.0f64..1.0,
        ) {
            let targets: Vec<f64> = bits.iter().map(|&x| f64::from(u8::from(x))).collect();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let l = auxiliary_loss(&probs, &targets, lo).unwrap();
            let h = auxiliary_loss(&probs, &targets, hi).unwrap();
            prop_assert!(l <= h + 1e-12);
        }
    }
}
