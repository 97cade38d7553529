//! Classifiers over a five-day window of price features and day embeddings.
//!
//! * `feedforward`: flattens the whole window into one hidden ReLU layer.
//! * `fusion_transformer`: concatenates text and price per day, projects to
//!   `dim_key`, and runs an encoder stack.
//! * `cross_attention`: projects the two modalities separately and feeds four
//!   attention streams (price self, text self, price→text, text→price) into
//!   the encoder stack.
//!
//! Transformer variants classify from the last window day. With
//! `auxiliary`, one shared head scores every window day; position `t`
//! predicts the movement of the trading day after window day `t`, so the
//! last position is the target prediction itself.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binfmt::{self, Reader, Writer};
use crate::dataset::{Batch, PRICE_DIM, WINDOW};
use crate::embeddings::DEFAULT_EMBED_DIM;
use crate::error::{Error, Result};
use crate::nn::{
    add_positional_encoding, check_dropout, dropout, Bound, EncoderLayer, Linear, Mask, Mode,
    MultiHeadAttention, ParamSet,
};
use crate::tensor::{Tape, Tensor, Var};

const CKPT_MAGIC: &[u8; 4] = b"CKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Feedforward,
    FusionTransformer,
    CrossAttention,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Feedforward => "feedforward",
            Arch::FusionTransformer => "fusion_transformer",
            Arch::CrossAttention => "cross_attention",
        }
    }

    pub fn is_transformer(self) -> bool {
        self != Arch::Feedforward
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feedforward" => Ok(Arch::Feedforward),
            "fusion_transformer" | "fusion" => Ok(Arch::FusionTransformer),
            "cross_attention" | "cross" => Ok(Arch::CrossAttention),
            other => Err(Error::config("arch", format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Encoder layer count.
    pub layers: usize,
    pub heads: usize,
    pub dim_ff: usize,
    /// Model width of the transformer trunk.
    pub dim_key: usize,
    pub dropout: f64,
    pub auxiliary: bool,
    pub aux_weight: f64,
    pub price_dim: usize,
    pub embed_dim: usize,
    pub seq_len: usize,
    pub causal: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::FusionTransformer,
            layers: 1,
            heads: 2,
            dim_ff: 2048,
            dim_key: 512,
            dropout: 0.0,
            auxiliary: false,
            aux_weight: 0.5,
            price_dim: PRICE_DIM,
            embed_dim: DEFAULT_EMBED_DIM,
            seq_len: WINDOW,
            causal: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len != WINDOW {
            return Err(Error::config("seq_len", format!("must be {WINDOW}")));
        }
        if self.price_dim != PRICE_DIM {
            return Err(Error::config("price_dim", format!("must be {PRICE_DIM}")));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim", "must be positive"));
        }
        if self.dim_ff == 0 {
            return Err(Error::config("dim_ff", "must be positive"));
        }
        check_dropout(self.dropout)?;
        if !(0.0..=1.0).contains(&self.aux_weight) {
            return Err(Error::config("aux_weight", format!("{} is outside [0, 1]", self.aux_weight)));
        }
        if !self.arch.is_transformer() {
            if self.auxiliary {
                return Err(Error::config("auxiliary", "feedforward has no per-day outputs"));
            }
            return Ok(());
        }
        if self.layers == 0 {
            return Err(Error::config("layers", "must be at least 1"));
        }
        if self.heads == 0 || self.dim_key == 0 || self.dim_key % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("dim_key {} is not divisible by {} heads", self.dim_key, self.heads),
            ));
        }
        if self.dim_key % 2 != 0 {
            return Err(Error::config("dim_key", "positional encoding needs an even width"));
        }
        Ok(())
    }
}

/// Per-sample probabilities from an evaluation-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub final_prob: Vec<f64>,
    /// Row-major `[B × 5]`, present only for auxiliary models.
    pub aux_probs: Option<Vec<f64>>,
}

/// Tape handles of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[B]`
    pub final_prob: Var,
    /// `[B × 5]`
    pub aux_probs: Option<Var>,
}

struct CrossStreams {
    price_proj: Linear,
    text_proj: Linear,
    price_self: MultiHeadAttention,
    text_self: MultiHeadAttention,
    price_to_text: MultiHeadAttention,
    text_to_price: MultiHeadAttention,
    merge: Linear,
}

enum Body {
    Feedforward {
        hidden: Linear,
    },
    Fusion {
        input: Linear,
        encoder: Vec<EncoderLayer>,
    },
    Cross {
        streams: CrossStreams,
        encoder: Vec<EncoderLayer>,
    },
}

pub struct StockModel {
    config: ModelConfig,
    params: ParamSet,
    body: Body,
    head: Linear,
    mask: Option<Mask>,
}

fn encoder_stack(
    params: &mut ParamSet,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EncoderLayer>> {
    (0..cfg.layers)
        .map(|i| {
            EncoderLayer::new(
                params,
                &format!("encoder.{i}"),
                cfg.dim_key,
                cfg.heads,
                cfg.dim_ff,
                cfg.dropout,
                rng,
            )
        })
        .collect()
}

impl StockModel {
    /// Builds a model with weights drawn from a generator seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let p = &mut params;
        let (body, head_in) = match config.arch {
            Arch::Feedforward => {
                let flat = WINDOW * (config.embed_dim + config.price_dim);
                let hidden = Linear::new(p, "hidden", flat, config.dim_ff, rng);
                (Body::Feedforward { hidden }, config.dim_ff)
            }
            Arch::FusionTransformer => {
                let input = Linear::new(p, "input", config.embed_dim + config.price_dim, config.dim_key, rng);
                let encoder = encoder_stack(p, &config, rng)?;
                (Body::Fusion { input, encoder }, config.dim_key)
            }
            Arch::CrossAttention => {
                let dk = config.dim_key;
                let h = config.heads;
                let streams = CrossStreams {
                    price_proj: Linear::new(p, "price_proj", config.price_dim, dk, rng),
                    text_proj: Linear::new(p, "text_proj", config.embed_dim, dk, rng),
                    price_self: MultiHeadAttention::new(p, "stream.price_self", dk, h, rng)?,
                    text_self: MultiHeadAttention::new(p, "stream.text_self", dk, h, rng)?,
                    price_to_text: MultiHeadAttention::new(p, "stream.price_to_text", dk, h, rng)?,
                    text_to_price: MultiHeadAttention::new(p, "stream.text_to_price", dk, h, rng)?,
                    merge: Linear::new(p, "merge", 4 * dk, dk, rng),
                };
                let encoder = encoder_stack(p, &config, rng)?;
                (Body::Cross { streams, encoder }, dk)
            }
        };
        let head = Linear::new(p, "head", head_in, 1, rng);
        let mask = config.causal.then(|| Mask::causal(WINDOW));
        Ok(StockModel {
            config,
            params,
            body,
            head,
            mask,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn check_inputs(&self, tape: &Tape, price: Var, text: Var) -> Result<usize> {
        let ps = tape.shape(price);
        let ts = tape.shape(text);
        if ps.len() != 3 || ps[1] != WINDOW || ps[2] != self.config.price_dim {
            return Err(Error::config("price_dim", format!("price input has shape {ps:?}")));
        }
        if ts.len() != 3 || ts[0] != ps[0] || ts[1] != WINDOW || ts[2] != self.config.embed_dim {
            return Err(Error::config(
                "embed_dim",
                format!(
                    "text input has shape {ts:?}, model expects [{}, {WINDOW}, {}]",
                    ps[0], self.config.embed_dim
                ),
            ));
        }
        Ok(ps[0])
    }

    /// Records the forward pass on `tape`. `price` is `[B×5×6]` and `text`
    /// is `[B×5×embed_dim]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        price: Var,
        text: Var,
        mode: &mut Mode<'_>,
    ) -> Result<ForwardVars> {
        let b = self.check_inputs(tape, price, text)?;
        let mask = self.mask.as_ref();
        let days = match &self.body {
            Body::Feedforward { hidden } => {
                let joined = tape.concat(&[text, price], 2)?;
                let flat = tape.reshape(joined, &[b, hidden.in_dim])?;
                let h = hidden.forward(tape, p, flat)?;
                let h = tape.relu(h);
                let h = dropout(tape, h, self.config.dropout, mode)?;
                let logit = self.head.forward(tape, p, h)?;
                let prob = tape.sigmoid(logit);
                return Ok(ForwardVars {
                    final_prob: tape.reshape(prob, &[b])?,
                    aux_probs: None,
                });
            }
            Body::Fusion { input, encoder } => {
                let joined = tape.concat(&[text, price], 2)?;
                let x = input.forward(tape, p, joined)?;
                let mut x = add_positional_encoding(tape, x)?;
                for layer in encoder {
                    x = layer.forward(tape, p, x, mask, mode)?;
                }
                x
            }
            Body::Cross { streams, encoder } => {
                let [a, bb, c, d] = self.stream_vars(streams, tape, p, price, text)?;
                let joined = tape.concat(&[a, bb, c, d], 2)?;
                let mut x = streams.merge.forward(tape, p, joined)?;
                for layer in encoder {
                    x = layer.forward(tape, p, x, mask, mode)?;
                }
                x
            }
        };

        let dk = self.config.dim_key;
        if self.config.auxiliary {
            let logits = self.head.forward(tape, p, days)?;
            let probs = tape.sigmoid(logits);
            let probs = tape.reshape(probs, &[b, WINDOW])?;
            let last = tape.narrow(probs, 1, WINDOW - 1, 1)?;
            Ok(ForwardVars {
                final_prob: tape.reshape(last, &[b])?,
                aux_probs: Some(probs),
            })
        } else {
            let last = tape.narrow(days, 1, WINDOW - 1, 1)?;
            let last = tape.reshape(last, &[b, dk])?;
            let logit = self.head.forward(tape, p, last)?;
            let prob = tape.sigmoid(logit);
            Ok(ForwardVars {
                final_prob: tape.reshape(prob, &[b])?,
                aux_probs: None,
            })
        }
    }

    fn stream_vars(
        &self,
        s: &CrossStreams,
        tape: &mut Tape,
        p: &Bound,
        price: Var,
        text: Var,
    ) -> Result<[Var; 4]> {
        let mask = self.mask.as_ref();
        let pp = s.price_proj.forward(tape, p, price)?;
        let pp = add_positional_encoding(tape, pp)?;
        let tp = s.text_proj.forward(tape, p, text)?;
        let tp = add_positional_encoding(tape, tp)?;
        Ok([
            s.price_self.forward(tape, p, pp, pp, mask)?,
            s.text_self.forward(tape, p, tp, tp, mask)?,
            s.price_to_text.forward(tape, p, pp, tp, mask)?,
            s.text_to_price.forward(tape, p, tp, pp, mask)?,
        ])
    }

    /// The four cross-attention stream outputs before concatenation, each
    /// `[B×5×dim_key]`, in the order price self, text self, price→text,
    /// text→price.
    pub fn cross_attention_streams(&self, batch: &Batch) -> Result<[Tensor; 4]> {
        let Body::Cross { streams, .. } = &self.body else {
            return Err(Error::config("arch", "streams exist only for cross_attention"));
        };
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let price = tape.constant(batch.price.clone());
        let text = tape.constant(batch.text.clone());
        self.check_inputs(&tape, price, text)?;
        let vars = self.stream_vars(streams, &mut tape, &p, price, text)?;
        Ok(vars.map(|v| tape.value(v).clone()))
    }

    /// Evaluation-mode probabilities for a batch.
    pub fn predict_probs(&self, batch: &Batch) -> Result<ModelOutput> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let price = tape.constant(batch.price.clone());
        let text = tape.constant(batch.text.clone());
        let out = self.forward(&mut tape, &p, price, text, &mut Mode::Eval)?;
        Ok(ModelOutput {
            final_prob: tape.data(out.final_prob).to_vec(),
            aux_probs: out.aux_probs.map(|v| tape.data(v).to_vec()),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_string(&self.config)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut w = Writer::default();
        w.bytes(CKPT_MAGIC);
        w.u32(CKPT_VERSION);
        w.u32(json.len() as u32);
        w.bytes(json.as_bytes());
        w.u64(self.params.len() as u64);
        for (name, tensor) in self.params.iter() {
            w.short_str(name)?;
            w.u8(tensor.shape().len() as u8);
            tensor.shape().iter().for_each(|&d| w.u64(d as u64));
            tensor.data().iter().for_each(|&v| w.f64(v));
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(CKPT_MAGIC)?;
        r.version(CKPT_VERSION)?;
        let json_len = r.u32()? as usize;
        let json = r.take(json_len)?;
        let config: ModelConfig = serde_json::from_slice(json)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut model = StockModel::new(config, 0)?;
        let count = r.u64()?;
        if count != model.params.len() as u64 {
            return Err(Error::Format(format!(
                "checkpoint has {count} tensors, config implies {}",
                model.params.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for _ in 0..count {
            let name = r.short_str()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let slot = model
                .params
                .by_name_mut(&name)
                .filter(|t| t.shape() == shape.as_slice())
                .ok_or_else(|| {
                    Error::Format(format!("checkpoint tensor {name} {shape:?} does not fit the model"))
                })?;
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("checkpoint repeats tensor {name}")));
            }
            for v in slot.data_mut() {
                *v = r.f64()?;
            }
        }
        r.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binfmt::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        StockModel::from_bytes(&binfmt::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_many;
    use rand::Rng;

    fn tiny(arch: Arch, auxiliary: bool) -> ModelConfig {
        ModelConfig {
            arch,
            layers: 1,
            heads: 2,
            dim_ff: 16,
            dim_key: 8,
            dropout: 0.0,
            auxiliary,
            embed_dim: 12,
            ..ModelConfig::default()
        }
    }

    fn random_batch(b: usize, embed: usize, scale: f64, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-scale..scale)).collect() };
        Batch {
            price: Tensor::new(vec![b, 5, 6], draw(b * 30)).unwrap(),
            text: Tensor::new(vec![b, 5, embed], draw(b * 5 * embed)).unwrap(),
            labels: vec![0.0; b],
            aux_labels: vec![0.0; b * 5],
        }
    }

    #[test]
    fn config_validation() {
        let ok = tiny(Arch::CrossAttention, true);
        assert!(ok.validate().is_ok());
        let bad_heads = ModelConfig { heads: 3, ..ok.clone() };
        assert!(matches!(bad_heads.validate(), Err(Error::Config { field, .. }) if field == "heads"));
        let bad_alpha = ModelConfig { aux_weight: 1.5, ..ok.clone() };
        assert!(bad_alpha.validate().is_err());
        let bad_len = ModelConfig { seq_len: 6, ..ok };
        assert!(bad_len.validate().is_err());
        assert!(tiny(Arch::Feedforward, true).validate().is_err());
        let ff = ModelConfig { heads: 3, ..tiny(Arch::Feedforward, false) };
        assert!(ff.validate().is_ok());
    }

    #[test]
    fn output_shapes_and_ranges() {
        for arch in [Arch::Feedforward, Arch::FusionTransformer, Arch::CrossAttention] {
            for aux in [false, true] {
                if arch == Arch::Feedforward && aux {
                    continue;
                }
                let model = StockModel::new(tiny(arch, aux), 1).unwrap();
                for b in [1, 3] {
                    let out = model.predict_probs(&random_batch(b, 12, 10.0, 9)).unwrap();
                    assert_eq!(out.final_prob.len(), b);
                    assert!(out.final_prob.iter().all(|p| p.is_finite() && *p > 0.0 && *p < 1.0));
                    assert_eq!(out.aux_probs.as_ref().map(Vec::len), aux.then_some(b * 5));
                    if let Some(aux) = &out.aux_probs {
                        for (i, p) in out.final_prob.iter().enumerate() {
                            assert!((aux[i * 5 + 4] - p).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zeroed_feedforward_is_uninformed() {
        let mut model = StockModel::new(tiny(Arch::Feedforward, false), 2).unwrap();
        for t in model.params_mut().tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let out = model.predict_probs(&random_batch(4, 12, 1.0, 0)).unwrap();
        assert_eq!(out.final_prob, vec![0.5; 4]);
    }

    #[test]
    fn zeroed_head_gives_half_everywhere() {
        let mut model = StockModel::new(tiny(Arch::FusionTransformer, true), 2).unwrap();
        for name in ["head.weight", "head.bias"] {
            model.params_mut().by_name_mut(name).unwrap().data_mut().fill(0.0);
        }
        let out = model.predict_probs(&random_batch(2, 12, 1.0, 0)).unwrap();
        assert_eq!(out.aux_probs.unwrap(), vec![0.5; 10]);
    }

    #[test]
    fn day_order_matters() {
        let model = StockModel::new(tiny(Arch::FusionTransformer, false), 3).unwrap();
        let batch = random_batch(2, 12, 1.0, 4);
        let mut swapped = batch.clone();
        for (src, dst) in [(&batch.price, &mut swapped.price), (&batch.text, &mut swapped.text)] {
            let row = src.shape()[2];
            for s in 0..2 {
                for day in 0..5 {
                    let from = (s * 5 + day) * row;
                    let to = (s * 5 + 4 - day) * row;
                    dst.data_mut()[to..to + row].copy_from_slice(&src.data()[from..from + row]);
                }
            }
        }
        let a = model.predict_probs(&batch).unwrap().final_prob;
        let b = model.predict_probs(&swapped).unwrap().final_prob;
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn dropout_free_train_mode_matches_eval() {
        let model = StockModel::new(tiny(Arch::CrossAttention, true), 5).unwrap();
        let batch = random_batch(3, 12, 1.0, 6);
        let eval = model.predict_probs(&batch).unwrap().final_prob;
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape);
        let price = tape.constant(batch.price.clone());
        let text = tape.constant(batch.text.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model.forward(&mut tape, &p, price, text, &mut Mode::Train(&mut rng)).unwrap();
        for (a, b) in tape.data(out.final_prob).iter().zip(&eval) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn table_configurations_construct() {
        let ff128 = ModelConfig { arch: Arch::Feedforward, dim_ff: 128, ..ModelConfig::default() };
        let ff1024 = ModelConfig { dim_ff: 1024, ..ff128.clone() };
        for cfg in [ff128, ff1024] {
            let m = StockModel::new(cfg, 0).unwrap();
            let out = m.predict_probs(&random_batch(2, 768, 1.0, 1)).unwrap();
            assert_eq!(out.final_prob.len(), 2);
        }
        let fusion = ModelConfig::default();
        assert!(StockModel::new(fusion, 0).is_ok());
        let cross = ModelConfig { arch: Arch::CrossAttention, heads: 8, dim_key: 256, ..ModelConfig::default() };
        assert!(StockModel::new(cross, 0).is_ok());
    }

    fn linear(i: usize, o: usize) -> usize {
        i * o + o
    }

    fn encoder_layer(dk: usize, ff: usize) -> usize {
        // query, value, output with bias; key without
        let attention = 3 * linear(dk, dk) + dk * dk;
        attention + linear(dk, ff) + linear(ff, dk) + 4 * dk
    }

    #[test]
    fn parameter_counts() {
        let cfg = tiny(Arch::FusionTransformer, false);
        let expect = linear(18, 8) + encoder_layer(8, 16) + linear(8, 1);
        assert_eq!(StockModel::new(cfg.clone(), 0).unwrap().parameter_count(), expect);
        let wide = ModelConfig { dim_ff: 32, ..cfg };
        let expect_wide = expect + (8 * 16 + 16) + 16 * 8;
        assert_eq!(StockModel::new(wide, 0).unwrap().parameter_count(), expect_wide);

        let cross = tiny(Arch::CrossAttention, true);
        let attn = 3 * linear(8, 8) + 64;
        let expect = linear(6, 8) + linear(12, 8) + 4 * attn + linear(32, 8) + encoder_layer(8, 16) + linear(8, 1);
        assert_eq!(StockModel::new(cross, 0).unwrap().parameter_count(), expect);

        let ff = tiny(Arch::Feedforward, false);
        assert_eq!(StockModel::new(ff, 0).unwrap().parameter_count(), linear(90, 16) + linear(16, 1));
    }

    #[test]
    fn text_ablation_leaves_price_stream() {
        let model = StockModel::new(tiny(Arch::CrossAttention, false), 7).unwrap();
        let batch = random_batch(2, 12, 1.0, 8);
        let mut silent = batch.clone();
        silent.text.data_mut().fill(0.0);
        let a = model.cross_attention_streams(&batch).unwrap();
        let b = model.cross_attention_streams(&silent).unwrap();
        assert_eq!(a[0].shape(), &[2, 5, 8]);
        assert_eq!(a[0].data(), b[0].data());
        for k in 1..4 {
            assert!(a[k].data().iter().zip(b[k].data()).any(|(x, y)| (x - y).abs() > 1e-9));
        }
        let fusion = StockModel::new(tiny(Arch::FusionTransformer, false), 0).unwrap();
        assert!(fusion.cross_attention_streams(&batch).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = StockModel::new(tiny(Arch::CrossAttention, true), 11).unwrap();
        let bytes = model.to_bytes().unwrap();
        let back = StockModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let batch = random_batch(2, 12, 1.0, 3);
        assert_eq!(back.predict_probs(&batch).unwrap(), model.predict_probs(&batch).unwrap());
        assert!(StockModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn auxiliary_twin_predicts_identically() {
        let aux = StockModel::new(tiny(Arch::FusionTransformer, true), 12).unwrap();
        let mut plain = StockModel::new(tiny(Arch::FusionTransformer, false), 99).unwrap();
        for (name, t) in aux.params().iter() {
            plain.params_mut().by_name_mut(name).unwrap().data_mut().copy_from_slice(t.data());
        }
        let batch = random_batch(4, 12, 2.0, 13);
        let a = aux.predict_probs(&batch).unwrap().final_prob;
        let b = plain.predict_probs(&batch).unwrap().final_prob;
        assert_eq!(a, b);
    }

    #[test]
    fn full_model_gradients() {
        for (arch, aux) in [
            (Arch::Feedforward, false),
            (Arch::FusionTransformer, false),
            (Arch::FusionTransformer, true),
            (Arch::CrossAttention, false),
            (Arch::CrossAttention, true),
        ] {
            let mut cfg = tiny(arch, aux);
            cfg.embed_dim = 4;
            let model = StockModel::new(cfg, 21).unwrap();
            let batch = random_batch(2, 4, 1.0, 22);
            let mut inputs: Vec<Tensor> = model.params().tensors().to_vec();
            let n = inputs.len();
            inputs.push(batch.price.clone());
            inputs.push(batch.text.clone());
            let report = grad_check_many(
                |tape, vars| -> Result<Var> {
                    let p = Bound::from_vars(vars[..n].to_vec());
                    let out = model.forward(tape, &p, vars[n], vars[n + 1], &mut Mode::Eval)?;
                    let probs = out.aux_probs.unwrap_or(out.final_prob);
                    let logp = tape.ln(probs);
                    Ok(tape.mean(logp))
                },
                &inputs,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.pass, "{arch} aux={aux}: {}", report.max_rel_err);
        }
    }
}
