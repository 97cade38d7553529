//! Layers shared by every architecture: linear maps, attention, sinusoidal
//! position encodings, post-norm encoder layers and inverted dropout.
//!
//! Parameters live in a [`ParamSet`] owned by the model. Layers only hold
//! [`ParamId`]s; a forward pass binds the whole set onto a tape once and
//! looks variables up through the resulting [`Bound`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const MASK_FILL: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t.clone())).collect())
    }
}

/// Tape variables for a bound [`ParamSet`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Gradients after `backward`, zero-filled where nothing flowed.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.0
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
            })
            .collect()
    }
}

/// Forward-pass mode. Training carries the generator that draws dropout masks.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("nonzero layer dims")
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layer = Linear::without_bias(params, name, in_dim, out_dim, rng);
        layer.bias = Some(params.add(
            format!("{name}.bias"),
            Tensor::zeros(&[out_dim]).expect("nonzero layer dims"),
        ));
        layer
    }

    pub fn without_bias(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), xavier(rng, in_dim, out_dim));
        Linear {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    /// `x·W + b` over the trailing axis of `x`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let last = *shape.last().expect("tensor has at least one axis");
        if last != self.in_dim {
            return Err(Error::Tensor(crate::tensor::TensorError::Dimension {
                op: "linear",
                lhs: shape,
                rhs: vec![self.in_dim, self.out_dim],
            }));
        }
        let rows = shape.iter().product::<usize>() / last;
        let flat = if shape.len() == 2 {
            x
        } else {
            tape.reshape(x, &[rows, last])?
        };
        let mut y = tape.matmul(flat, p.var(self.weight))?;
        if let Some(b) = self.bias {
            y = tape.add_bias(y, p.var(b))?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        Ok(tape.reshape(y, &out_shape)?)
    }
}

/// Boolean attention mask over (target, source) positions; `true` blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    targets: usize,
    sources: usize,
    blocked: Vec<bool>,
}

impl Mask {
    pub fn new(targets: usize, sources: usize, blocked: Vec<bool>) -> Result<Self> {
        if blocked.len() != targets * sources {
            return Err(Error::config(
                "mask",
                format!("{} entries for a {targets}×{sources} mask", blocked.len()),
            ));
        }
        Ok(Mask {
            targets,
            sources,
            blocked,
        })
    }

    /// Blocks every source position after the target position.
    pub fn causal(len: usize) -> Self {
        let blocked = (0..len * len).map(|i| i % len > i / len).collect();
        Mask {
            targets: len,
            sources: len,
            blocked,
        }
    }

    pub fn is_blocked(&self, t: usize, s: usize) -> bool {
        self.blocked[t * self.sources + s]
    }
}

/// softmax(q·kᵀ/√d + mask)·v over `[g×T×d]` slices. Returns the output and
/// the attention weights `[g×T×S]`.
fn attention_kernel(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
) -> Result<(Var, Var)> {
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    let (groups, t, d) = (qs[0], qs[1], qs[2]);
    let s = ks[1];
    let scores = tape.bmm(q, k, true)?;
    let mut scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    if let Some(mask) = mask {
        if mask.targets != t || mask.sources != s {
            return Err(Error::config(
                "mask",
                format!(
                    "mask is {}×{} but attention is {t}×{s}",
                    mask.targets, mask.sources
                ),
            ));
        }
        let fill: Vec<f64> = (0..groups)
            .flat_map(|_| mask.blocked.iter().map(|&b| if b { MASK_FILL } else { 0.0 }))
            .collect();
        let fill = tape.constant(Tensor::new(vec![groups, t, s], fill)?);
        scores = tape.add(scores, fill)?;
    }
    let weights = tape.softmax(scores, 2)?;
    let out = tape.bmm(weights, v, false)?;
    Ok((out, weights))
}

/// Single-head attention for `q: [T×d]`, `k, v: [S×d]`.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
) -> Result<Var> {
    let lift = |tape: &mut Tape, x: Var| -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::config("attention", format!("expected a matrix, got {s:?}")));
        }
        Ok(tape.reshape(x, &[1, s[0], s[1]])?)
    };
    let (q3, k3, v3) = (lift(tape, q)?, lift(tape, k)?, lift(tape, v)?);
    let (out, _) = attention_kernel(tape, q3, k3, v3, mask)?;
    let s = tape.shape(out).to_vec();
    Ok(tape.reshape(out, &[s[1], s[2]])?)
}

/// Multi-head attention over `[B×T×dk]` inputs.
///
/// The key projection has no bias: adding the same vector to every key
/// shifts all scores of a query equally and cancels in the softmax.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub model_dim: usize,
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
}

impl MultiHeadAttention {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        model_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || model_dim == 0 || model_dim % heads != 0 {
            return Err(Error::config(
                "heads",
                format!("dim_key {model_dim} is not divisible by {heads} heads"),
            ));
        }
        Ok(MultiHeadAttention {
            heads,
            model_dim,
            query: Linear::new(params, &format!("{name}.query"), model_dim, model_dim, rng),
            key: Linear::without_bias(params, &format!("{name}.key"), model_dim, model_dim, rng),
            value: Linear::new(params, &format!("{name}.value"), model_dim, model_dim, rng),
            output: Linear::new(params, &format!("{name}.output"), model_dim, model_dim, rng),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        query: Var,
        context: Var,
        mask: Option<&Mask>,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(tape, p, query, context, mask)?.0)
    }

    /// Also returns the attention weights, shaped `[B×h×T×S]`.
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape,
        p: &Bound,
        query: Var,
        context: Var,
        mask: Option<&Mask>,
    ) -> Result<(Var, Var)> {
        let qs = tape.shape(query).to_vec();
        let cs = tape.shape(context).to_vec();
        if qs.len() != 3 || cs.len() != 3 || qs[0] != cs[0] || qs[2] != self.model_dim || cs[2] != self.model_dim {
            return Err(Error::Tensor(crate::tensor::TensorError::Dimension {
                op: "multi_head_attention",
                lhs: qs,
                rhs: cs,
            }));
        }
        let (b, t, s) = (qs[0], qs[1], cs[1]);
        let (h, dh) = (self.heads, self.model_dim / self.heads);

        let split = |tape: &mut Tape, x: Var, len: usize| -> Result<Var> {
            let x = tape.reshape(x, &[b, len, h, dh])?;
            let x = tape.swap_axes(x, 1, 2)?;
            Ok(tape.reshape(x, &[b * h, len, dh])?)
        };
        let q = self.query.forward(tape, p, query)?;
        let q = split(tape, q, t)?;
        let k = self.key.forward(tape, p, context)?;
        let k = split(tape, k, s)?;
        let v = self.value.forward(tape, p, context)?;
        let v = split(tape, v, s)?;

        let (heads_out, weights) = attention_kernel(tape, q, k, v, mask)?;
        let merged = tape.reshape(heads_out, &[b, h, t, dh])?;
        let merged = tape.swap_axes(merged, 1, 2)?;
        let merged = tape.reshape(merged, &[b, t, self.model_dim])?;
        let out = self.output.forward(tape, p, merged)?;
        let weights = tape.reshape(weights, &[b, h, t, s])?;
        Ok((out, weights))
    }
}

/// Sinusoidal table: `PE[pos, 2i] = sin(pos / 10000^(2i/d))`,
/// `PE[pos, 2i+1] = cos(pos / 10000^(2i/d))`.
pub fn positional_encoding(seq_len: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config(
            "dim_key",
            format!("positional encoding needs an even dimension, got {dim}"),
        ));
    }
    if seq_len == 0 {
        return Err(Error::config("seq_len", "must be positive"));
    }
    let mut data = Vec::with_capacity(seq_len * dim);
    for pos in 0..seq_len {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Ok(Tensor::new(vec![seq_len, dim], data)?)
}

/// Adds the positional table to every sequence of a `[B×T×d]` input.
pub fn add_positional_encoding(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let table = positional_encoding(s[1], s[2])?;
    let tiled: Vec<f64> = (0..s[0]).flat_map(|_| table.data().iter().copied()).collect();
    let pe = tape.constant(Tensor::new(s, tiled)?);
    Ok(tape.add(x, pe)?)
}

/// Inverted dropout: survivors are scaled by `1/(1−p)` during training and
/// evaluation is the identity.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, mode: &mut Mode<'_>) -> Result<Var> {
    check_dropout(p)?;
    let rng = match mode {
        Mode::Train(rng) if p > 0.0 => rng,
        _ => return Ok(x),
    };
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..tape.value(x).numel())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let mask = tape.constant(Tensor::new(tape.shape(x).to_vec(), mask)?);
    Ok(tape.mul(x, mask)?)
}

pub fn check_dropout(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::config("dropout", format!("rate {p} outside [0, 1)")))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: params.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0).unwrap()),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(&[dim]).unwrap()),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, p.var(self.gain), p.var(self.bias), LAYER_NORM_EPS)?)
    }
}

/// Post-norm transformer encoder layer with a ReLU feedforward sublayer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm_attention: LayerNorm,
    pub norm_feedforward: LayerNorm,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        model_dim: usize,
        heads: usize,
        dim_ff: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_dropout(dropout)?;
        if dim_ff == 0 {
            return Err(Error::config("dim_ff", "must be positive"));
        }
        Ok(EncoderLayer {
            attention: MultiHeadAttention::new(params, &format!("{name}.attn"), model_dim, heads, rng)?,
            ff_in: Linear::new(params, &format!("{name}.ff_in"), model_dim, dim_ff, rng),
            ff_out: Linear::new(params, &format!("{name}.ff_out"), dim_ff, model_dim, rng),
            norm_attention: LayerNorm::new(params, &format!("{name}.norm_attn"), model_dim),
            norm_feedforward: LayerNorm::new(params, &format!("{name}.norm_ff"), model_dim),
            dropout,
        })
    }

    /// `y = LN(x + Dropout(MHA(x)))`, `out = LN(y + Dropout(FFN(y)))`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        mask: Option<&Mask>,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let attended = self.attention.forward(tape, p, x, x, mask)?;
        let attended = dropout(tape, attended, self.dropout, mode)?;
        let y = tape.add(x, attended)?;
        let y = self.norm_attention.forward(tape, p, y)?;

        let hidden = self.ff_in.forward(tape, p, y)?;
        let hidden = tape.relu(hidden);
        let ff = self.ff_out.forward(tape, p, hidden)?;
        let ff = dropout(tape, ff, self.dropout, mode)?;
        let z = tape.add(y, ff)?;
        self.norm_feedforward.forward(tape, p, z)
    }
}
