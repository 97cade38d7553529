//! Dense `f64` tensors and a reverse-mode tape.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! append nodes in execution order, so the node list is already topologically
//! sorted and [`Tape::backward`] is a single reverse sweep.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not match {len} data elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array with an optional gradient buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Tensor::new(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a 2-D tensor from rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![rows.len(), cols], data).expect("rows must be nonempty")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.data.len());
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    AddScalarOperand(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalarOperand(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    AddBias(Var, Var),
    Reshape(Var),
    SwapAxes { x: Var, a: usize, b: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone)]
struct Node {
    tensor: Tensor,
    op: Op,
}

/// Records operations for one forward pass and replays them in reverse.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input. Its `requires_grad` flag is kept; any existing
    /// gradient buffer is dropped.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].tensor.data
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    fn emit(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.rg(v));
        let tensor = Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        };
        self.push(tensor, op)
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(self.data(a), self.data(b), &mut out, m, k, n, false, false);
        Ok(self.emit(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product over the leading axis: `[g×m×k]·[g×k×n]`, or with
    /// `transpose_b`, `[g×m×k]·[g×n×k]ᵀ`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(dim_err("bmm", sa, sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; g * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..g {
            gemm(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
                false,
                transpose_b,
            );
        }
        Ok(self.emit(
            vec![g, m, n],
            out,
            Op::BatchMatMul { a, b, transpose_b },
            &[a, b],
        ))
    }

    /// Elementwise sum. `b` may also be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) == self.shape(b) {
            let out = zip_map(self.data(a), self.data(b), |x, y| x + y);
            Ok(self.emit(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
        } else if self.value(b).numel() == 1 {
            let s = self.data(b)[0];
            let out = self.data(a).iter().map(|x| x + s).collect();
            Ok(self.emit(
                self.shape(a).to_vec(),
                out,
                Op::AddScalarOperand(a, b),
                &[a, b],
            ))
        } else {
            Err(dim_err("add", self.shape(a), self.shape(b)))
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("sub", self.shape(a), self.shape(b)));
        }
        let out = zip_map(self.data(a), self.data(b), |x, y| x - y);
        Ok(self.emit(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product. `b` may also be a single-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) == self.shape(b) {
            let out = zip_map(self.data(a), self.data(b), |x, y| x * y);
            Ok(self.emit(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
        } else if self.value(b).numel() == 1 {
            let s = self.data(b)[0];
            let out = self.data(a).iter().map(|x| x * s).collect();
            Ok(self.emit(
                self.shape(a).to_vec(),
                out,
                Op::MulScalarOperand(a, b),
                &[a, b],
            ))
        } else {
            Err(dim_err("mul", self.shape(a), self.shape(b)))
        }
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * factor).collect();
        self.emit(self.shape(a).to_vec(), out, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let out = self.data(a).iter().map(|x| x + offset).collect();
        self.emit(self.shape(a).to_vec(), out, Op::Offset(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        self.emit(self.shape(a).to_vec(), out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        self.emit(self.shape(a).to_vec(), out, Op::Sigmoid(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|x| x.ln()).collect();
        self.emit(self.shape(a).to_vec(), out, Op::Ln(a), &[a])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping applied.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.data(a).iter().map(|x| x.clamp(lo, hi)).collect();
        self.emit(self.shape(a).to_vec(), out, Op::Clamp { x: a, lo, hi }, &[a])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let x = self.data(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        Ok(self.emit(shape, out, Op::Softmax { x: a, axis }, &[a]))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("tensor has at least one axis");
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(dim_err("layer_norm", &shape, self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid(format!("layer_norm eps {eps} must be positive")));
        }
        let rows = shape_rows(&shape, d);
        let (xd, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        Ok(self.emit(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Adds a `[n]` vector to every row of a `[..×n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("tensor has at least one axis");
        if self.shape(bias) != [n] {
            return Err(dim_err("add_bias", &shape, self.shape(bias)));
        }
        let b = self.data(bias);
        let out = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, b)| v + b))
            .collect();
        Ok(self.emit(shape, out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() || shape.contains(&0) {
            return Err(dim_err("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        Ok(self.emit(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    /// Exchanges two axes, materializing the permuted layout.
    pub fn swap_axes(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if a >= shape.len() || b >= shape.len() {
            return Err(TensorError::Axis {
                op: "swap_axes",
                axis: a.max(b),
                shape,
            });
        }
        let (out_shape, out) = permute_swap(&shape, self.data(x), a, b);
        Ok(self.emit(out_shape, out, Op::SwapAxes { x, a, b }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                shape: first,
            });
        }
        for &p in &parts[1..] {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(dim_err("concat", &first, s));
            }
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let total: usize = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.emit(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::Axis {
                op: "narrow",
                axis,
                shape,
            });
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.emit(out_shape, out, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.emit(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.emit(vec![1], vec![m], Op::Mean(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added onto any
    /// buffer already present on a node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            self.nodes[i].tensor.accumulate_grad(&g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.tensor.data;
        let mut send = |v: Var, delta: Vec<f64>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(g, self.data(*b), &mut da, m, n, k, false, true);
                    send(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(self.data(*a), g, &mut db, k, m, n, true, false);
                    send(*b, db);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let sa = self.shape(*a);
                let (batches, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.tensor.shape[2];
                let (xa, xb) = (self.data(*a), self.data(*b));
                if self.rg(*a) {
                    let mut da = vec![0.0; batches * m * k];
                    for t in 0..batches {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let bt = &xb[t * k * n..(t + 1) * k * n];
                        // dA = dC · Bᵀ  (or dC · B when B was transposed)
                        gemm(gt, bt, &mut da[t * m * k..(t + 1) * m * k], m, n, k, false, !transpose_b);
                    }
                    send(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; batches * k * n];
                    for t in 0..batches {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &xa[t * m * k..(t + 1) * m * k];
                        let dbt = &mut db[t * k * n..(t + 1) * k * n];
                        if *transpose_b {
                            // B is [n×k]: dB = dCᵀ · A
                            gemm(gt, at, dbt, n, m, k, true, false);
                        } else {
                            gemm(at, gt, dbt, k, m, n, true, false);
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::AddScalarOperand(a, b) => {
                send(*a, g.to_vec());
                send(*b, vec![g.iter().sum()]);
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                send(*a, zip_map(g, self.data(*b), |g, y| g * y));
                send(*b, zip_map(g, self.data(*a), |g, x| g * x));
            }
            Op::MulScalarOperand(a, b) => {
                let s = self.data(*b)[0];
                send(*a, g.iter().map(|v| v * s).collect());
                let ds = g.iter().zip(self.data(*a)).map(|(g, x)| g * x).sum();
                send(*b, vec![ds]);
            }
            Op::Scale(a, f) => send(*a, g.iter().map(|v| v * f).collect()),
            Op::Offset(a) => send(*a, g.to_vec()),
            Op::Relu(a) => send(
                *a,
                zip_map(g, self.data(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
            ),
            Op::Sigmoid(a) => send(*a, zip_map(g, out, |g, s| g * s * (1.0 - s))),
            Op::Ln(a) => send(*a, zip_map(g, self.data(*a), |g, x| g / x)),
            Op::Clamp { x, lo, hi } => send(
                *x,
                zip_map(g, self.data(*x), |g, v| if v < *lo || v > *hi { 0.0 } else { g }),
            ),
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_at_axis(&node.tensor.shape, *axis);
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * out[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *node.tensor.shape.last().unwrap();
                let rows = rstd.len();
                let gv = self.data(*gain);
                let mut dx = vec![0.0; g.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx[r * d + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                send(*x, dx);
                send(*gain, dgain);
                send(*bias, dbias);
            }
            Op::AddBias(x, b) => {
                let n = self.shape(*b)[0];
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                send(*x, g.to_vec());
                send(*b, db);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::SwapAxes { x, a, b } => {
                let (_, dx) = permute_swap(&node.tensor.shape, g, *a, *b);
                send(*x, dx);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_at_axis(&node.tensor.shape, *axis);
                let total = node.tensor.shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    let mut dp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        dp.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    send(p, dp);
                }
            }
            Op::Narrow { x, axis, start } => {
                let src_shape = self.shape(*x);
                let (outer, n, inner) = split_at_axis(src_shape, *axis);
                let len = node.tensor.shape[*axis];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(*x, dx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![g[0] / n as f64; n]);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn shape_rows(shape: &[usize], d: usize) -> usize {
    numel(shape) / d
}

fn permute_swap(shape: &[usize], data: &[f64], a: usize, b: usize) -> (Vec<usize>, Vec<f64>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut strides = in_strides.clone();
    strides.swap(a, b);
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

/// `c += op(a) · op(b)` for row-major `op(a): [m×k]`, `op(b): [k×n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if ta { a[p * m + i] } else { a[i * k + p] };
            if tb {
                for (j, cv) in crow.iter_mut().enumerate() {
                    *cv += av * b[j * k + p];
                }
            } else {
                let brow = &b[p * n..(p + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub coordinates: usize,
}

/// Checks `f` at `x` with central differences of step `h`.
/// Relative error per coordinate is `|a−n| / max(1e-8, |a|+|n|)`.
pub fn grad_check<F, E>(f: F, x: &Tensor, h: f64, tol: f64) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, Var) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h, tol)
}

/// [`grad_check`] over several inputs at once; every coordinate of every
/// input is perturbed.
pub fn grad_check_many<F, E>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(TensorError::Invalid(format!("step {h} outside (0, 1e-2]")).into());
    }
    let scalar = |tape: &Tape, out: Var| -> Result<f64> {
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite(format!("f(x) = {v}")));
        }
        Ok(v)
    };
    let eval = |values: &[Tensor]| -> std::result::Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(scalar(&tape, out)?)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &vars)?;
    scalar(&tape, out)?;
    tape.backward(out)?;

    let mut perturbed = inputs.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut coordinates = 0;
    for (which, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[which].numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = inputs[which].data[j];
            perturbed[which].data[j] = orig + h;
            let plus = eval(&perturbed)?;
            perturbed[which].data[j] = orig - h;
            let minus = eval(&perturbed)?;
            perturbed[which].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            max_rel_err = max_rel_err.max(rel);
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        pass: max_rel_err < tol,
        coordinates,
    })
}
