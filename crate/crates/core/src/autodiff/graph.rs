use std::collections::HashMap;

use super::params::{GradMap, ParamId, ParamStore};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    AddConst(Var),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Sqrt(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Pick { x: Var, index: usize },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize, mask: Option<Vec<bool>> },
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    DepthwiseConv { x: Var, kernel: Var },
    Im2Col { x: Var, width: usize },
    Col2Im { x: Var, width: usize },
    GatherRows { table: Var, index: Vec<Option<usize>> },
    SegmentMax { x: Var, argmax: Vec<Option<usize>> },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Variance floor used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// A reverse-mode computation graph.
///
/// Nodes are appended in evaluation order, so node ids are already a
/// topological order and `backward` walks them in reverse. Parameter nodes
/// read their values straight from the borrowed [`ParamStore`]; gradients
/// for them land in [`Graph::param_grads`].
pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    leaf_grads: HashMap<usize, Tensor>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

struct Lanes {
    count: usize,
    len: usize,
    stride: usize,
    outer_stride: usize,
}

impl Lanes {
    fn of(shape: &[usize], axis: usize) -> Result<Lanes> {
        match (shape, axis) {
            ([n], 0) => Ok(Lanes { count: 1, len: *n, stride: 1, outer_stride: 0 }),
            ([r, c], 1) => Ok(Lanes { count: *r, len: *c, stride: 1, outer_stride: *c }),
            ([r, c], 0) => Ok(Lanes { count: *c, len: *r, stride: *c, outer_stride: 1 }),
            _ => Err(Error::Rank(format!("axis {axis} invalid for shape {shape:?}"))),
        }
    }

    fn index(&self, lane: usize, k: usize) -> usize {
        lane * self.outer_stride + k * self.stride
    }
}

impl<'s> Graph<'s> {
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            params: HashMap::new(),
            leaf_grads: HashMap::new(),
        }
    }

    /// A graph whose parameter nodes read from `store`.
    pub fn with_store(store: &'s ParamStore) -> Self {
        Graph {
            store: Some(store),
            ..Graph::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .store
                .expect("parameter node without store")
                .value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── leaves ──────────────────────────────────────────────────────

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is collected by `backward`.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        assert!(self.store.is_some(), "Graph::param needs a graph built with_store");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::Rank(format!("transpose needs a matrix, got {:?}", t.shape())));
        }
        let out = t.transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn row_broadcast(&self, op: &'static str, x: Var, v: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (tx, tv) = (self.value(x), self.value(v));
        let (_, c) = tx.dims2()?;
        if tv.shape() != [c] {
            return Err(Error::shape(op, tx.shape(), tv.shape()));
        }
        let row = tv.data();
        let data = tx
            .data()
            .chunks(c.max(1))
            .flat_map(|r| r.iter().zip(row).map(|(&a, &b)| f(a, b)))
            .collect();
        Ok(Tensor::from_parts(tx.shape().to_vec(), data))
    }

    /// `x[r×c] + v[c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", x, v, |a, b| a + b)?;
        let rg = self.rg(&[x, v]);
        Ok(self.push(out, Op::AddRow(x, v), rg))
    }

    /// `x[r×c] ⊙ v[c]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", x, v, |a, b| a * b)?;
        let rg = self.rg(&[x, v]);
        Ok(self.push(out, Op::MulRow(x, v), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// `a·x + b` with scalar constants.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let out = self.value(x).map(|v| a * v + b);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, a), rg)
    }

    /// Elementwise product with a constant tensor (masks, dropout).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != c.shape() {
            return Err(Error::shape("mul_const", tx.shape(), c.shape()));
        }
        let data = tx.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MulConst(x, c), rg))
    }

    /// Adds a constant tensor (position encodings).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != c.shape() {
            return Err(Error::shape("add_const", tx.shape(), c.shape()));
        }
        let data = tx.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::AddConst(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// `log σ(x)`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(log_sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::LogSigmoid(x), rg)
    }

    /// Elementwise square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Data("sqrt of a negative value".into()));
        }
        let out = tx.map(f64::sqrt);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Sqrt(x), rg))
    }

    // ── structure ───────────────────────────────────────────────────

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("concat_cols with no inputs".into()))?;
        let rows = self.value(*first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.shape()[0] != rows {
                return Err(Error::shape("concat_cols", self.value(*first).shape(), t.shape()));
            }
            widths.push(t.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(vec![rows, total], out), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || start + width > t.shape()[1] {
            return Err(Error::shape("slice_cols", t.shape(), &[start, width]));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&t.data()[r * cols + start..r * cols + start + width]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![rows, width], out), Op::SliceCols { x, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::Empty("mean of an empty tensor".into()));
        }
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Mean(x), rg))
    }

    /// The element at flat `index`, as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        let v = *t.data().get(index).ok_or(Error::Index {
            what: "pick",
            index,
            len: t.numel(),
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }, rg))
    }

    // ── normalisation ───────────────────────────────────────────────

    fn check_mask(&self, op: &'static str, x: Var, mask: Option<&[bool]>) -> Result<()> {
        if let Some(m) = mask {
            if m.len() != self.value(x).numel() {
                return Err(Error::shape(op, self.value(x).shape(), &[m.len()]));
            }
        }
        Ok(())
    }

    /// Softmax along `axis` (0 or 1 for matrices, 0 for vectors).
    ///
    /// `mask`, when given, has one flag per element; masked entries get
    /// probability exactly 0. A lane with every entry masked is an error.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        self.check_mask("softmax", x, mask)?;
        let t = self.value(x);
        let lanes = Lanes::of(t.shape(), axis)?;
        let mut out = vec![0.0; t.numel()];
        for lane in 0..lanes.count {
            let valid = |k: usize| mask.is_none_or(|m| m[lanes.index(lane, k)]);
            let mut max = f64::NEG_INFINITY;
            for k in (0..lanes.len).filter(|&k| valid(k)) {
                let v = t.data()[lanes.index(lane, k)];
                if v.is_nan() {
                    return Err(Error::NonFinite(format!("softmax lane {lane}")));
                }
                max = max.max(v);
            }
            if max == f64::INFINITY {
                return Err(Error::NonFinite(format!("softmax lane {lane}")));
            }
            if max == f64::NEG_INFINITY && lanes.len > 0 {
                return Err(Error::Degenerate(format!("softmax lane {lane} is fully masked")));
            }
            let mut z = 0.0;
            for k in (0..lanes.len).filter(|&k| valid(k)) {
                let i = lanes.index(lane, k);
                out[i] = (t.data()[i] - max).exp();
                z += out[i];
            }
            for k in (0..lanes.len).filter(|&k| valid(k)) {
                out[lanes.index(lane, k)] /= z;
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Log-softmax along `axis`; masked entries are reported as 0 and
    /// receive no gradient.
    pub fn log_softmax(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        self.check_mask("log_softmax", x, mask)?;
        let t = self.value(x);
        let lanes = Lanes::of(t.shape(), axis)?;
        let mut out = vec![0.0; t.numel()];
        for lane in 0..lanes.count {
            let valid = |k: usize| mask.is_none_or(|m| m[lanes.index(lane, k)]);
            let idx: Vec<usize> = (0..lanes.len).filter(|&k| valid(k)).map(|k| lanes.index(lane, k)).collect();
            if idx.is_empty() && lanes.len > 0 {
                return Err(Error::Degenerate(format!("log_softmax lane {lane} is fully masked")));
            }
            let lse = log_sum_exp(idx.iter().map(|&i| t.data()[i]));
            for i in idx {
                out[i] = t.data()[i] - lse;
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        let mask = mask.map(|m| m.to_vec());
        Ok(self.push(out, Op::LogSoftmax { x, axis, mask }, rg))
    }

    /// `−log softmax(logits)[target]` for a logit vector, computed in log
    /// space. Masked positions are excluded from the normaliser.
    pub fn cross_entropy(&mut self, logits: Var, target: usize, mask: Option<&[bool]>) -> Result<Var> {
        self.check_mask("cross_entropy", logits, mask)?;
        let t = self.value(logits);
        if t.rank() != 1 {
            return Err(Error::Rank(format!("cross_entropy expects a vector, got {:?}", t.shape())));
        }
        let n = t.numel();
        if target >= n {
            return Err(Error::Index { what: "cross_entropy target", index: target, len: n });
        }
        let valid = |k: usize| mask.is_none_or(|m| m[k]);
        if !valid(target) {
            return Err(Error::Data(format!("cross_entropy target {target} is masked")));
        }
        // (max − x_t) + ln(1 + Σ_{k≠argmax} e^{x_k − max}) keeps tiny losses exact
        let x = t.data();
        let imax = (0..n).filter(|&k| valid(k)).fold(target, |b, k| if x[k] > x[b] { k } else { b });
        let rest: f64 = (0..n).filter(|&k| valid(k) && k != imax).map(|k| (x[k] - x[imax]).exp()).sum();
        let lse = x[imax] + rest.ln_1p();
        let probs = (0..n)
            .map(|k| if valid(k) { (x[k] - lse).exp() } else { 0.0 })
            .collect();
        let loss = (x[imax] - x[target]) + rest.ln_1p();
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target, probs }, rg))
    }

    /// Normalises each row of `x[r×d]` to zero mean and unit variance, then
    /// applies `gain[d]` and `bias[d]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, d) = t.dims2()?;
        if d == 0 {
            return Err(Error::Empty("layer_norm over zero features".into()));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::shape("layer_norm", t.shape(), tg.shape()));
        }
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = tg.data()[c] * h + tb.data()[c];
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    // ── convolution ─────────────────────────────────────────────────

    /// Per-channel 1-D convolution of `x[len×ch]` with `kernel[k×ch]`,
    /// zero-padded to keep the length. `k` must be odd.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let (len, ch) = (tx.shape()[0], *tx.shape().get(1).unwrap_or(&0));
        if tx.rank() != 2 || tk.rank() != 2 || tk.shape()[1] != ch {
            return Err(Error::shape("depthwise_conv1d", tx.shape(), tk.shape()));
        }
        let k = tk.shape()[0];
        if k % 2 == 0 {
            return Err(Error::Config(format!("convolution width must be odd, got {k}")));
        }
        let pad = k / 2;
        let mut out = vec![0.0; len * ch];
        for t in 0..len {
            for j in 0..k {
                let src = t + j;
                if src < pad || src - pad >= len {
                    continue;
                }
                let xr = &tx.data()[(src - pad) * ch..(src - pad + 1) * ch];
                let kr = &tk.data()[j * ch..(j + 1) * ch];
                let orow = &mut out[t * ch..(t + 1) * ch];
                for c in 0..ch {
                    orow[c] += xr[c] * kr[c];
                }
            }
        }
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(Tensor::from_parts(vec![len, ch], out), Op::DepthwiseConv { x, kernel }, rg))
    }

    /// Unfolds `x[len×ch]` into `[len × width·ch]` windows with zero padding,
    /// so a dense convolution becomes one matmul.
    pub fn im2col(&mut self, x: Var, width: usize) -> Result<Var> {
        let tx = self.value(x);
        if width.is_multiple_of(2) {
            return Err(Error::Config(format!("convolution width must be odd, got {width}")));
        }
        let (len, ch) = tx.dims2()?;
        let pad = width / 2;
        let mut out = vec![0.0; len * width * ch];
        for t in 0..len {
            for j in 0..width {
                let src = t + j;
                if src < pad || src - pad >= len {
                    continue;
                }
                let o = t * width * ch + j * ch;
                out[o..o + ch].copy_from_slice(&tx.data()[(src - pad) * ch..(src - pad + 1) * ch]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![len, width * ch], out), Op::Im2Col { x, width }, rg))
    }

    /// Adjoint of [`Graph::im2col`]: folds `[len × width·ch]` back to
    /// `[len×ch]`, summing overlapping contributions.
    pub fn col2im(&mut self, x: Var, width: usize) -> Result<Var> {
        let tx = self.value(x);
        let (len, wc) = tx.dims2()?;
        if width.is_multiple_of(2) || wc % width != 0 {
            return Err(Error::Config(format!("col2im width {width} incompatible with {wc} columns")));
        }
        let ch = wc / width;
        let out = fold_windows(tx.data(), len, width, ch);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![len, ch], out), Op::Col2Im { x, width }, rg))
    }

    // ── lookup / pooling ────────────────────────────────────────────

    /// Rows of `table` selected by `index`; `None` yields a zero row.
    pub fn gather_rows(&mut self, table: Var, index: &[Option<usize>]) -> Result<Var> {
        let t = self.value(table);
        let (n, d) = match t.shape() {
            [n, d] => (*n, *d),
            s => return Err(Error::Rank(format!("gather_rows needs a matrix table, got {s:?}"))),
        };
        let mut out = vec![0.0; index.len() * d];
        for (r, ix) in index.iter().enumerate() {
            if let Some(i) = *ix {
                if i >= n {
                    return Err(Error::Index { what: "embedding row", index: i, len: n });
                }
                out[r * d..(r + 1) * d].copy_from_slice(&t.data()[i * d..(i + 1) * d]);
            }
        }
        let rg = self.rg(&[table]);
        let op = Op::GatherRows { table, index: index.to_vec() };
        Ok(self.push(Tensor::from_parts(vec![index.len(), d], out), op, rg))
    }

    /// Column-wise max over consecutive row segments of `x[n×d]`; `lens`
    /// gives each segment's row count. Empty segments produce zeros.
    pub fn segment_max(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = t.dims2()?;
        if lens.iter().sum::<usize>() != n {
            return Err(Error::shape("segment_max", t.shape(), &[lens.iter().sum()]));
        }
        let mut out = vec![0.0; lens.len() * d];
        let mut argmax = vec![None; lens.len() * d];
        let mut start = 0;
        for (s, &l) in lens.iter().enumerate() {
            for c in 0..d {
                let mut best: Option<usize> = None;
                for r in start..start + l {
                    if best.is_none_or(|b| t.data()[r * d + c] > t.data()[b * d + c]) {
                        best = Some(r);
                    }
                }
                if let Some(b) = best {
                    out[s * d + c] = t.data()[b * d + c];
                    argmax[s * d + c] = Some(b);
                }
            }
            start += l;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![lens.len(), d], out), Op::SegmentMax { x, argmax }, rg))
    }

    // ── reverse pass ────────────────────────────────────────────────

    /// Back-propagates from a scalar `loss`, adding into the gradients of
    /// every reachable input and parameter. Calling it again without
    /// [`Graph::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Rank(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_with(loss, Tensor::full(self.shape(loss), 1.0))
    }

    /// Back-propagates an explicit upstream gradient for `out`.
    pub fn backward_with(&mut self, out: Var, seed: Tensor) -> Result<()> {
        if seed.shape() != self.shape(out) {
            return Err(Error::shape("backward seed", seed.shape(), self.shape(out)));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(out.0 + 1, || None);
        grads[out.0] = Some(seed);
        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf | Op::Param => {
                    match self.leaf_grads.get_mut(&id) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            self.leaf_grads.insert(id, g);
                        }
                    }
                    continue;
                }
                _ => {}
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.value(Var(id));
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let gd = g.data();
        match &self.nodes[id].op {
            Op::Leaf | Op::Param => unreachable!(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(gd, tb.data(), &mut da, m, k, n);
                    acc(*a, Tensor::from_parts(vec![m, k], da));
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(ta.data(), gd, &mut db, m, k, n);
                    acc(*b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                if wants(*b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    acc(*a, hadamard(g, tb));
                }
                if wants(*b) {
                    acc(*b, hadamard(g, ta));
                }
            }
            Op::AddRow(x, v) => {
                acc(*x, g.clone());
                if wants(*v) {
                    let c = self.value(*v).numel();
                    acc(*v, Tensor::from_parts(vec![c], column_sums(gd, c)));
                }
            }
            Op::MulRow(x, v) => {
                let (tx, tv) = (self.value(*x), self.value(*v));
                let c = tv.numel();
                if wants(*x) {
                    let data = gd
                        .chunks(c.max(1))
                        .flat_map(|r| r.iter().zip(tv.data()).map(|(a, b)| a * b))
                        .collect();
                    acc(*x, Tensor::from_parts(tx.shape().to_vec(), data));
                }
                if wants(*v) {
                    let mut dv = vec![0.0; c];
                    for (gr, xr) in gd.chunks(c.max(1)).zip(tx.data().chunks(c.max(1))) {
                        for j in 0..c {
                            dv[j] += gr[j] * xr[j];
                        }
                    }
                    acc(*v, Tensor::from_parts(vec![c], dv));
                }
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * s)),
            Op::MulConst(x, c) => acc(*x, hadamard(g, c)),
            Op::AddConst(x) => acc(*x, g.clone()),
            Op::Relu(x) => {
                let tx = self.value(*x);
                let data = gd.iter().zip(tx.data()).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect();
                acc(*x, Tensor::from_parts(tx.shape().to_vec(), data));
            }
            Op::Sigmoid(x) => {
                let data = gd.iter().zip(out.data()).map(|(&gv, &y)| gv * y * (1.0 - y)).collect();
                acc(*x, Tensor::from_parts(out.shape().to_vec(), data));
            }
            Op::LogSigmoid(x) => {
                let tx = self.value(*x);
                let data = gd.iter().zip(tx.data()).map(|(&gv, &xv)| gv * sigmoid(-xv)).collect();
                acc(*x, Tensor::from_parts(tx.shape().to_vec(), data));
            }
            Op::Sqrt(x) => {
                let data = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| if y > 0.0 { gv / (2.0 * y) } else { 0.0 })
                    .collect();
                acc(*x, Tensor::from_parts(out.shape().to_vec(), data));
            }
            Op::Transpose(x) => acc(*x, g.transpose().expect("matrix gradient")),
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, Tensor::from_parts(shape, gd.to_vec()));
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let rows = out.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if wants(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        acc(p, Tensor::from_parts(vec![rows, w], d));
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
                let w = out.shape()[1];
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                acc(*x, Tensor::from_parts(vec![rows, cols], d));
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), gd[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                acc(*x, Tensor::full(self.shape(*x), gd[0] / n));
            }
            Op::Pick { x, index } => {
                let mut d = Tensor::zeros(self.shape(*x));
                d.data_mut()[*index] = gd[0];
                acc(*x, d);
            }
            Op::Softmax { x, axis } => {
                let lanes = Lanes::of(out.shape(), *axis).expect("validated in forward");
                let mut d = vec![0.0; out.numel()];
                for lane in 0..lanes.count {
                    let dot: f64 = (0..lanes.len)
                        .map(|k| lanes.index(lane, k))
                        .map(|i| gd[i] * out.data()[i])
                        .sum();
                    for k in 0..lanes.len {
                        let i = lanes.index(lane, k);
                        d[i] = out.data()[i] * (gd[i] - dot);
                    }
                }
                acc(*x, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::LogSoftmax { x, axis, mask } => {
                let lanes = Lanes::of(out.shape(), *axis).expect("validated in forward");
                let valid = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
                let mut d = vec![0.0; out.numel()];
                for lane in 0..lanes.count {
                    let idx: Vec<usize> = (0..lanes.len).map(|k| lanes.index(lane, k)).filter(|&i| valid(i)).collect();
                    let gsum: f64 = idx.iter().map(|&i| gd[i]).sum();
                    for &i in &idx {
                        d[i] = gd[i] - out.data()[i].exp() * gsum;
                    }
                }
                acc(*x, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::CrossEntropy { logits, target, probs } => {
                let mut d: Vec<f64> = probs.iter().map(|p| p * gd[0]).collect();
                d[*target] -= gd[0];
                acc(*logits, Tensor::from_parts(vec![d.len()], d));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let tg = self.value(*gain);
                let (rows, d) = (inv_std.len(), tg.numel());
                if wants(*gain) {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += gd[r * d + c] * xhat[r * d + c];
                        }
                    }
                    acc(*gain, Tensor::from_parts(vec![d], dg));
                }
                if wants(*bias) {
                    acc(*bias, Tensor::from_parts(vec![d], column_sums(gd, d)));
                }
                if wants(*x) {
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..d {
                            let dh = gd[r * d + c] * tg.data()[c];
                            s1 += dh;
                            s2 += dh * xhat[r * d + c];
                        }
                        for c in 0..d {
                            let dh = gd[r * d + c] * tg.data()[c];
                            dx[r * d + c] = inv_std[r] / d as f64 * (d as f64 * dh - s1 - xhat[r * d + c] * s2);
                        }
                    }
                    acc(*x, Tensor::from_parts(self.shape(*x).to_vec(), dx));
                }
            }
            Op::DepthwiseConv { x, kernel } => {
                let (tx, tk) = (self.value(*x), self.value(*kernel));
                let (len, ch, k) = (tx.shape()[0], tx.shape()[1], tk.shape()[0]);
                let pad = k / 2;
                let mut dx = vec![0.0; len * ch];
                let mut dk = vec![0.0; k * ch];
                for t in 0..len {
                    for j in 0..k {
                        let src = t + j;
                        if src < pad || src - pad >= len {
                            continue;
                        }
                        let s = src - pad;
                        for c in 0..ch {
                            let gv = gd[t * ch + c];
                            dx[s * ch + c] += gv * tk.data()[j * ch + c];
                            dk[j * ch + c] += gv * tx.data()[s * ch + c];
                        }
                    }
                }
                acc(*x, Tensor::from_parts(vec![len, ch], dx));
                acc(*kernel, Tensor::from_parts(vec![k, ch], dk));
            }
            Op::Im2Col { x, width } => {
                let (len, ch) = (self.shape(*x)[0], self.shape(*x)[1]);
                acc(*x, Tensor::from_parts(vec![len, ch], fold_windows(gd, len, *width, ch)));
            }
            Op::Col2Im { x, width } => {
                let (len, ch) = (out.shape()[0], out.shape()[1]);
                acc(*x, Tensor::from_parts(vec![len, width * ch], unfold_windows(gd, len, *width, ch)));
            }
            Op::GatherRows { table, index } => {
                let tt = self.value(*table);
                let d = tt.shape()[1];
                let mut dt = vec![0.0; tt.numel()];
                for (r, ix) in index.iter().enumerate() {
                    if let Some(i) = *ix {
                        for c in 0..d {
                            dt[i * d + c] += gd[r * d + c];
                        }
                    }
                }
                acc(*table, Tensor::from_parts(tt.shape().to_vec(), dt));
            }
            Op::SegmentMax { x, argmax } => {
                let tx = self.value(*x);
                let d = tx.shape()[1];
                let mut dx = vec![0.0; tx.numel()];
                for (o, am) in argmax.iter().enumerate() {
                    if let Some(r) = *am {
                        dx[r * d + o % d] += gd[o];
                    }
                }
                acc(*x, Tensor::from_parts(tx.shape().to_vec(), dx));
            }
        }
    }

    /// Accumulated gradient of an input leaf or parameter node.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(&v.0)
    }

    /// Gradients of every parameter touched by `backward`.
    pub fn param_grads(&self) -> GradMap {
        self.params
            .iter()
            .filter_map(|(&id, v)| self.leaf_grads.get(&v.0).map(|g| (id, g.clone())))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Errors if any value held by `v` is NaN or infinite.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn column_sums(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in data.chunks(cols.max(1)) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn fold_windows(cols: &[f64], len: usize, width: usize, ch: usize) -> Vec<f64> {
    let pad = width / 2;
    let mut out = vec![0.0; len * ch];
    for t in 0..len {
        for j in 0..width {
            let src = t + j;
            if src < pad || src - pad >= len {
                continue;
            }
            let s = src - pad;
            let o = t * width * ch + j * ch;
            for c in 0..ch {
                out[s * ch + c] += cols[o + c];
            }
        }
    }
    out
}

fn unfold_windows(x: &[f64], len: usize, width: usize, ch: usize) -> Vec<f64> {
    let pad = width / 2;
    let mut out = vec![0.0; len * width * ch];
    for t in 0..len {
        for j in 0..width {
            let src = t + j;
            if src < pad || src - pad >= len {
                continue;
            }
            let o = t * width * ch + j * ch;
            out[o..o + ch].copy_from_slice(&x[(src - pad) * ch..(src - pad + 1) * ch]);
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}
