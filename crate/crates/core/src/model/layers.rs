//! Building blocks shared by the encoder stacks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Anything that owns parameters.
pub trait Module: Sized {
    fn visit(&self, f: &mut dyn FnMut(ParamId));

    /// A structurally identical module whose parameter ids are mapped by `f`.
    fn remap(&self, f: &mut dyn FnMut(ParamId) -> ParamId) -> Self;

    fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        self.visit(&mut |id| out.push(id));
        out
    }
}

impl<M: Module> Module for Vec<M> {
    fn visit(&self, f: &mut dyn FnMut(ParamId)) {
        for m in self {
            m.visit(f);
        }
    }

    fn remap(&self, f: &mut dyn FnMut(ParamId) -> ParamId) -> Self {
        self.iter().map(|m| m.remap(f)).collect()
    }
}

/// Glorot-uniform matrix.
pub(crate) fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

/// Validity flags of one (possibly padded) sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqMask {
    valid: Vec<bool>,
}

impl SeqMask {
    pub fn new(valid: Vec<bool>) -> Self {
        SeqMask { valid }
    }

    pub fn all(len: usize) -> Self {
        SeqMask { valid: vec![true; len] }
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// `[len × width]` tensor of ones on valid rows, zeros on padding.
    pub fn rows(&self, width: usize) -> Tensor {
        let data = self
            .valid
            .iter()
            .flat_map(|&v| std::iter::repeat_n(if v { 1.0 } else { 0.0 }, width))
            .collect();
        Tensor::new(vec![self.valid.len(), width], data).expect("shape matches")
    }

    /// Per-element flags for a `[rows × len]` score matrix whose columns
    /// index this sequence.
    pub fn columns(&self, rows: usize) -> Vec<bool> {
        (0..rows).flat_map(|_| self.valid.iter().copied()).collect()
    }

    /// Per-element flags for a `[len × cols]` matrix whose rows index this
    /// sequence.
    pub fn row_flags(&self, cols: usize) -> Vec<bool> {
        self.valid
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, cols))
            .collect()
    }
}

/// Dropout settings and randomness for one forward pass.
pub struct ForwardCtx<'r> {
    rate: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> ForwardCtx<'r> {
    /// Deterministic forward pass without dropout.
    pub fn eval() -> Self {
        ForwardCtx { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: &'r mut ChaCha8Rng) -> Self {
        ForwardCtx { rate, rng: Some(rng) }
    }

    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let rate = self.rate;
        match self.rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let n = g.value(x).numel();
                let data = (0..n)
                    .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                    .collect();
                let mask = Tensor::new(g.shape(x).to_vec(), data)?;
                g.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }
}

/// Sinusoidal position encoding `[len × dim]`.
pub fn position_encoding(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, dim], data).expect("shape matches")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, fan_in, fan_out));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(ParamId)) {
        f(self.weight);
        if let Some(b) = self.bias {
            f(b);
        }
    }

    fn remap(&self, f: &mut dyn FnMut(ParamId) -> ParamId) -> Self {
        Linear {
            weight: f(self.weight),
            bias: self.bias.map(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

impl Module for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(ParamId)) {
        f(self.gain);
        f(self.bias);
    }

    fn remap(&self, f: &mut dyn FnMut(ParamId) -> ParamId) -> Self {
        LayerNorm {
            gain: f(self.gain),
            bias: f(self.bias),
        }
    }
}

/// Depthwise kernel `[k×ch]` followed by a pointwise linear map.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableConv {
    pub depthwise: ParamId,
    pub pointwise: Linear,
}

impl SeparableConv {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, k: usize, ch: usize) -> Self {
        SeparableConv {
            depthwise: store.add(format!("{name}.depthwise"), glorot(rng, k, ch)),
            pointwise: Linear::new(store, rng, &format!("{name}.pointwise"), ch, ch, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let k = g.param(self.depthwise);
        let h = g.depthwise_conv1d(x, k)?;
        self.pointwise.forward(g, h)
    }
}

impl Module for SeparableConv {
    fn visit(&self, f: &mut dyn FnMut(ParamId)) {
        f(self.depthwise);
        self.pointwise.visit(f);
    }

    fn remap(&self, f: &mut dyn FnMut(ParamId) -> ParamId) -> Self {
        SeparableConv {
            depthwise: f(self.depthwise),
            pointwise: self.pointwise.remap(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize) -> Self {
        MultiHeadAttention {
            heads,
            query: Linear::new(store, rng, &format!("{name}.query"), dim, dim, false),
            key: Linear::new(store, rng, &format!("{name}.key"), dim, dim, false),
            value: Linear::new(store, rng, &format!("{name}.value"), dim, dim, false),
            output: Linear::new(store, rng, &format!("{name}.output"), dim, dim, true),
        }
    }

    /// Scaled dot-product self-attention; padded positions are never attended to.
    pub fn forward(&self, g: &mut Graph, x: Var, mask: &SeqMask) -> Result<Var> {
        let (len, dim) = (g.shape(x)[0], g.shape(x)[1]);
        let dh = dim / self.heads;
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let key_mask = mask.columns(len);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let p = g.softmax(s, 1, Some(&key_mask))?;
            heads.push(g.matmul(p, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        self.output.forward(g, cat)
    }
}

impl Module for MultiHeadAttention {
    fn visit(&self, f: &mut dyn FnMut(ParamId)) {
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
        self.output.visit(f);
    }

    fn remap(&self, f: &mut dyn FnMut(ParamId) -> ParamId) -> Self {
        MultiHeadAttention {
            heads: self.heads,
            query: self.query.remap(f),
            key: self.key.remap(f),
            value: self.value.remap(f),
            output: self.output.remap(f),
        }
    }
}

/// Position encoding, convolutions, self-attention and a feed-forward layer,
/// each sublayer as `x + dropout(sublayer(layer_norm(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub convs: Vec<(LayerNorm, SeparableConv)>,
    pub attention_norm: LayerNorm,
    pub attention: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        convs: usize,
        kernel: usize,
        heads: usize,
    ) -> Self {
        let convs = (0..convs)
            .map(|i| {
                (
                    LayerNorm::new(store, &format!("{name}.conv{i}.norm"), dim),
                    SeparableConv::new(store, rng, &format!("{name}.conv{i}"), kernel, dim),
                )
            })
            .collect();
        EncoderBlock {
            convs,
            attention_norm: LayerNorm::new(store, &format!("{name}.attention.norm"), dim),
            attention: MultiHeadAttention::new(store, rng, &format!("{name}.attention"), dim, heads),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn.norm"), dim),
            ffn_in: Linear::new(store, rng, &format!("{name}.ffn.in"), dim, dim, true),
            ffn_out: Linear::new(store, rng, &format!("{name}.ffn.out"), dim, dim, true),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        mask: &SeqMask,
        positions: &Tensor,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let dim = g.shape(x)[1];
        let rows = mask.rows(dim);
        let mut x = g.add_const(x, positions)?;
        for (norm, conv) in &self.convs {
            let h = norm.forward(g, x)?;
            // padding must not leak into valid positions through the kernel
            let h = g.mul_const(h, rows.clone())?;
            let h = conv.forward(g, h)?;
            let h = g.relu(h);
            let h = ctx.dropout(g, h)?;
            x = g.add(x, h)?;
        }
        let h = self.attention_norm.forward(g, x)?;
        let h = self.attention.forward(g, h, mask)?;
        let h = ctx.dropout(g, h)?;
        x = g.add(x, h)?;

        let h = self.ffn_norm.forward(g, x)?;
        let h = self.ffn_in.forward(g, h)?;
        let h = g.relu(h);
        let h = self.ffn_out.forward(g, h)?;
        let h = ctx.dropout(g, h)?;
        g.add(x, h)
    }
}

impl Module for EncoderBlock {
    fn visit(&self, f: &mut dyn FnMut(ParamId)) {
        for (n, c) in &self.convs {
            n.visit(f);
            c.visit(f);
        }
        self.attention_norm.visit(f);
        self.attention.visit(f);
        self.ffn_norm.visit(f);
        self.ffn_in.visit(f);
        self.ffn_out.visit(f);
    }

    fn remap(&self, f: &mut dyn FnMut(ParamId) -> ParamId) -> Self {
        EncoderBlock {
            convs: self.convs.iter().map(|(n, c)| (n.remap(f), c.remap(f))).collect(),
            attention_norm: self.attention_norm.remap(f),
            attention: self.attention.remap(f),
            ffn_norm: self.ffn_norm.remap(f),
            ffn_in: self.ffn_in.remap(f),
            ffn_out: self.ffn_out.remap(f),
        }
    }
}

/// A stack of encoder blocks applied in sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack {
    pub blocks: Vec<EncoderBlock>,
}

impl EncoderStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        blocks: usize,
        dim: usize,
        convs: usize,
        kernel: usize,
        heads: usize,
    ) -> Self {
        EncoderStack {
            blocks: (0..blocks)
                .map(|b| EncoderBlock::new(store, rng, &format!("{name}.block{b}"), dim, convs, kernel, heads))
                .collect(),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: &SeqMask, ctx: &mut ForwardCtx) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != mask.len() {
            return Err(Error::shape("encoder input vs mask", &shape, &[mask.len()]));
        }
        if shape[0] == 0 {
            return Err(Error::Empty("encoder input has length 0".into()));
        }
        let positions = position_encoding(shape[0], shape[1]);
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(g, h, mask, &positions, ctx)?;
        }
        Ok(h)
    }
}

impl Module for EncoderStack {
    fn visit(&self, f: &mut dyn FnMut(ParamId)) {
        self.blocks.visit(f);
    }

    fn remap(&self, f: &mut dyn FnMut(ParamId) -> ParamId) -> Self {
        EncoderStack {
            blocks: self.blocks.remap(f),
        }
    }
}
