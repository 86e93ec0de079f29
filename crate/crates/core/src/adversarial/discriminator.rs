use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{glorot, Linear, Module, SeqMask};

/// Shape of the domain critic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub residual_blocks: usize,
    /// Filters per convolution; also the required input width.
    pub channels: usize,
    pub filter_width: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            residual_blocks: 5,
            channels: 96,
            filter_width: 5,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.residual_blocks == 0 || self.channels == 0 {
            return Err(Error::Config("discriminator needs at least one block and one channel".into()));
        }
        if self.filter_width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "discriminator filter_width must be odd, got {}",
                self.filter_width
            )));
        }
        Ok(())
    }
}

/// Dense 1D convolution with "same" zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub linear: Linear,
    pub width: usize,
}

impl Conv1d {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize, ch: usize) -> Self {
        Conv1d {
            linear: Linear::new(store, rng, name, width * ch, ch, true),
            width,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let cols = g.im2col(x, self.width)?;
        self.linear.forward(g, cols)
    }

    /// Vector-Jacobian product with respect to the input, built from graph
    /// ops so it can itself be differentiated.
    fn input_vjp(&self, g: &mut Graph, upstream: Var) -> Result<Var> {
        let w = g.param(self.linear.weight);
        let wt = g.transpose(w)?;
        let cols = g.matmul(upstream, wt)?;
        g.col2im(cols, self.width)
    }
}

impl Module for Conv1d {
    fn visit(&self, f: &mut dyn FnMut(ParamId)) {
        self.linear.visit(f);
    }

    fn remap(&self, f: &mut dyn FnMut(ParamId) -> ParamId) -> Self {
        Conv1d {
            linear: self.linear.remap(f),
            width: self.width,
        }
    }
}

/// Pre-activation residual block: `x + conv2(relu(conv1(relu(x))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
}

impl Module for ResidualBlock {
    fn visit(&self, f: &mut dyn FnMut(ParamId)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
    }

    fn remap(&self, f: &mut dyn FnMut(ParamId) -> ParamId) -> Self {
        ResidualBlock {
            conv1: self.conv1.remap(f),
            conv2: self.conv2.remap(f),
        }
    }
}

/// The domain critic: residual conv blocks, mean-pool over valid
/// positions and a linear map to one scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub blocks: Vec<ResidualBlock>,
    pub head: Linear,
}

/// Values saved by a forward pass that the input-gradient needs.
struct Trace {
    rows: Tensor,
    /// Per block: relu derivative masks before conv1 and before conv2.
    relu_masks: Vec<(Tensor, Tensor)>,
    pool: Tensor,
}

fn relu_mask(t: &Tensor) -> Tensor {
    t.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, config: &DiscriminatorConfig, seed: u64, name: &str) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, ch) = (config.filter_width, config.channels);
        let blocks = (0..config.residual_blocks)
            .map(|b| ResidualBlock {
                conv1: Conv1d::new(store, &mut rng, &format!("{name}.block{b}.conv1"), w, ch),
                conv2: Conv1d::new(store, &mut rng, &format!("{name}.block{b}.conv2"), w, ch),
            })
            .collect();
        let head = Linear {
            weight: store.add(format!("{name}.head.weight"), glorot(&mut rng, ch, 1)),
            bias: Some(store.add(format!("{name}.head.bias"), Tensor::zeros(&[1]))),
        };
        Ok(Discriminator {
            config: config.clone(),
            blocks,
            head,
        })
    }

    fn check_input(&self, g: &Graph, x: Var, mask: &SeqMask) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.config.channels {
            return Err(Error::Config(format!(
                "discriminator expects width {}, got input shape {s:?}",
                self.config.channels
            )));
        }
        if s[0] != mask.len() {
            return Err(Error::shape("discriminator input vs mask", s, &[mask.len()]));
        }
        if mask.count() == 0 {
            return Err(Error::Empty("discriminator input has no valid positions".into()));
        }
        Ok(())
    }

    fn forward_traced(&self, g: &mut Graph, x: Var, mask: &SeqMask) -> Result<(Var, Trace)> {
        self.check_input(g, x, mask)?;
        let rows = mask.rows(self.config.channels);
        let mut h = g.mul_const(x, rows.clone())?;
        let mut relu_masks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let m1 = relu_mask(g.value(h));
            let a = g.relu(h);
            let a = block.conv1.forward(g, a)?;
            let a = g.mul_const(a, rows.clone())?;
            let m2 = relu_mask(g.value(a));
            let a = g.relu(a);
            let a = block.conv2.forward(g, a)?;
            let sum = g.add(h, a)?;
            h = g.mul_const(sum, rows.clone())?;
            relu_masks.push((m1, m2));
        }
        let n = mask.count() as f64;
        let pool = Tensor::new(
            vec![1, mask.len()],
            mask.valid().iter().map(|&v| if v { 1.0 / n } else { 0.0 }).collect(),
        )?;
        let p = g.constant(pool.clone());
        let pooled = g.matmul(p, h)?;
        let out = self.head.forward(g, pooled)?;
        let score = g.reshape(out, &[])?;
        Ok((score, Trace { rows, relu_masks, pool }))
    }

    /// Scalar critic score of one sequence.
    pub fn score(&self, g: &mut Graph, x: Var, mask: &SeqMask) -> Result<Var> {
        Ok(self.forward_traced(g, x, mask)?.0)
    }

    /// `(score, ∂score/∂x)`, where the input gradient is itself a graph
    /// node depending on the critic parameters. ReLU derivatives are
    /// treated as constants (their own derivative is zero almost
    /// everywhere).
    pub fn score_and_input_grad(&self, g: &mut Graph, x: Var, mask: &SeqMask) -> Result<(Var, Var)> {
        let (score, trace) = self.forward_traced(g, x, mask)?;
        // d score / d pooled = head.weightᵀ, broadcast back over rows by the pool
        let w = g.param(self.head.weight);
        let wt = g.transpose(w)?;
        let pool_t = g.constant(trace.pool.transpose()?);
        let mut up = g.matmul(pool_t, wt)?;
        for (block, (m1, m2)) in self.blocks.iter().zip(&trace.relu_masks).rev() {
            up = g.mul_const(up, trace.rows.clone())?;
            let d = block.conv2.input_vjp(g, up)?;
            let d = g.mul_const(d, m2.clone())?;
            let d = g.mul_const(d, trace.rows.clone())?;
            let d = block.conv1.input_vjp(g, d)?;
            let d = g.mul_const(d, m1.clone())?;
            up = g.add(up, d)?;
        }
        let grad = g.mul_const(up, trace.rows)?;
        Ok((score, grad))
    }
}

impl Module for Discriminator {
    fn visit(&self, f: &mut dyn FnMut(ParamId)) {
        self.blocks.visit(f);
        self.head.visit(f);
    }

    fn remap(&self, f: &mut dyn FnMut(ParamId) -> ParamId) -> Self {
        Discriminator {
            config: self.config.clone(),
            blocks: self.blocks.remap(f),
            head: self.head.remap(f),
        }
    }
}
