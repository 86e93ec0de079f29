//! Finite-difference gradient checks over primitives, layers, the whole
//! network and the adversarial objective.

pub mod fixtures;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adversarial::{
    attach_features, enc_loss_node, example_dis_term, gradient_penalty, AdversarialConfig, AdversarialMode,
    AdversarialTrainer, Discriminator, DiscriminatorConfig, GanAttach, TyingConfig,
};
use crate::autodiff::{
    finite_difference_check, param_finite_difference_check, AdamConfig, Coverage, Graph, ParamId, ParamStore,
    Tensor, Var,
};
use crate::error::{Error, Result};
use crate::model::{ContextQueryAttention, Domain, ForwardCtx, Layer, Module, ModelConfig, OutputLayer, QaModel, SeqMask};
use fixtures::{batch, qa_input, random};

/// Relative error allowed by a finite-difference check.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Absolute gap allowed between `∇L_enc` and `∇L_qa − λ_G∇L_dis`.
pub const LINEARITY_TOLERANCE: f64 = 1e-10;
const EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Primitives,
    Blocks,
    EndToEnd,
    Adversarial,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Primitives, Scope::Blocks, Scope::EndToEnd, Scope::Adversarial];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Primitives => "primitives",
            Scope::Blocks => "blocks",
            Scope::EndToEnd => "end_to_end",
            Scope::Adversarial => "adversarial",
        }
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck scope {s:?}; expected primitives, blocks, end_to_end or adversarial")))
    }
}

/// One checked function at one seed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub seed: u64,
    /// Largest relative error, or absolute gap for identity rows.
    pub error: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

impl fmt::Display for CheckRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<40} seed {:>2}  {:>10.3e}  (< {:.0e}, {} coords)  {}",
            self.name,
            self.seed,
            self.error,
            self.tolerance,
            self.checked,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub seeds: Vec<u64>,
    /// Hidden width of the end-to-end network.
    pub hidden_dim: usize,
    /// Coordinates probed per parameter tensor in layer checks.
    pub per_param: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { seeds: vec![0, 1, 2], hidden_dim: 8, per_param: 6 }
    }
}

pub fn run_scope(scope: Scope, opts: &GradcheckOptions) -> Result<Vec<CheckRow>> {
    match scope {
        Scope::Primitives => primitives(opts),
        Scope::Blocks => blocks(opts),
        Scope::EndToEnd => end_to_end(opts),
        Scope::Adversarial => adversarial(opts),
    }
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output coordinate matters.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let r = random(g.shape(y), seed ^ 0xabc);
    let p = g.mul_const(y, r)?;
    Ok(g.sum(p))
}

type Primitive = (&'static str, fn(&mut Graph, &[Var]) -> Result<Var>, &'static [&'static [usize]]);

const PRIMITIVES: &[Primitive] = &[
    ("matmul", |g, v| { let y = g.matmul(v[0], v[1])?; project(g, y, 1) }, &[&[3, 4], &[4, 2]]),
    ("add", |g, v| { let y = g.add(v[0], v[1])?; project(g, y, 2) }, &[&[3, 2], &[3, 2]]),
    ("sub", |g, v| { let y = g.sub(v[0], v[1])?; project(g, y, 3) }, &[&[3, 2], &[3, 2]]),
    ("mul", |g, v| { let y = g.mul(v[0], v[1])?; project(g, y, 4) }, &[&[3, 2], &[3, 2]]),
    ("add_row", |g, v| { let y = g.add_row(v[0], v[1])?; project(g, y, 5) }, &[&[3, 4], &[4]]),
    ("mul_row", |g, v| { let y = g.mul_row(v[0], v[1])?; project(g, y, 6) }, &[&[3, 4], &[4]]),
    ("affine", |g, v| { let y = g.affine(v[0], -1.5, 0.25); project(g, y, 7) }, &[&[2, 3]]),
    ("relu", |g, v| { let y = g.relu(v[0]); project(g, y, 8) }, &[&[3, 3]]),
    ("sigmoid", |g, v| { let y = g.sigmoid(v[0]); project(g, y, 9) }, &[&[3, 3]]),
    ("log_sigmoid", |g, v| { let y = g.log_sigmoid(v[0]); project(g, y, 10) }, &[&[3, 3]]),
    ("sqrt", |g, v| {
        let s = g.mul(v[0], v[0])?;
        let s = g.affine(s, 1.0, 0.1);
        let y = g.sqrt(s)?;
        project(g, y, 11)
    }, &[&[2, 3]]),
    ("transpose", |g, v| { let y = g.transpose(v[0])?; project(g, y, 12) }, &[&[2, 3]]),
    ("reshape", |g, v| { let y = g.reshape(v[0], &[6])?; project(g, y, 13) }, &[&[2, 3]]),
    ("concat_cols", |g, v| { let y = g.concat_cols(&[v[0], v[1]])?; project(g, y, 14) }, &[&[3, 2], &[3, 1]]),
    ("slice_cols", |g, v| { let y = g.slice_cols(v[0], 1, 2)?; project(g, y, 15) }, &[&[3, 4]]),
    ("mean", |g, v| { let s = g.mul(v[0], v[0])?; g.mean(s) }, &[&[3, 4]]),
    ("pick", |g, v| { let s = g.mul(v[0], v[0])?; g.pick(s, 4) }, &[&[3, 4]]),
    ("softmax_rows", |g, v| {
        let y = g.softmax(v[0], 1, Some(&[true, false, true, true, true, true, false, true, true]))?;
        project(g, y, 16)
    }, &[&[3, 3]]),
    ("softmax_cols", |g, v| { let y = g.softmax(v[0], 0, None)?; project(g, y, 17) }, &[&[3, 4]]),
    ("log_softmax", |g, v| { let y = g.log_softmax(v[0], 0, Some(&[true, true, false, true]))?; project(g, y, 18) }, &[&[4]]),
    ("cross_entropy", |g, v| g.cross_entropy(v[0], 1, Some(&[true, true, true, false, true])), &[&[5]]),
    ("layer_norm", |g, v| { let y = g.layer_norm(v[0], v[1], v[2])?; project(g, y, 19) }, &[&[3, 5], &[5], &[5]]),
    ("depthwise_conv1d", |g, v| { let y = g.depthwise_conv1d(v[0], v[1])?; project(g, y, 20) }, &[&[6, 3], &[5, 3]]),
    ("im2col", |g, v| { let y = g.im2col(v[0], 3)?; project(g, y, 21) }, &[&[4, 2]]),
    ("col2im", |g, v| { let y = g.col2im(v[0], 3)?; project(g, y, 22) }, &[&[4, 6]]),
    ("gather_rows", |g, v| {
        let y = g.gather_rows(v[0], &[Some(2), None, Some(0), Some(2)])?;
        project(g, y, 23)
    }, &[&[3, 4]]),
    ("segment_max", |g, v| { let y = g.segment_max(v[0], &[2, 0, 3])?; project(g, y, 24) }, &[&[5, 3]]),
];

fn primitives(opts: &GradcheckOptions) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for &(name, f, shapes) in PRIMITIVES {
        for &seed in &opts.seeds {
            let inputs: Vec<Tensor> =
                shapes.iter().enumerate().map(|(i, s)| random(s, seed * 31 + i as u64)).collect();
            let r = finite_difference_check(f, &inputs, EPS)?;
            rows.push(CheckRow { name: name.into(), seed, error: r.max_rel_error, tolerance: GRAD_TOLERANCE, checked: r.checked });
        }
    }
    Ok(rows)
}

fn param_row(
    name: &str,
    seed: u64,
    store: &mut ParamStore,
    ids: &[ParamId],
    coverage: Coverage,
    f: impl Fn(&mut Graph) -> Result<Var>,
) -> Result<CheckRow> {
    let r = param_finite_difference_check(store, ids, EPS, coverage, f)?;
    Ok(CheckRow { name: name.into(), seed, error: r.max_rel_error, tolerance: GRAD_TOLERANCE, checked: r.checked })
}

fn small_discriminator() -> DiscriminatorConfig {
    DiscriminatorConfig { residual_blocks: 2, channels: 4, filter_width: 3 }
}

fn blocks(opts: &GradcheckOptions) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let cfg = ModelConfig::tiny();
    for &seed in &opts.seeds {
        let cov = Coverage::Sample { per_param: opts.per_param, seed: 17 + seed };
        let h = cfg.hidden_dim;

        let mut store = ParamStore::new();
        let m = QaModel::new(&mut store, &cfg, seed, "m")?;
        let input = qa_input(&cfg, 3, 5, seed + 40);
        rows.push(param_row("input embedding", seed, &mut store, &m.embedding_params(), cov, |g| {
            let y = m.embed(g, &input.document)?;
            project(g, y, 98)
        })?);

        let x = random(&[5, h], seed + 10);
        let mask = SeqMask::new(vec![true, true, true, true, false]);
        rows.push(param_row("embedding encoder block", seed, &mut store, &m.layer_params(Layer::L1), cov, |g| {
            let xv = g.constant(x.clone());
            let y = m.embedding_encoder(g, xv, &mask, &mut ForwardCtx::eval())?;
            project(g, y, 99)
        })?);

        let x = random(&[6, h], seed + 20);
        rows.push(param_row("model encoder", seed, &mut store, &m.layer_params(Layer::L3), cov, |g| {
            let xv = g.constant(x.clone());
            let [a, b, c] = m.model_encoder(g, xv, &SeqMask::all(6), &mut ForwardCtx::eval())?;
            let s = g.concat_cols(&[a, b, c])?;
            project(g, s, 6)
        })?);

        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let att = ContextQueryAttention::new(&mut store, &mut rng, "att", h);
        let (c, q) = (random(&[5, h], seed + 1), random(&[3, h], seed + 2));
        rows.push(param_row("context-query attention", seed, &mut store, &att.params(), cov, |g| {
            let (cv, qv) = (g.constant(c.clone()), g.constant(q.clone()));
            let out = att.forward(g, cv, &SeqMask::all(5), qv, &SeqMask::new(vec![true, true, false]))?;
            project(g, out.fused, 5)
        })?);

        let out = OutputLayer::new(&mut store, &mut rng, "out", h);
        let ms: Vec<Tensor> = (0..3).map(|k| random(&[5, h], seed * 3 + k)).collect();
        let mask = SeqMask::new(vec![true, true, true, false, true]);
        rows.push(param_row("output layer", seed, &mut store, &out.params(), cov, |g| {
            let [a, b, c] = [0, 1, 2].map(|k| g.constant(ms[k].clone()));
            let (s, e) = out.logits(g, a, b, c)?;
            let ls = g.cross_entropy(s, 1, Some(mask.valid()))?;
            let le = g.cross_entropy(e, 4, Some(mask.valid()))?;
            g.add(ls, le)
        })?);

        let dcfg = small_discriminator();
        let d = Discriminator::new(&mut store, &dcfg, seed, "d")?;
        let x = random(&[6, dcfg.channels], seed + 5);
        let mask = SeqMask::new(vec![true, true, true, true, true, false]);
        rows.push(param_row("discriminator", seed, &mut store, &d.params(), Coverage::All, |g| {
            let xv = g.constant(x.clone());
            d.score(g, xv, &mask)
        })?);
    }
    Ok(rows)
}

fn end_to_end(opts: &GradcheckOptions) -> Result<Vec<CheckRow>> {
    let cfg = ModelConfig { hidden_dim: opts.hidden_dim, ..ModelConfig::tiny() };
    cfg.validate()?;
    let mut rows = Vec::new();
    for &seed in &opts.seeds {
        let mut store = ParamStore::new();
        let m = QaModel::new(&mut store, &cfg, seed, "m")?;
        let input = qa_input(&cfg, 3, 5, seed + 40);
        let cov = Coverage::Sample { per_param: opts.per_param, seed: 17 + seed };
        rows.push(param_row("qa loss, full network", seed, &mut store, &m.params(), cov, |g| {
            let out = m.forward(g, &input, &mut ForwardCtx::eval())?;
            out.loss(g, (1, 3))
        })?);
    }
    Ok(rows)
}

fn tiny_adversarial(lambda_g: f64) -> AdversarialConfig {
    AdversarialConfig {
        lambda_g,
        n_critic: 2,
        discriminator: DiscriminatorConfig { residual_blocks: 1, channels: ModelConfig::tiny().hidden_dim, filter_width: 3 },
        ..AdversarialConfig::default()
    }
}

/// Largest coordinate gap between `∇L_enc` and `∇L_qa − λ_G∇L_dis` over
/// the adversarial layers, on one random target example.
pub fn linearity_gap(lambda_g: f64, attach: GanAttach, seed: u64) -> Result<(f64, usize)> {
    let cfg = ModelConfig::tiny();
    let t = AdversarialTrainer::new(&cfg, TyingConfig::all_tied(attach), tiny_adversarial(lambda_g), AdamConfig::default(), seed)?;
    let ex = &batch(&cfg, 1, seed)[0];
    let critic = t.discriminator.as_ref().ok_or_else(|| Error::Config("no discriminator".into()))?;
    let model = &t.pair.target;
    let mut g = Graph::with_store(&t.store);
    let out = model.forward(&mut g, &ex.input, &mut ForwardCtx::eval())?;
    let qa = out.loss(&mut g, ex.span)?;
    let feats = attach_features(model, &mut g, &ex.input, attach, &mut ForwardCtx::eval())?;
    let s = feats.iter().map(|(v, m)| critic.score(&mut g, *v, m)).collect::<Result<Vec<_>>>()?;
    let dis = example_dis_term(&mut g, AdversarialMode::WassersteinGp, &s, Domain::Target, 1)?;
    let enc = enc_loss_node(&mut g, qa, dis, lambda_g)?;

    let mut grads = Vec::new();
    for root in [enc, qa, dis] {
        g.zero_grad();
        g.backward(root)?;
        grads.push(g.param_grads());
    }
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for id in t.adversarial_params() {
        let zero = Tensor::zeros(t.store.value(id).shape());
        let [a, b, c] = [0, 1, 2].map(|k| grads[k].get(&id).unwrap_or(&zero).clone());
        for i in 0..a.numel() {
            worst = worst.max((a.data()[i] - (b.data()[i] - lambda_g * c.data()[i])).abs());
            checked += 1;
        }
    }
    Ok((worst, checked))
}

fn adversarial(opts: &GradcheckOptions) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for &seed in &opts.seeds {
        let mut store = ParamStore::new();
        let dcfg = small_discriminator();
        let d = Discriminator::new(&mut store, &dcfg, seed, "d")?;
        let real = random(&[5, dcfg.channels], seed + 1);
        let fake = random(&[4, dcfg.channels], seed + 2);
        rows.push(param_row("gradient penalty", seed, &mut store, &d.params(), Coverage::All, |g| {
            gradient_penalty(g, &d, &[(&real, &fake)], &[0.3])
        })?);
        for attach in [GanAttach::EmbeddingEncoder, GanAttach::AttentionOutput] {
            for lambda in [0.0, 0.01, 1.0] {
                let (gap, checked) = linearity_gap(lambda, attach, seed)?;
                let at = if attach == GanAttach::EmbeddingEncoder { "embedding" } else { "attention" };
                rows.push(CheckRow {
                    name: format!("L_enc linearity, {at}, λ={lambda}"),
                    seed,
                    error: gap,
                    tolerance: LINEARITY_TOLERANCE,
                    checked,
                });
            }
        }
    }
    Ok(rows)
}
