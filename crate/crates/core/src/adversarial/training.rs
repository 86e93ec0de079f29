use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::discriminator::{Discriminator, DiscriminatorConfig};
use super::loss::{check_lambda, dis_loss, example_dis_term, gradient_penalty, AdversarialMode, LossBundle};
use super::tying::{GanAttach, PairedModel, TyingConfig};
use crate::autodiff::{accumulate, AdamConfig, AdamState, GradMap, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Domain, ForwardCtx, LabeledInput, Module, ModelConfig, QaInput, QaModel, SeqMask};

/// Hyperparameters of the adversarial game.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversarialConfig {
    pub mode: AdversarialMode,
    pub lambda_g: f64,
    /// Discriminator updates per joint update.
    pub n_critic: usize,
    pub gp_weight: f64,
    pub discriminator: DiscriminatorConfig,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        AdversarialConfig {
            mode: AdversarialMode::WassersteinGp,
            lambda_g: 0.01,
            n_critic: 5,
            gp_weight: 10.0,
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl AdversarialConfig {
    pub fn validate(&self, tying: &TyingConfig, model: &ModelConfig) -> Result<()> {
        check_lambda(self.lambda_g)?;
        if !(self.gp_weight >= 0.0) || !self.gp_weight.is_finite() {
            return Err(Error::Config(format!("gp_weight must be finite and ≥ 0, got {}", self.gp_weight)));
        }
        if tying.gan_attach == GanAttach::None && self.lambda_g > 0.0 {
            return Err(Error::Config(format!(
                "gan_attach = none with lambda_g = {} > 0",
                self.lambda_g
            )));
        }
        self.discriminator.validate()?;
        if tying.gan_attach != GanAttach::None && self.discriminator.channels != model.hidden_dim {
            return Err(Error::Config(format!(
                "discriminator.channels {} must equal hidden_dim {}",
                self.discriminator.channels, model.hidden_dim
            )));
        }
        Ok(())
    }
}

/// Sequences the discriminator scores for one example, as graph nodes.
pub fn attach_features(
    model: &QaModel,
    g: &mut Graph,
    input: &QaInput,
    attach: GanAttach,
    ctx: &mut ForwardCtx,
) -> Result<Vec<(Var, SeqMask)>> {
    let qm = SeqMask::new(input.question.mask.clone());
    let dm = SeqMask::new(input.document.mask.clone());
    match attach {
        GanAttach::None => Ok(Vec::new()),
        GanAttach::EmbeddingEncoder => {
            let (q, d) = model.encode(g, input, ctx)?;
            Ok(vec![(q, qm), (d, dm)])
        }
        GanAttach::AttentionOutput => {
            let (q, d) = model.encode(g, input, ctx)?;
            let att = model.attention.forward(g, d, &dm, q, &qm)?;
            Ok(vec![(att.fused, dm)])
        }
    }
}

/// Rows of `t` whose mask flag is set.
fn valid_rows(t: &Tensor, mask: &SeqMask) -> Result<Tensor> {
    let (_, c) = t.dims2()?;
    let mut data = Vec::with_capacity(mask.count() * c);
    for (r, &v) in mask.valid().iter().enumerate() {
        if v {
            data.extend_from_slice(t.row(r));
        }
    }
    Tensor::new(vec![mask.count(), c], data)
}

/// Detached per-example features of one domain, encoder in eval mode.
pub type Features = Vec<Vec<Tensor>>;

/// Owns both models, the discriminator, their optimizers and the random
/// streams of a training run.
pub struct AdversarialTrainer {
    pub store: ParamStore,
    pub pair: PairedModel,
    pub discriminator: Option<Discriminator>,
    pub config: AdversarialConfig,
    model_params: Vec<ParamId>,
    model_opt: AdamState,
    critic_opt: Option<AdamState>,
    dropout_rate: f64,
    dropout_rng: ChaCha8Rng,
    gp_rng: ChaCha8Rng,
}

impl AdversarialTrainer {
    pub fn new(
        model: &ModelConfig,
        tying: TyingConfig,
        config: AdversarialConfig,
        optimizer: AdamConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate(&tying, model)?;
        let mut store = ParamStore::new();
        let pair = PairedModel::new(&mut store, model, seed, tying)?;
        let discriminator = match tying.gan_attach {
            GanAttach::None => None,
            _ => Some(Discriminator::new(
                &mut store,
                &config.discriminator,
                seed.wrapping_add(1),
                "discriminator",
            )?),
        };
        let model_params = pair.params();
        let model_opt = AdamState::new(optimizer, model_params.clone(), &store);
        let critic_opt = discriminator
            .as_ref()
            .map(|d| AdamState::new(optimizer, d.params(), &store));
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Ok(AdversarialTrainer {
            store,
            pair,
            discriminator,
            config,
            model_params,
            model_opt,
            critic_opt,
            dropout_rate: model.dropout_rate,
            dropout_rng: stream(1),
            gp_rng: stream(2),
        })
    }

    pub fn tying(&self) -> TyingConfig {
        self.pair.tying
    }

    pub fn model_params(&self) -> &[ParamId] {
        &self.model_params
    }

    pub fn discriminator_params(&self) -> Vec<ParamId> {
        self.discriminator.as_ref().map(|d| d.params()).unwrap_or_default()
    }

    /// Parameters that receive `−λ_G·∇L_dis` in the joint phase.
    pub fn adversarial_params(&self) -> Vec<ParamId> {
        self.pair.layer_params(self.pair.tying.adversarial_layers())
    }

    /// Valid rows of the sequences the critic scores, per example.
    pub fn features(&self, domain: Domain, batch: &[LabeledInput]) -> Result<Features> {
        let model = self.pair.model(domain);
        let attach = self.pair.tying.gan_attach;
        batch
            .iter()
            .map(|ex| {
                let mut g = Graph::with_store(&self.store);
                let feats = attach_features(model, &mut g, &ex.input, attach, &mut ForwardCtx::eval())?;
                feats.iter().map(|(v, m)| valid_rows(g.value(*v), m)).collect()
            })
            .collect()
    }

    /// Critic objective on detached features: `L_dis`, plus the weighted
    /// gradient penalty in Wasserstein mode. Returns the graph's loss node.
    pub(crate) fn critic_objective<'g>(
        &self,
        critic: &Discriminator,
        g: &mut Graph<'g>,
        src: &Features,
        tar: &Features,
        alphas: &[f64],
    ) -> Result<Var> {
        let score_all = |g: &mut Graph<'g>, feats: &Features| -> Result<Vec<Vec<Var>>> {
            feats
                .iter()
                .map(|seqs| {
                    seqs.iter()
                        .map(|t| {
                            let x = g.constant(t.clone());
                            critic.score(g, x, &SeqMask::all(t.shape()[0]))
                        })
                        .collect()
                })
                .collect()
        };
        let tar_scores = score_all(g, tar)?;
        let src_scores = score_all(g, src)?;
        let loss = dis_loss(g, self.config.mode, &tar_scores, &src_scores)?;
        if self.config.mode != AdversarialMode::WassersteinGp {
            return Ok(loss);
        }
        let pairs = gp_pairs(src, tar);
        let gp = gradient_penalty(g, critic, &pairs, alphas)?;
        let gp = g.scale(gp, self.config.gp_weight);
        g.add(loss, gp)
    }

    /// `n_critic` discriminator updates with the encoders frozen. Returns
    /// the last objective value, or `None` when no discriminator is attached.
    pub fn critic_phase(&mut self, src: &[LabeledInput], tar: &[LabeledInput]) -> Result<Option<f64>> {
        let Some(critic) = self.discriminator.clone() else {
            return Ok(None);
        };
        if src.is_empty() || tar.is_empty() {
            return Err(Error::Empty("critic phase needs both batches".into()));
        }
        let src_f = self.features(Domain::Source, src)?;
        let tar_f = self.features(Domain::Target, tar)?;
        let n_pairs = gp_pairs(&src_f, &tar_f).len();
        let mut last = None;
        for _ in 0..self.config.n_critic {
            let alphas: Vec<f64> = match self.config.mode {
                AdversarialMode::WassersteinGp => (0..n_pairs).map(|_| self.gp_rng.gen::<f64>()).collect(),
                AdversarialMode::LogGan => Vec::new(),
            };
            let grads = {
                let mut g = Graph::with_store(&self.store);
                let loss = self.critic_objective(&critic, &mut g, &src_f, &tar_f, &alphas)?;
                g.check_finite(loss, "critic loss")?;
                last = Some(g.value(loss).item()?);
                g.backward(loss)?;
                g.param_grads()
            };
            let opt = self.critic_opt.as_mut().expect("critic optimizer exists with a critic");
            opt.step(&mut self.store, &grads)?;
        }
        Ok(last)
    }

    /// One update of both QA models with the discriminator frozen:
    /// adversarial-layer parameters follow `∇L_qa − λ_G·∇L_dis`, all
    /// others `∇L_qa`.
    pub fn joint_phase(&mut self, src: &[LabeledInput], tar: &[LabeledInput]) -> Result<LossBundle> {
        let (grads, bundle) = self.joint_gradients(src, tar, true)?;
        self.model_opt.step(&mut self.store, &grads)?;
        Ok(bundle)
    }

    /// Gradient of the joint phase and the realised losses, without
    /// applying an update. Dropout is drawn from the training stream when
    /// `train` is set.
    pub fn joint_gradients(
        &mut self,
        src: &[LabeledInput],
        tar: &[LabeledInput],
        train: bool,
    ) -> Result<(GradMap, LossBundle)> {
        if src.is_empty() || tar.is_empty() {
            return Err(Error::Empty("joint phase needs both batches".into()));
        }
        let lambda = self.config.lambda_g;
        let adversarial: HashSet<ParamId> = self.adversarial_params().into_iter().collect();
        let critic_ids: HashSet<ParamId> = self.discriminator_params().into_iter().collect();
        let attach = self.pair.tying.gan_attach;
        let mut acc = GradMap::new();
        let mut l_qa = [0.0; 2];
        let mut l_dis = 0.0;
        for (k, (domain, batch)) in [(Domain::Source, src), (Domain::Target, tar)].into_iter().enumerate() {
            let model = self.pair.model(domain);
            let b = batch.len() as f64;
            for ex in batch {
                let mut g = Graph::with_store(&self.store);
                let mut ctx = if train {
                    ForwardCtx::train(self.dropout_rate, &mut self.dropout_rng)
                } else {
                    ForwardCtx::eval()
                };
                let out = model.forward(&mut g, &ex.input, &mut ctx)?;
                let loss = out.loss(&mut g, ex.span)?;
                g.check_finite(loss, "qa loss")?;
                l_qa[k] += g.value(loss).item()? / b;
                let scaled = g.scale(loss, 1.0 / b);
                g.backward(scaled)?;
                let qa_grads: GradMap = g
                    .param_grads()
                    .into_iter()
                    .filter(|(id, _)| !critic_ids.contains(id))
                    .collect();
                accumulate(&mut acc, &qa_grads, 1.0);

                if let Some(critic) = &self.discriminator {
                    let seqs = match attach {
                        GanAttach::EmbeddingEncoder => vec![
                            (out.question, out.question_mask.clone()),
                            (out.document, out.document_mask.clone()),
                        ],
                        GanAttach::AttentionOutput => vec![(out.attention.fused, out.document_mask.clone())],
                        GanAttach::None => unreachable!("no discriminator without an attach point"),
                    };
                    let scores = seqs
                        .iter()
                        .map(|(v, m)| critic.score(&mut g, *v, m))
                        .collect::<Result<Vec<_>>>()?;
                    let term = example_dis_term(&mut g, self.config.mode, &scores, domain, batch.len())?;
                    l_dis += g.value(term).item()?;
                    if lambda > 0.0 {
                        g.zero_grad();
                        g.backward(term)?;
                        let dis_grads: GradMap = g
                            .param_grads()
                            .into_iter()
                            .filter(|(id, _)| adversarial.contains(id))
                            .collect();
                        accumulate(&mut acc, &dis_grads, -lambda);
                    }
                }
            }
        }
        let critic_loss = None;
        let bundle = LossBundle::assemble(l_qa[0], l_qa[1], l_dis, lambda, self.config.gp_weight, critic_loss)?;
        Ok((acc, bundle))
    }

    /// Critic phase followed by one joint update.
    pub fn training_step(&mut self, src: &[LabeledInput], tar: &[LabeledInput]) -> Result<LossBundle> {
        let critic = self.critic_phase(src, tar)?;
        let mut bundle = self.joint_phase(src, tar)?;
        bundle.critic_loss = critic;
        Ok(bundle)
    }

    /// QA-only update of one domain's model (source-only, target-only and
    /// fine-tuning runs). Returns the mean QA loss.
    pub fn single_domain_step(&mut self, domain: Domain, batch: &[LabeledInput]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch is empty".into()));
        }
        let model = self.pair.model(domain);
        let b = batch.len() as f64;
        let mut acc = GradMap::new();
        let mut total = 0.0;
        for ex in batch {
            let mut g = Graph::with_store(&self.store);
            let mut ctx = ForwardCtx::train(self.dropout_rate, &mut self.dropout_rng);
            let out = model.forward(&mut g, &ex.input, &mut ctx)?;
            let loss = out.loss(&mut g, ex.span)?;
            g.check_finite(loss, "qa loss")?;
            total += g.value(loss).item()? / b;
            let scaled = g.scale(loss, 1.0 / b);
            g.backward(scaled)?;
            accumulate(&mut acc, &g.param_grads(), 1.0);
        }
        self.model_opt.step(&mut self.store, &acc)?;
        Ok(total)
    }

    /// Overwrites the target model's untied parameters with the source
    /// model's values, leaving optimizer state as it is.
    pub fn copy_source_to_target(&mut self) -> Result<()> {
        let pairs: Vec<(ParamId, ParamId)> = self
            .pair
            .source
            .params()
            .into_iter()
            .zip(self.pair.target.params())
            .filter(|(s, t)| s != t)
            .collect();
        for (s, t) in pairs {
            let v = self.store.value(s).clone();
            self.store.set(t, v)?;
        }
        Ok(())
    }

    /// Critic objective on the given batches with the current parameters,
    /// encoders in eval mode and fixed interpolation coefficients.
    pub fn critic_loss(&self, src: &[LabeledInput], tar: &[LabeledInput], alphas: &[f64]) -> Result<f64> {
        let critic = self
            .discriminator
            .as_ref()
            .ok_or_else(|| Error::Config("no discriminator attached".into()))?;
        let src_f = self.features(Domain::Source, src)?;
        let tar_f = self.features(Domain::Target, tar)?;
        let mut g = Graph::with_store(&self.store);
        let loss = self.critic_objective(critic, &mut g, &src_f, &tar_f, alphas)?;
        g.value(loss).item()
    }

    /// Number of interpolation pairs the gradient penalty uses for these
    /// batches.
    pub fn gp_pair_count(&self, src: &[LabeledInput], tar: &[LabeledInput]) -> usize {
        let per_example = match self.pair.tying.gan_attach {
            GanAttach::None => 0,
            GanAttach::EmbeddingEncoder => 2,
            GanAttach::AttentionOutput => 1,
        };
        src.len().min(tar.len()) * per_example
    }
}

/// Source sequence `i` is interpolated with target sequence `i`, up to the
/// smaller batch.
fn gp_pairs<'a>(src: &'a Features, tar: &'a Features) -> Vec<(&'a Tensor, &'a Tensor)> {
    src.iter()
        .zip(tar)
        .flat_map(|(s, t)| s.iter().zip(t.iter()))
        .collect()
}
