use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{AttentionOutputs, ContextQueryAttention};
use super::embed::{InputEmbedding, QaInput, SequenceInput};
use super::layers::{EncoderStack, ForwardCtx, Module, SeqMask};
use super::output::{span_distributions, OutputLayer, SpanDistributions};
use super::ModelConfig;
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Which side of the adaptation a sequence or model belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Clean reference transcriptions.
    Source,
    /// ASR hypotheses.
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// The four tiable layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Layer {
    /// Embedding encoder.
    L1,
    /// Context-query attention.
    L2,
    /// Model encoder.
    L3,
    /// Output layer.
    L4,
}

impl Layer {
    pub const ALL: [Layer; 4] = [Layer::L1, Layer::L2, Layer::L3, Layer::L4];

    pub fn path(self) -> &'static str {
        match self {
            Layer::L1 => "embedding_encoder",
            Layer::L2 => "context_query_attention",
            Layer::L3 => "model_encoder",
            Layer::L4 => "output",
        }
    }
}

/// A detached encoder output: `[len × hidden]` values, validity mask and
/// the domain it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    pub values: Tensor,
    pub mask: Vec<bool>,
    pub domain: Domain,
}

impl EncodedSequence {
    pub fn new(values: Tensor, mask: Vec<bool>, domain: Domain) -> Result<Self> {
        if values.rank() != 2 || values.shape()[0] != mask.len() {
            return Err(Error::shape("EncodedSequence", values.shape(), &[mask.len()]));
        }
        Ok(EncodedSequence { values, mask, domain })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// A network input with its gold answer span (inclusive token indices).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledInput {
    pub input: QaInput,
    pub span: (usize, usize),
}

/// Graph nodes of a full forward pass.
#[derive(Clone, Debug)]
pub struct QaForward {
    /// Embedding-encoder output for the question, Ψ(q).
    pub question: Var,
    /// Embedding-encoder output for the document, Ψ(d).
    pub document: Var,
    pub question_mask: SeqMask,
    pub document_mask: SeqMask,
    pub attention: AttentionOutputs,
    pub model: [Var; 3],
    pub start_logits: Var,
    pub end_logits: Var,
}

impl QaForward {
    /// `−log p_start[start] − log p_end[end]` as a graph scalar.
    pub fn loss(&self, g: &mut Graph, gold: (usize, usize)) -> Result<Var> {
        let (s, e) = gold;
        let n = self.document_mask.len();
        if s > e || e >= n {
            return Err(Error::Index { what: "gold span", index: e.max(s), len: n });
        }
        if !self.document_mask.valid()[s] || !self.document_mask.valid()[e] {
            return Err(Error::Data(format!("gold span ({s}, {e}) falls on a masked position")));
        }
        let ls = g.cross_entropy(self.start_logits, s, Some(self.document_mask.valid()))?;
        let le = g.cross_entropy(self.end_logits, e, Some(self.document_mask.valid()))?;
        g.add(ls, le)
    }

    pub fn distributions(&self, g: &mut Graph) -> Result<SpanDistributions> {
        span_distributions(g, self.start_logits, self.end_logits, &self.document_mask)
    }
}

/// The extractive QA network: input embedding, embedding encoder (L1),
/// context-query attention (L2), model encoder (L3) and output layer (L4).
#[derive(Clone, Debug, PartialEq)]
pub struct QaModel {
    pub config: ModelConfig,
    pub embedding: InputEmbedding,
    pub embedding_encoder: EncoderStack,
    pub attention: ContextQueryAttention,
    pub model_encoder: EncoderStack,
    pub output: OutputLayer,
}

impl QaModel {
    /// Registers freshly initialised parameters under `prefix`.
    pub fn new(store: &mut ParamStore, config: &ModelConfig, seed: u64, prefix: &str) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config;
        let embedding = InputEmbedding::new(store, &mut rng, &format!("{prefix}.embedding"), c);
        let embedding_encoder = EncoderStack::new(
            store,
            &mut rng,
            &format!("{prefix}.{}", Layer::L1.path()),
            c.embedding_encoder_blocks,
            c.hidden_dim,
            c.convs_per_block,
            c.conv_kernel,
            c.attention_heads,
        );
        let attention = ContextQueryAttention::new(store, &mut rng, &format!("{prefix}.{}", Layer::L2.path()), c.hidden_dim);
        let model_encoder = EncoderStack::new(
            store,
            &mut rng,
            &format!("{prefix}.{}", Layer::L3.path()),
            c.model_encoder_blocks,
            c.hidden_dim,
            c.model_convs_per_block,
            c.conv_kernel,
            c.attention_heads,
        );
        let output = OutputLayer::new(store, &mut rng, &format!("{prefix}.{}", Layer::L4.path()), c.hidden_dim);
        Ok(QaModel {
            config: config.clone(),
            embedding,
            embedding_encoder,
            attention,
            model_encoder,
            output,
        })
    }

    pub fn layer_params(&self, layer: Layer) -> Vec<ParamId> {
        match layer {
            Layer::L1 => self.embedding_encoder.params(),
            Layer::L2 => self.attention.params(),
            Layer::L3 => self.model_encoder.params(),
            Layer::L4 => self.output.params(),
        }
    }

    pub fn embedding_params(&self) -> Vec<ParamId> {
        self.embedding.params()
    }

    pub fn embed(&self, g: &mut Graph, input: &SequenceInput) -> Result<Var> {
        self.embedding.forward(g, input)
    }

    /// Ψ: the embedding encoder applied to an embedded sequence.
    pub fn embedding_encoder(&self, g: &mut Graph, x: Var, mask: &SeqMask, ctx: &mut ForwardCtx) -> Result<Var> {
        self.embedding_encoder.forward(g, x, mask, ctx)
    }

    /// The shared-weight model encoder applied three times: `(M0, M1, M2)`.
    pub fn model_encoder(&self, g: &mut Graph, fused: Var, mask: &SeqMask, ctx: &mut ForwardCtx) -> Result<[Var; 3]> {
        let m0 = self.model_encoder.forward(g, fused, mask, ctx)?;
        let m1 = self.model_encoder.forward(g, m0, mask, ctx)?;
        let m2 = self.model_encoder.forward(g, m1, mask, ctx)?;
        Ok([m0, m1, m2])
    }

    /// Embeds and encodes question and document: `(Ψ(q), Ψ(d))`.
    pub fn encode(&self, g: &mut Graph, input: &QaInput, ctx: &mut ForwardCtx) -> Result<(Var, Var)> {
        let qm = SeqMask::new(input.question.mask.clone());
        let dm = SeqMask::new(input.document.mask.clone());
        let q = self.embed(g, &input.question)?;
        let d = self.embed(g, &input.document)?;
        let q = self.embedding_encoder(g, q, &qm, ctx)?;
        let d = self.embedding_encoder(g, d, &dm, ctx)?;
        Ok((q, d))
    }

    pub fn forward(&self, g: &mut Graph, input: &QaInput, ctx: &mut ForwardCtx) -> Result<QaForward> {
        let question_mask = SeqMask::new(input.question.mask.clone());
        let document_mask = SeqMask::new(input.document.mask.clone());
        let (question, document) = self.encode(g, input, ctx)?;
        let attention = self.attention.forward(g, document, &document_mask, question, &question_mask)?;
        let model = self.model_encoder(g, attention.fused, &document_mask, ctx)?;
        let (start_logits, end_logits) = self.output.logits(g, model[0], model[1], model[2])?;
        Ok(QaForward {
            question,
            document,
            question_mask,
            document_mask,
            attention,
            model,
            start_logits,
            end_logits,
        })
    }

    /// Span distributions without dropout.
    pub fn predict(&self, store: &ParamStore, input: &QaInput) -> Result<SpanDistributions> {
        let mut g = Graph::with_store(store);
        let out = self.forward(&mut g, input, &mut ForwardCtx::eval())?;
        out.distributions(&mut g)
    }
}

impl Module for QaModel {
    fn visit(&self, f: &mut dyn FnMut(ParamId)) {
        self.embedding.visit(f);
        self.embedding_encoder.visit(f);
        self.attention.visit(f);
        self.model_encoder.visit(f);
        self.output.visit(f);
    }

    fn remap(&self, f: &mut dyn FnMut(ParamId) -> ParamId) -> Self {
        QaModel {
            config: self.config.clone(),
            embedding: self.embedding.remap(f),
            embedding_encoder: self.embedding_encoder.remap(f),
            attention: self.attention.remap(f),
            model_encoder: self.model_encoder.remap(f),
            output: self.output.remap(f),
        }
    }
}
