use rand_chacha::ChaCha8Rng;

use super::layers::{glorot, Linear, Module};
use super::ModelConfig;
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Token ids of one sequence plus the per-token subword signal.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceInput {
    pub words: Vec<usize>,
    /// Character ids of each token; padding tokens have none.
    pub chars: Vec<Vec<usize>>,
    pub mask: Vec<bool>,
    /// Precomputed `[len × char_dim]` subword vectors that replace the
    /// character CNN when present (e.g. phoneme-sequence embeddings).
    pub subword: Option<Tensor>,
}

impl SequenceInput {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// One question/document pair ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct QaInput {
    pub question: SequenceInput,
    pub document: SequenceInput,
}

/// Word lookup, character CNN with max-pooling, projection to the hidden
/// width and a highway stack.
#[derive(Clone, Debug, PartialEq)]
pub struct InputEmbedding {
    pub word_table: ParamId,
    pub char_table: ParamId,
    pub char_conv: Linear,
    pub projection: Linear,
    pub highway: Vec<(Linear, Linear)>,
    char_window: usize,
    char_dim: usize,
}

impl InputEmbedding {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        let word_table = store.add(
            format!("{name}.word_table"),
            glorot(rng, cfg.word_vocab_size, cfg.word_dim),
        );
        let char_table = store.add(
            format!("{name}.char_table"),
            glorot(rng, cfg.char_vocab_size, cfg.char_dim),
        );
        let char_conv = Linear::new(
            store,
            rng,
            &format!("{name}.char_conv"),
            cfg.char_window * cfg.char_dim,
            cfg.char_dim,
            true,
        );
        let projection = Linear::new(
            store,
            rng,
            &format!("{name}.projection"),
            cfg.word_dim + cfg.char_dim,
            cfg.hidden_dim,
            false,
        );
        let highway = (0..cfg.highway_layers)
            .map(|i| {
                (
                    Linear::new(store, rng, &format!("{name}.highway{i}.transform"), cfg.hidden_dim, cfg.hidden_dim, true),
                    Linear::new(store, rng, &format!("{name}.highway{i}.gate"), cfg.hidden_dim, cfg.hidden_dim, true),
                )
            })
            .collect();
        InputEmbedding {
            word_table,
            char_table,
            char_conv,
            projection,
            highway,
            char_window: cfg.char_window,
            char_dim: cfg.char_dim,
        }
    }

    fn char_features(&self, g: &mut Graph, chars: &[Vec<usize>]) -> Result<Var> {
        let half = self.char_window / 2;
        let mut index = Vec::new();
        let mut lens = Vec::with_capacity(chars.len());
        for token in chars {
            lens.push(token.len());
            for p in 0..token.len() {
                for j in 0..self.char_window {
                    let src = (p + j).checked_sub(half).filter(|&s| s < token.len());
                    index.push(src.map(|s| token[s]));
                }
            }
        }
        let windows: usize = lens.iter().sum();
        if windows == 0 {
            return Ok(g.constant(Tensor::zeros(&[chars.len(), self.char_dim])));
        }
        let table = g.param(self.char_table);
        let rows = g.gather_rows(table, &index)?;
        let unfolded = g.reshape(rows, &[windows, self.char_window * self.char_dim])?;
        let conv = self.char_conv.forward(g, unfolded)?;
        let conv = g.relu(conv);
        g.segment_max(conv, &lens)
    }

    /// `[len × hidden_dim]` embedding of a sequence.
    pub fn forward(&self, g: &mut Graph, input: &SequenceInput) -> Result<Var> {
        let len = input.len();
        if input.chars.len() != len || input.mask.len() != len {
            return Err(Error::shape("embedding input", &[len], &[input.chars.len(), input.mask.len()]));
        }
        let table = g.param(self.word_table);
        let ids: Vec<Option<usize>> = input.words.iter().map(|&w| Some(w)).collect();
        let words = g.gather_rows(table, &ids)?;
        let sub = match &input.subword {
            Some(t) => {
                if t.shape() != [len, self.char_dim] {
                    return Err(Error::shape("injected subword vectors", t.shape(), &[len, self.char_dim]));
                }
                g.constant(t.clone())
            }
            None => self.char_features(g, &input.chars)?,
        };
        let cat = g.concat_cols(&[words, sub])?;
        let mut x = self.projection.forward(g, cat)?;
        for (transform, gate) in &self.highway {
            let t = transform.forward(g, x)?;
            let t = g.relu(t);
            let s = gate.forward(g, x)?;
            let s = g.sigmoid(s);
            // x + s ⊙ (t − x)  ==  s ⊙ t + (1 − s) ⊙ x
            let d = g.sub(t, x)?;
            let d = g.mul(s, d)?;
            x = g.add(x, d)?;
        }
        Ok(x)
    }
}

impl Module for InputEmbedding {
    fn visit(&self, f: &mut dyn FnMut(ParamId)) {
        f(self.word_table);
        f(self.char_table);
        self.char_conv.visit(f);
        self.projection.visit(f);
        for (t, s) in &self.highway {
            t.visit(f);
            s.visit(f);
        }
    }

    fn remap(&self, f: &mut dyn FnMut(ParamId) -> ParamId) -> Self {
        InputEmbedding {
            word_table: f(self.word_table),
            char_table: f(self.char_table),
            char_conv: self.char_conv.remap(f),
            projection: self.projection.remap(f),
            highway: self.highway.iter().map(|(t, s)| (t.remap(f), s.remap(f))).collect(),
            char_window: self.char_window,
            char_dim: self.char_dim,
        }
    }
}
