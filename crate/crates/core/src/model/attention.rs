use rand_chacha::ChaCha8Rng;

use super::layers::{glorot, Linear, Module, SeqMask};
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Graph nodes produced by [`ContextQueryAttention::forward`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutputs {
    /// Trilinear similarity `[doc_len × q_len]`.
    pub similarity: Var,
    /// Similarity softmaxed over question positions.
    pub row_attention: Var,
    /// Context-to-query summary `[doc_len × hidden]`.
    pub context_to_query: Var,
    /// Query-to-context summary `[doc_len × hidden]`.
    pub query_to_context: Var,
    /// `[c; a; c⊙a; c⊙b]` projected back to `[doc_len × hidden]`.
    pub fused: Var,
}

/// Trilinear context-query attention with a fused output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextQueryAttention {
    pub w_context: ParamId,
    pub w_query: ParamId,
    pub w_product: ParamId,
    pub fuse: Linear,
}

impl ContextQueryAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        ContextQueryAttention {
            w_context: store.add(format!("{name}.w_context"), glorot(rng, dim, 1)),
            w_query: store.add(format!("{name}.w_query"), glorot(rng, dim, 1)),
            w_product: store.add(
                format!("{name}.w_product"),
                glorot(rng, 1, dim).reshaped(vec![dim]).expect("same size"),
            ),
            fuse: Linear::new(store, rng, &format!("{name}.fuse"), 4 * dim, dim, true),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        context: Var,
        context_mask: &SeqMask,
        query: Var,
        query_mask: &SeqMask,
    ) -> Result<AttentionOutputs> {
        let (n, m) = (context_mask.len(), query_mask.len());
        if g.shape(context)[0] != n || g.shape(query)[0] != m {
            return Err(Error::shape("context_query_attention", g.shape(context), g.shape(query)));
        }
        if query_mask.count() == 0 {
            return Err(Error::Degenerate("question is fully masked".into()));
        }
        if context_mask.count() == 0 {
            return Err(Error::Degenerate("document is fully masked".into()));
        }
        let (wc, wq, wp) = (g.param(self.w_context), g.param(self.w_query), g.param(self.w_product));

        // S[i,j] = w_c·c_i + w_q·q_j + w_p·(c_i ⊙ q_j)
        let sc = g.matmul(context, wc)?;
        let ones_m = g.constant(Tensor::ones(&[1, m]));
        let sc = g.matmul(sc, ones_m)?;
        let sq = g.matmul(query, wq)?;
        let sq = g.transpose(sq)?;
        let ones_n = g.constant(Tensor::ones(&[n, 1]));
        let sq = g.matmul(ones_n, sq)?;
        let cw = g.mul_row(context, wp)?;
        let qt = g.transpose(query)?;
        let sp = g.matmul(cw, qt)?;
        let s = g.add(sc, sq)?;
        let similarity = g.add(s, sp)?;

        let row_attention = g.softmax(similarity, 1, Some(&query_mask.columns(n)))?;
        let col_attention = g.softmax(similarity, 0, Some(&context_mask.row_flags(m)))?;
        let context_to_query = g.matmul(row_attention, query)?;
        let col_t = g.transpose(col_attention)?;
        let weights = g.matmul(row_attention, col_t)?;
        let query_to_context = g.matmul(weights, context)?;

        let ca = g.mul(context, context_to_query)?;
        let cb = g.mul(context, query_to_context)?;
        let cat = g.concat_cols(&[context, context_to_query, ca, cb])?;
        let fused = self.fuse.forward(g, cat)?;
        Ok(AttentionOutputs {
            similarity,
            row_attention,
            context_to_query,
            query_to_context,
            fused,
        })
    }
}

impl Module for ContextQueryAttention {
    fn visit(&self, f: &mut dyn FnMut(ParamId)) {
        f(self.w_context);
        f(self.w_query);
        f(self.w_product);
        self.fuse.visit(f);
    }

    fn remap(&self, f: &mut dyn FnMut(ParamId) -> ParamId) -> Self {
        ContextQueryAttention {
            w_context: f(self.w_context),
            w_query: f(self.w_query),
            w_product: f(self.w_product),
            fuse: self.fuse.remap(f),
        }
    }
}
