use rand_chacha::ChaCha8Rng;

use super::layers::{glorot, Module, SeqMask};
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// Start/end logits from `[M0;M1]` and `[M0;M2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputLayer {
    pub w_start: ParamId,
    pub w_end: ParamId,
}

/// Start and end probabilities over document positions.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanDistributions {
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
}

impl OutputLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        OutputLayer {
            w_start: store.add(format!("{name}.w_start"), glorot(rng, 2 * dim, 1)),
            w_end: store.add(format!("{name}.w_end"), glorot(rng, 2 * dim, 1)),
        }
    }

    /// Returns `(start_logits, end_logits)`, each a `[doc_len]` vector.
    pub fn logits(&self, g: &mut Graph, m0: Var, m1: Var, m2: Var) -> Result<(Var, Var)> {
        let n = g.shape(m0)[0];
        if g.shape(m1) != g.shape(m0) || g.shape(m2) != g.shape(m0) {
            return Err(Error::shape("output_layer", g.shape(m0), g.shape(m2)));
        }
        let (ws, we) = (g.param(self.w_start), g.param(self.w_end));
        let a = g.concat_cols(&[m0, m1])?;
        let s = g.matmul(a, ws)?;
        let s = g.reshape(s, &[n])?;
        let b = g.concat_cols(&[m0, m2])?;
        let e = g.matmul(b, we)?;
        let e = g.reshape(e, &[n])?;
        Ok((s, e))
    }

    /// Masked-softmax span distributions; padding gets probability 0.
    pub fn distributions(
        &self,
        g: &mut Graph,
        m0: Var,
        m1: Var,
        m2: Var,
        mask: &SeqMask,
    ) -> Result<SpanDistributions> {
        let (s, e) = self.logits(g, m0, m1, m2)?;
        span_distributions(g, s, e, mask)
    }
}

pub(crate) fn span_distributions(g: &mut Graph, start: Var, end: Var, mask: &SeqMask) -> Result<SpanDistributions> {
    if mask.count() == 0 {
        return Err(Error::Degenerate("document is fully masked".into()));
    }
    let ps = g.softmax(start, 0, Some(mask.valid()))?;
    let pe = g.softmax(end, 0, Some(mask.valid()))?;
    Ok(SpanDistributions {
        p_start: g.value(ps).data().to_vec(),
        p_end: g.value(pe).data().to_vec(),
    })
}

impl Module for OutputLayer {
    fn visit(&self, f: &mut dyn FnMut(ParamId)) {
        f(self.w_start);
        f(self.w_end);
    }

    fn remap(&self, f: &mut dyn FnMut(ParamId) -> ParamId) -> Self {
        OutputLayer {
            w_start: f(self.w_start),
            w_end: f(self.w_end),
        }
    }
}

/// The pair `i ≤ j < i + max_span_length` maximising `p_start[i]·p_end[j]`;
/// ties go to the smaller `i`, then the smaller `j`.
pub fn predict_span(p: &SpanDistributions, max_span_length: usize) -> (usize, usize) {
    let n = p.p_start.len().min(p.p_end.len());
    let mut best = (0, 0);
    let mut best_score = f64::NEG_INFINITY;
    for i in 0..n {
        for j in i..n.min(i + max_span_length.max(1)) {
            let score = p.p_start[i] * p.p_end[j];
            if score > best_score {
                best_score = score;
                best = (i, j);
            }
        }
    }
    best
}

/// `−log p_start[start] − log p_end[end]` for one example.
pub fn qa_loss(p: &SpanDistributions, gold: (usize, usize)) -> Result<f64> {
    let (s, e) = gold;
    let n = p.p_start.len();
    if s > e || e >= n {
        return Err(Error::Index { what: "gold span", index: e.max(s), len: n });
    }
    if p.p_start[s] <= 0.0 || p.p_end[e] <= 0.0 {
        return Err(Error::Data(format!("gold span ({s}, {e}) falls on a masked position")));
    }
    Ok(-p.p_start[s].ln() - p.p_end[e].ln())
}

/// Batch mean of [`qa_loss`].
pub fn batch_qa_loss(items: &[(SpanDistributions, (usize, usize))]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Empty("qa loss over an empty batch".into()));
    }
    let mut total = 0.0;
    for (p, gold) in items {
        total += qa_loss(p, *gold)?;
    }
    Ok(total / items.len() as f64)
}
