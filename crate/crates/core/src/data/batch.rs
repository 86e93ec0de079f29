use super::squad::Example;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{LabeledInput, QaInput};

pub const DEFAULT_BATCH_SIZE: usize = 20;

/// Examples padded to a common question and document length.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub inputs: Vec<LabeledInput>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// `[batch × doc_len]` word ids, PAD past each document's end.
    pub fn document_ids(&self) -> Vec<Vec<usize>> {
        self.inputs.iter().map(|x| x.input.document.words.clone()).collect()
    }

    pub fn document_masks(&self) -> Vec<Vec<bool>> {
        self.inputs.iter().map(|x| x.input.document.mask.clone()).collect()
    }

    pub fn question_ids(&self) -> Vec<Vec<usize>> {
        self.inputs.iter().map(|x| x.input.question.words.clone()).collect()
    }

    pub fn question_masks(&self) -> Vec<Vec<bool>> {
        self.inputs.iter().map(|x| x.input.question.mask.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batches {
    pub batches: Vec<Batch>,
    /// Examples whose gold span fell past `max_doc_len`.
    pub dropped: usize,
}

/// Truncated, unpadded network input for one example.
pub fn encode_input(example: &Example, vocab: &Vocabulary, max_doc_len: Option<usize>, max_q_len: Option<usize>) -> QaInput {
    let d = &example.document[..max_doc_len.map_or(example.document.len(), |m| m.min(example.document.len()))];
    let q = &example.question[..max_q_len.map_or(example.question.len(), |m| m.min(example.question.len()))];
    QaInput { question: vocab.encode(q, q.len()), document: vocab.encode(d, d.len()) }
}

/// Groups `examples` in order into batches of `batch_size`, truncating
/// documents to `max_doc_len` and questions to `max_q_len` tokens.
pub fn batch(
    examples: &[Example],
    vocab: &Vocabulary,
    batch_size: usize,
    max_doc_len: Option<usize>,
    max_q_len: Option<usize>,
) -> Result<Batches> {
    if batch_size < 1 {
        return Err(Error::Config("batch_size must be ≥ 1".into()));
    }
    if max_doc_len == Some(0) || max_q_len == Some(0) {
        return Err(Error::Config("maximum sequence lengths must be ≥ 1".into()));
    }
    let mut dropped = 0;
    let kept: Vec<&Example> = examples
        .iter()
        .filter(|ex| {
            let fits = max_doc_len.is_none_or(|m| ex.span.1 < m);
            dropped += usize::from(!fits);
            fits
        })
        .collect();
    let mut batches = Vec::new();
    for chunk in kept.chunks(batch_size) {
        let raw: Vec<QaInput> = chunk.iter().map(|ex| encode_input(ex, vocab, max_doc_len, max_q_len)).collect();
        let dl = raw.iter().map(|x| x.document.len()).max().unwrap_or(0);
        let ql = raw.iter().map(|x| x.question.len()).max().unwrap_or(0);
        let inputs = chunk
            .iter()
            .zip(raw)
            .map(|(ex, x)| LabeledInput {
                input: QaInput {
                    question: pad(x.question, ql),
                    document: pad(x.document, dl),
                },
                span: ex.span,
            })
            .collect();
        batches.push(Batch { ids: chunk.iter().map(|ex| ex.id.clone()).collect(), inputs });
    }
    Ok(Batches { batches, dropped })
}

fn pad(mut s: crate::model::SequenceInput, len: usize) -> crate::model::SequenceInput {
    let extra = len - s.len();
    s.words.extend(std::iter::repeat_n(super::vocab::PAD, extra));
    s.chars.extend(std::iter::repeat_n(Vec::new(), extra));
    s.mask.extend(std::iter::repeat_n(false, extra));
    s
}
