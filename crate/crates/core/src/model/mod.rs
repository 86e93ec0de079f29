//! QANet-style extractive QA network.
//!
//! [`QaModel::forward`] runs the input embedding, the embedding encoder
//! (L1), context-query attention (L2), the model encoder applied three
//! times (L3) and the span output layer (L4).

mod attention;
mod checkpoint;
mod config;
mod embed;
mod layers;
mod output;
mod qanet;

pub use attention::{AttentionOutputs, ContextQueryAttention};
pub use checkpoint::{Checkpoint, ShapedArray, CHECKPOINT_FORMAT_VERSION};
pub use config::ModelConfig;
pub use embed::{InputEmbedding, QaInput, SequenceInput};
pub use layers::{
    position_encoding, EncoderBlock, EncoderStack, ForwardCtx, LayerNorm, Linear, Module,
    MultiHeadAttention, SeparableConv, SeqMask,
};
pub use output::{batch_qa_loss, predict_span, qa_loss, OutputLayer, SpanDistributions};
pub use qanet::{Domain, EncodedSequence, Layer, LabeledInput, QaForward, QaModel};

pub(crate) use layers::glorot;

#[cfg(test)]
mod tests;
