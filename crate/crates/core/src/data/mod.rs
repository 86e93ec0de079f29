//! Corpora: SQuAD-layout ingestion, tokenization with character offsets,
//! vocabularies, padded batches, the synthetic ASR noise channel and a
//! toy fact-lookup corpus generator.

mod batch;
mod noise;
mod squad;
mod synthetic;
mod tokenize;
mod vocab;
mod wer;

pub use batch::{batch, encode_input, Batch, Batches, DEFAULT_BATCH_SIZE};
pub use noise::{corrupt_asr, ConfusionPolicy, NoiseChannelConfig, NoiseManifest};
pub use squad::{
    load_squad, load_squad_file, parse_squad, save_squad_file, AlignedAnswer, Corpus, Document, Example, LoadStats,
    Provenance, Question, SquadAnswer, SquadArticle, SquadFile, SquadParagraph, SquadQa,
};
pub use synthetic::SyntheticConfig;
pub use tokenize::{char_slice, detokenize, gaps, tokenize, Token};
pub use vocab::{inject_word_vectors, read_word_vectors, Vocabulary, WordVectors, MAX_WORD_CHARS, OOV, PAD};
pub use wer::{corpus_wer, edit_distance, measure_wer};

#[cfg(test)]
mod tests;
