use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::squad::Corpus;
use super::tokenize::Token;
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::model::{InputEmbedding, SequenceInput};

pub const PAD: usize = 0;
pub const OOV: usize = 1;
/// Longer tokens keep only their first characters.
pub const MAX_WORD_CHARS: usize = 16;

/// Word and character inventories. Ids 0 and 1 are reserved for padding
/// and unknown entries in both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabEntries", into = "VocabEntries")]
pub struct Vocabulary {
    words: Vec<String>,
    word_ids: HashMap<String, usize>,
    chars: Vec<char>,
    char_ids: HashMap<char, usize>,
}

#[derive(Clone, Serialize, Deserialize)]
struct VocabEntries {
    words: Vec<String>,
    chars: Vec<char>,
}

impl From<VocabEntries> for Vocabulary {
    fn from(e: VocabEntries) -> Self {
        Vocabulary::from_entries(e.words, e.chars)
    }
}

impl From<Vocabulary> for VocabEntries {
    fn from(v: Vocabulary) -> Self {
        VocabEntries { words: v.words[2..].to_vec(), chars: v.chars[2..].to_vec() }
    }
}

fn sorted_by_count<K: Ord + Clone + std::hash::Hash>(counts: HashMap<K, usize>, min_count: usize) -> Vec<K> {
    let mut entries: Vec<(K, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries.into_iter().map(|(k, _)| k).collect()
}

impl Vocabulary {
    /// Non-reserved entries in id order, starting at id 2.
    pub fn from_entries(words: Vec<String>, chars: Vec<char>) -> Self {
        let mut all_words = vec!["<pad>".to_string(), "<oov>".to_string()];
        all_words.extend(words);
        let mut all_chars = vec!['\0', '\u{FFFD}'];
        all_chars.extend(chars);
        let word_ids = all_words.iter().enumerate().skip(2).map(|(i, w)| (w.clone(), i)).collect();
        let char_ids = all_chars.iter().enumerate().skip(2).map(|(i, &c)| (c, i)).collect();
        Vocabulary { words: all_words, word_ids, chars: all_chars, char_ids }
    }

    /// Words seen at least `min_count` times over question and document
    /// tokens of all `corpora`, ordered by (count desc, text). Characters
    /// use a threshold of one.
    pub fn build(corpora: &[&Corpus], min_count: usize) -> Result<Self> {
        if min_count < 1 {
            return Err(Error::Config("vocabulary min_count must be ≥ 1".into()));
        }
        let mut words: HashMap<String, usize> = HashMap::new();
        let mut chars: HashMap<char, usize> = HashMap::new();
        let mut see = |t: &Token| {
            *words.entry(t.text.clone()).or_default() += 1;
            for c in t.text.chars() {
                *chars.entry(c).or_default() += 1;
            }
        };
        for corpus in corpora {
            for d in &corpus.documents {
                d.tokens.iter().for_each(&mut see);
                for q in &d.questions {
                    q.tokens.iter().for_each(&mut see);
                }
            }
        }
        Ok(Vocabulary::from_entries(sorted_by_count(words, min_count), sorted_by_count(chars, 1)))
    }

    /// Number of word ids, reserved ones included.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() == 2
    }

    pub fn char_len(&self) -> usize {
        self.chars.len()
    }

    pub fn word_id(&self, word: &str) -> usize {
        self.word_ids.get(word).copied().unwrap_or(OOV)
    }

    pub fn char_id(&self, c: char) -> usize {
        self.char_ids.get(&c).copied().unwrap_or(OOV)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.word_ids.contains_key(word)
    }

    /// Non-reserved words in id order.
    pub fn words(&self) -> &[String] {
        &self.words[2..]
    }

    /// Token ids padded to `len` (at least the token count).
    pub fn encode(&self, tokens: &[Token], len: usize) -> SequenceInput {
        let len = len.max(tokens.len());
        let mut words = vec![PAD; len];
        let mut chars = vec![Vec::new(); len];
        let mut mask = vec![false; len];
        for (i, t) in tokens.iter().enumerate() {
            words[i] = self.word_id(&t.text);
            chars[i] = t.text.chars().take(MAX_WORD_CHARS).map(|c| self.char_id(c)).collect();
            mask[i] = true;
        }
        SequenceInput { words, chars, mask, subword: None }
    }
}

/// Pretrained vectors matched against a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct WordVectors {
    pub dim: usize,
    /// `(word id, vector)` for every vocabulary word found in the file.
    pub rows: Vec<(usize, Vec<f64>)>,
    /// Lines whose token is not in the vocabulary.
    pub unused: usize,
}

/// Reads a text file of `token v1 v2 …` lines. A leading `count dim`
/// header line is skipped.
pub fn read_word_vectors(text: &str, vocab: &Vocabulary, dim: usize) -> Result<WordVectors> {
    let mut rows = Vec::new();
    let mut unused = 0;
    for (n, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse { path: format!("line {}", n + 1), msg: e.to_string() })?;
        if n == 0 && values.len() == 1 && token.parse::<usize>().is_ok() {
            continue;
        }
        if values.len() != dim {
            return Err(Error::Parse {
                path: format!("line {}", n + 1),
                msg: format!("expected {dim} values, found {}", values.len()),
            });
        }
        match vocab.word_ids.get(token) {
            Some(&id) => rows.push((id, values)),
            None => unused += 1,
        }
    }
    Ok(WordVectors { dim, rows, unused })
}

/// Overwrites rows of the word table with pretrained vectors.
pub fn inject_word_vectors(store: &mut ParamStore, embedding: &InputEmbedding, vectors: &WordVectors) -> Result<()> {
    let table = store.value_mut(embedding.word_table);
    let (rows, cols) = table.dims2()?;
    if cols != vectors.dim {
        return Err(Error::shape("word vector import", &[rows, cols], &[vectors.rows.len(), vectors.dim]));
    }
    for (id, v) in &vectors.rows {
        if *id >= rows {
            return Err(Error::Index { what: "word id", index: *id, len: rows });
        }
        table.data_mut()[id * cols..(id + 1) * cols].copy_from_slice(v);
    }
    Ok(())
}
