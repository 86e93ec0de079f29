use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tokenize::{char_slice, tokenize, Token};
use crate::error::{Error, Result};
use crate::model::Domain;

/// SQuAD v1.1 file layout.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SquadFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    pub data: Vec<SquadArticle>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SquadArticle {
    #[serde(default)]
    pub title: String,
    pub paragraphs: Vec<SquadParagraph>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SquadParagraph {
    pub context: String,
    pub qas: Vec<SquadQa>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SquadQa {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub answers: Vec<SquadAnswer>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SquadAnswer {
    pub text: String,
    pub answer_start: usize,
}

/// Where a corpus came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    #[default]
    Original,
    Corrupted {
        seed: u64,
        /// `None` when the channel ran with uncalibrated probabilities.
        target_wer: Option<f64>,
        measured_wer: f64,
    },
}

/// Counts of questions skipped while loading.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadStats {
    /// No answer starts and ends on token boundaries.
    pub misaligned: usize,
    /// The question has no answers at all.
    pub missing_answers: usize,
}

/// A gold answer aligned to whole tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedAnswer {
    pub text: String,
    pub start_char: usize,
    /// Inclusive token span in the document.
    pub span: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub tokens: Vec<Token>,
    /// Aligned answers; the first one is the training target.
    pub answers: Vec<AlignedAnswer>,
    /// Every gold answer text, aligned or not, for scoring.
    pub golds: Vec<String>,
}

/// A paragraph and the questions asked about it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub title: String,
    /// Index of the article the paragraph belongs to.
    pub article: usize,
    pub context: String,
    pub tokens: Vec<Token>,
    pub questions: Vec<Question>,
}

impl Document {
    pub fn token_texts(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }
}

/// One (question, document, answer) triple.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub question: Vec<Token>,
    pub document: Vec<Token>,
    pub context: String,
    /// Inclusive gold token span.
    pub span: (usize, usize),
    pub golds: Vec<String>,
}

impl Example {
    /// The raw document text covered by tokens `start..=end`.
    pub fn span_text(&self, span: (usize, usize)) -> String {
        let (s, e) = span;
        if s > e || e >= self.document.len() {
            return String::new();
        }
        char_slice(&self.context, self.document[s].start, self.document[e].end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub domain: Domain,
    pub provenance: Provenance,
    pub stats: LoadStats,
}

impl Corpus {
    pub fn new(documents: Vec<Document>, domain: Domain) -> Self {
        Corpus {
            documents,
            domain,
            provenance: Provenance::Original,
            stats: LoadStats::default(),
        }
    }

    /// Builds a corpus, aligning answer offsets to token spans.
    pub fn from_squad(file: &SquadFile, domain: Domain) -> Self {
        let mut stats = LoadStats::default();
        let mut documents = Vec::new();
        for (a, article) in file.data.iter().enumerate() {
            for p in &article.paragraphs {
                let tokens = tokenize(&p.context);
                let mut questions = Vec::new();
                for qa in &p.qas {
                    if qa.answers.is_empty() {
                        stats.missing_answers += 1;
                        continue;
                    }
                    let answers: Vec<AlignedAnswer> =
                        qa.answers.iter().filter_map(|ans| align(&p.context, &tokens, ans)).collect();
                    if answers.is_empty() {
                        stats.misaligned += 1;
                        continue;
                    }
                    questions.push(Question {
                        id: qa.id.clone(),
                        text: qa.question.clone(),
                        tokens: tokenize(&qa.question),
                        answers,
                        golds: qa.answers.iter().map(|a| a.text.clone()).collect(),
                    });
                }
                documents.push(Document {
                    title: article.title.clone(),
                    article: a,
                    context: p.context.clone(),
                    tokens,
                    questions,
                });
            }
        }
        Corpus { stats, ..Corpus::new(documents, domain) }
    }

    /// Back to the file layout; only aligned answers are written.
    pub fn to_squad(&self) -> SquadFile {
        let mut data: Vec<SquadArticle> = Vec::new();
        let mut current: Option<usize> = None;
        for d in &self.documents {
            if current != Some(d.article) || data.is_empty() {
                data.push(SquadArticle { title: d.title.clone(), paragraphs: Vec::new() });
                current = Some(d.article);
            }
            let qas = d
                .questions
                .iter()
                .map(|q| SquadQa {
                    id: q.id.clone(),
                    question: q.text.clone(),
                    answers: q
                        .answers
                        .iter()
                        .map(|a| SquadAnswer { text: a.text.clone(), answer_start: a.start_char })
                        .collect(),
                })
                .collect();
            data.last_mut()
                .expect("pushed above")
                .paragraphs
                .push(SquadParagraph { context: d.context.clone(), qas });
        }
        SquadFile { version: Some("1.1".into()), data }
    }

    /// Flattens into examples, one per question.
    pub fn examples(&self) -> Vec<Example> {
        let mut out = Vec::new();
        for d in &self.documents {
            for q in &d.questions {
                out.push(Example {
                    id: q.id.clone(),
                    question: q.tokens.clone(),
                    document: d.tokens.clone(),
                    context: d.context.clone(),
                    span: q.answers[0].span,
                    golds: q.golds.clone(),
                });
            }
        }
        out
    }

    pub fn num_questions(&self) -> usize {
        self.documents.iter().map(|d| d.questions.len()).sum()
    }

    /// The first `n` documents and the rest, as two corpora.
    pub fn split_documents(&self, n: usize) -> (Corpus, Corpus) {
        let n = n.min(self.documents.len());
        let part = |docs: &[Document]| Corpus { documents: docs.to_vec(), ..self.clone_empty() };
        (part(&self.documents[..n]), part(&self.documents[n..]))
    }

    fn clone_empty(&self) -> Corpus {
        Corpus {
            documents: Vec::new(),
            domain: self.domain,
            provenance: self.provenance.clone(),
            stats: self.stats,
        }
    }

    pub fn num_document_tokens(&self) -> usize {
        self.documents.iter().map(|d| d.tokens.len()).sum()
    }
}

fn align(context: &str, tokens: &[Token], ans: &SquadAnswer) -> Option<AlignedAnswer> {
    let start = ans.answer_start;
    let end = start + ans.text.chars().count();
    if ans.text.is_empty() || char_slice(context, start, end) != ans.text {
        return None;
    }
    let s = tokens.iter().position(|t| t.start == start)?;
    let e = tokens.iter().position(|t| t.end == end)?;
    (s <= e).then(|| AlignedAnswer { text: ans.text.clone(), start_char: start, span: (s, e) })
}

/// Parses SQuAD JSON text; structural errors name the offending JSON path.
pub fn parse_squad(json: &str) -> Result<SquadFile> {
    let de = &mut serde_json::Deserializer::from_str(json);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: e.path().to_string(),
        msg: e.into_inner().to_string(),
    })
}

/// [`parse_squad`] then [`Corpus::from_squad`].
pub fn load_squad(json: &str, domain: Domain) -> Result<Corpus> {
    Ok(Corpus::from_squad(&parse_squad(json)?, domain))
}

pub fn load_squad_file(path: &Path, domain: Domain) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    load_squad(&text, domain).map_err(|e| match e {
        Error::Parse { path: p, msg } => Error::Parse { path: format!("{}:{p}", path.display()), msg },
        other => other,
    })
}

pub fn save_squad_file(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&corpus.to_squad())?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
