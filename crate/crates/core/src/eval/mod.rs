//! SQuAD v1.1 scoring: exact match and macro-averaged token F1.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Example};
use crate::error::{Error, Result};

/// Question id → predicted answer text.
pub type PredictionSet = BTreeMap<String, String>;

/// Lowercases, drops ASCII punctuation, removes the articles a/an/the and
/// collapses whitespace, in that order.
pub fn normalize_answer(text: &str) -> String {
    static ARTICLES: OnceLock<Regex> = OnceLock::new();
    let articles = ARTICLES.get_or_init(|| Regex::new(r"\b(a|an|the)\b").expect("valid pattern"));
    let lower = text.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let no_articles = articles.replace_all(&no_punct, " ");
    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn check_golds(golds: &[String]) -> Result<()> {
    if golds.is_empty() {
        return Err(Error::Data("scoring needs at least one gold answer".into()));
    }
    Ok(())
}

/// 1.0 when the normalized prediction equals some normalized gold.
pub fn exact_match(prediction: &str, golds: &[String]) -> Result<f64> {
    check_golds(golds)?;
    let p = normalize_answer(prediction);
    Ok(if golds.iter().any(|g| normalize_answer(g) == p) { 1.0 } else { 0.0 })
}

fn f1_single(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return if pt.is_empty() && gt.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    // harmonic mean of overlap/|p| and overlap/|g|
    2.0 * overlap as f64 / (pt.len() + gt.len()) as f64
}

/// Best token-overlap F1 against any gold.
pub fn f1(prediction: &str, golds: &[String]) -> Result<f64> {
    check_golds(golds)?;
    Ok(golds.iter().map(|g| f1_single(prediction, g)).fold(0.0, f64::max))
}

/// Scores of one question, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub id: String,
    pub exact_match: f64,
    pub f1: f64,
    pub missing: bool,
}

/// Corpus scores in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub exact_match: f64,
    pub f1: f64,
    /// Questions without a prediction; they score zero.
    pub missing: usize,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EM {:.2}  F1 {:.2}  missing {}", self.exact_match, self.f1, self.missing)
    }
}

/// Per-question scores in corpus order.
pub fn score_questions(predictions: &PredictionSet, corpus: &Corpus) -> Result<Vec<QuestionScore>> {
    let mut out = Vec::with_capacity(corpus.num_questions());
    for d in &corpus.documents {
        for q in &d.questions {
            out.push(score_one(predictions, &q.id, &q.golds)?);
        }
    }
    Ok(out)
}

fn score_one(predictions: &PredictionSet, id: &str, golds: &[String]) -> Result<QuestionScore> {
    Ok(match predictions.get(id) {
        Some(p) => QuestionScore {
            id: id.to_string(),
            exact_match: exact_match(p, golds)?,
            f1: f1(p, golds)?,
            missing: false,
        },
        None => QuestionScore { id: id.to_string(), exact_match: 0.0, f1: 0.0, missing: true },
    })
}

fn report(scores: &[QuestionScore]) -> EvalReport {
    let n = scores.len().max(1) as f64;
    EvalReport {
        exact_match: 100.0 * scores.iter().map(|s| s.exact_match).sum::<f64>() / n,
        f1: 100.0 * scores.iter().map(|s| s.f1).sum::<f64>() / n,
        missing: scores.iter().filter(|s| s.missing).count(),
    }
}

/// Mean EM and F1 over the corpus questions, times 100. An empty corpus
/// scores zero.
pub fn evaluate(predictions: &PredictionSet, corpus: &Corpus) -> Result<EvalReport> {
    Ok(report(&score_questions(predictions, corpus)?))
}

/// [`evaluate`] over a list of examples.
pub fn evaluate_examples(predictions: &PredictionSet, examples: &[Example]) -> Result<EvalReport> {
    let scores = examples
        .iter()
        .map(|ex| score_one(predictions, &ex.id, &ex.golds))
        .collect::<Result<Vec<_>>>()?;
    Ok(report(&scores))
}
