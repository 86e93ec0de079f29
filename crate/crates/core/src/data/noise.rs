use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::squad::{AlignedAnswer, Corpus, Document, LoadStats, Provenance};
use super::tokenize::{char_slice, gaps, tokenize};
use super::wer::edit_distance;
use crate::error::{Error, Result};
use crate::model::Domain;

/// How a substituted word is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfusionPolicy {
    /// Any other corpus word, uniformly.
    Uniform,
    /// Another corpus word drawn by unigram frequency.
    Frequency,
    /// A corpus word within character edit distance 2, weighted by
    /// `1 / distance`; falls back to [`ConfusionPolicy::Frequency`] when
    /// the word has no such neighbour.
    #[default]
    EditDistance,
}

/// Synthetic ASR channel over document tokens. Questions are left as
/// typed text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseChannelConfig {
    pub p_sub: f64,
    pub p_del: f64,
    pub p_ins: f64,
    pub target_wer: f64,
    /// Treat the three probabilities as the error mix only and scale them
    /// by a common factor until the corpus WER matches `target_wer`.
    /// Otherwise they are used as given and `target_wer` is ignored.
    pub calibrate: bool,
    pub policy: ConfusionPolicy,
    /// Keep answer tokens intact; otherwise questions whose answer was
    /// damaged are dropped.
    pub protect_answer_span: bool,
    pub seed: u64,
}

impl Default for NoiseChannelConfig {
    fn default() -> Self {
        // substitution : deletion : insertion = 2 : 1 : 1
        NoiseChannelConfig {
            p_sub: 0.1,
            p_del: 0.05,
            p_ins: 0.05,
            target_wer: 0.227,
            calibrate: true,
            policy: ConfusionPolicy::default(),
            protect_answer_span: true,
            seed: 0,
        }
    }
}

impl NoiseChannelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_sub", self.p_sub), ("p_del", self.p_del), ("p_ins", self.p_ins)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.p_sub + self.p_del > 1.0 {
            return Err(Error::Config("p_sub + p_del must not exceed 1".into()));
        }
        if let Some(t) = self.calibration_target() {
            if !(t >= 0.0) {
                return Err(Error::Config(format!("target_wer must be ≥ 0, got {t}")));
            }
            if t >= 1.0 {
                return Err(Error::Calibration(format!("target_wer {t} is not below 1")));
            }
        }
        Ok(())
    }

    /// The WER to calibrate to, if calibration is on.
    pub fn calibration_target(&self) -> Option<f64> {
        self.calibrate.then_some(self.target_wer)
    }
}

/// Sidecar record of one corruption run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseManifest {
    pub seed: u64,
    pub target_wer: Option<f64>,
    pub measured_wer: f64,
    /// Factor applied to the configured probabilities.
    pub scale: f64,
    /// Effective per-token probabilities after scaling.
    pub p_sub: f64,
    pub p_del: f64,
    pub p_ins: f64,
    /// Configured error mix, `sub:del:ins`.
    pub mix: String,
    pub policy: ConfusionPolicy,
    pub protect_answer_span: bool,
    pub documents: usize,
    pub reference_tokens: usize,
    pub hypothesis_tokens: usize,
    /// Questions lost because their answer did not survive.
    pub dropped_questions: usize,
    /// Questions the input loader had already skipped.
    pub input_stats: LoadStats,
}

/// Largest scale keeping every effective probability ≤ 1.
fn max_scale(cfg: &NoiseChannelConfig) -> f64 {
    let mut m = f64::INFINITY;
    if cfg.p_sub + cfg.p_del > 0.0 {
        m = m.min(1.0 / (cfg.p_sub + cfg.p_del));
    }
    if cfg.p_ins > 0.0 {
        m = m.min(1.0 / cfg.p_ins);
    }
    m
}

/// Corpus word types with unigram counts, in a fixed order.
struct Lexicon {
    words: Vec<String>,
    chars: Vec<Vec<char>>,
    cumulative: Vec<f64>,
    index: HashMap<String, usize>,
    neighbours: HashMap<usize, Vec<(usize, f64)>>,
}

impl Lexicon {
    fn new(corpus: &Corpus) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for d in &corpus.documents {
            for t in &d.tokens {
                *counts.entry(t.text.as_str()).or_default() += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut total = 0.0;
        let cumulative = entries
            .iter()
            .map(|&(_, c)| {
                total += c as f64;
                total
            })
            .collect();
        let words: Vec<String> = entries.iter().map(|(w, _)| w.to_string()).collect();
        Lexicon {
            chars: words.iter().map(|w| w.chars().collect()).collect(),
            index: words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect(),
            words,
            cumulative,
            neighbours: HashMap::new(),
        }
    }

    fn by_frequency(&self, rng: &mut ChaCha8Rng) -> usize {
        let total = *self.cumulative.last().expect("non-empty lexicon");
        let u = rng.gen::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= u).min(self.words.len() - 1)
    }

    fn substitute(&mut self, word: usize, policy: ConfusionPolicy, rng: &mut ChaCha8Rng) -> Option<usize> {
        let n = self.words.len();
        if n < 2 {
            return None;
        }
        match policy {
            ConfusionPolicy::Uniform => {
                let k = rng.gen_range(0..n - 1);
                Some(if k >= word { k + 1 } else { k })
            }
            ConfusionPolicy::Frequency => loop {
                let k = self.by_frequency(rng);
                if k != word {
                    return Some(k);
                }
            },
            ConfusionPolicy::EditDistance => {
                let cands = self.neighbours_of(word);
                if cands.is_empty() {
                    return self.substitute(word, ConfusionPolicy::Frequency, rng);
                }
                let total = cands.last().expect("non-empty").1;
                let u = rng.gen::<f64>() * total;
                let k = cands.partition_point(|&(_, c)| c <= u).min(cands.len() - 1);
                Some(cands[k].0)
            }
        }
    }

    /// Words at edit distance 1 or 2 with cumulative `1/d` weights.
    fn neighbours_of(&mut self, word: usize) -> &[(usize, f64)] {
        if !self.neighbours.contains_key(&word) {
            let w = &self.chars[word];
            let mut total = 0.0;
            let mut out = Vec::new();
            for (i, c) in self.chars.iter().enumerate() {
                if i == word || c.len().abs_diff(w.len()) > 2 {
                    continue;
                }
                let d = edit_distance(w, c);
                if d <= 2 {
                    total += 1.0 / d as f64;
                    out.push((i, total));
                }
            }
            self.neighbours.insert(word, out);
        }
        &self.neighbours[&word]
    }
}

/// Per-token random draws, fixed before the scale is chosen so that
/// corruption is monotone in the scale.
struct Draws {
    op: Vec<f64>,
    sub: Vec<Option<usize>>,
    ins: Vec<f64>,
    ins_word: Vec<usize>,
}

#[derive(Clone, Copy, PartialEq)]
enum Origin {
    Kept(usize),
    Substituted(usize),
    Inserted,
}

struct Planned {
    tokens: Vec<(String, Origin)>,
    /// New index of each original token, if it survived unchanged.
    kept_at: Vec<Option<usize>>,
}

struct DocPlan<'a> {
    doc: &'a Document,
    draws: Draws,
    /// Token is inside some answer span.
    in_answer: Vec<bool>,
    /// An insertion after this token would split an answer.
    inner_gap: Vec<bool>,
}

impl DocPlan<'_> {
    fn apply(&self, lex: &Lexicon, cfg: &NoiseChannelConfig, scale: f64) -> Planned {
        let (ps, pd, pi) = (cfg.p_sub * scale, cfg.p_del * scale, cfg.p_ins * scale);
        let protect = cfg.protect_answer_span;
        let mut tokens = Vec::with_capacity(self.doc.tokens.len());
        let mut kept_at = vec![None; self.doc.tokens.len()];
        for (i, t) in self.doc.tokens.iter().enumerate() {
            let locked = protect && self.in_answer[i];
            let u = self.draws.op[i];
            match self.draws.sub[i] {
                Some(w) if !locked && u < ps => tokens.push((lex.words[w].clone(), Origin::Substituted(i))),
                _ if !locked && u >= ps && u < ps + pd => {}
                _ => {
                    kept_at[i] = Some(tokens.len());
                    tokens.push((t.text.clone(), Origin::Kept(i)));
                }
            }
            if !(protect && self.inner_gap[i]) && self.draws.ins[i] < pi {
                tokens.push((lex.words[self.draws.ins_word[i]].clone(), Origin::Inserted));
            }
        }
        Planned { tokens, kept_at }
    }
}

fn plan_document<'a>(
    doc: &'a Document,
    index: usize,
    lex: &mut Lexicon,
    cfg: &NoiseChannelConfig,
) -> DocPlan<'a> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let n = doc.tokens.len();
    let mut draws = Draws {
        op: Vec::with_capacity(n),
        sub: Vec::with_capacity(n),
        ins: Vec::with_capacity(n),
        ins_word: Vec::with_capacity(n),
    };
    for t in &doc.tokens {
        draws.op.push(rng.gen());
        draws.ins.push(rng.gen());
        let w = lex.index[&t.text];
        draws.sub.push(lex.substitute(w, cfg.policy, &mut rng));
        draws.ins_word.push(lex.by_frequency(&mut rng));
    }
    let mut in_answer = vec![false; n];
    let mut inner_gap = vec![false; n];
    for q in &doc.questions {
        for a in &q.answers {
            let (s, e) = a.span;
            for i in s..=e {
                in_answer[i] = true;
                if i < e {
                    inner_gap[i] = true;
                }
            }
        }
    }
    DocPlan { doc, draws, in_answer, inner_gap }
}

fn corpus_edits(plans: &[DocPlan], lex: &Lexicon, cfg: &NoiseChannelConfig, scale: f64) -> (usize, usize) {
    let mut edits = 0;
    let mut words = 0;
    for p in plans {
        let out = p.apply(lex, cfg, scale);
        let r: Vec<&str> = p.doc.token_texts();
        let h: Vec<&str> = out.tokens.iter().map(|(t, _)| t.as_str()).collect();
        edits += edit_distance(&r, &h);
        words += r.len();
    }
    (edits, words)
}

/// Scale whose corpus WER is closest to `target`, by bisection.
fn calibrate(plans: &[DocPlan], lex: &Lexicon, cfg: &NoiseChannelConfig, target: f64) -> Result<f64> {
    const TOLERANCE: f64 = 0.01;
    if target == 0.0 {
        return Ok(0.0);
    }
    let wer = |scale: f64| {
        let (e, w) = corpus_edits(plans, lex, cfg, scale);
        e as f64 / w as f64
    };
    let hi_scale = max_scale(cfg);
    if !hi_scale.is_finite() {
        return Err(Error::Calibration("all error probabilities are zero; nothing to scale".into()));
    }
    let (mut lo, mut hi) = (0.0, hi_scale);
    let top = wer(hi);
    if top < target - TOLERANCE {
        return Err(Error::Calibration(format!(
            "target WER {target} unreachable: at most {top:.4} with the current protection and mix"
        )));
    }
    let mut best = (top - target).abs();
    let mut best_scale = hi;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let w = wer(mid);
        if (w - target).abs() < best {
            best = (w - target).abs();
            best_scale = mid;
        }
        if best <= TOLERANCE / 10.0 {
            break;
        }
        if w < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if best > TOLERANCE {
        return Err(Error::Calibration(format!(
            "closest reachable WER misses target {target} by {best:.4}"
        )));
    }
    Ok(best_scale)
}

/// Builds the corrupted text, keeping each surviving token's original
/// leading whitespace and using one space around inserted words.
fn render(doc: &Document, planned: &Planned) -> String {
    let (gaps, trailing) = gaps(&doc.context, &doc.tokens);
    let mut s = String::new();
    let mut prev_alnum = false;
    for (text, origin) in &planned.tokens {
        let gap = match origin {
            Origin::Kept(i) | Origin::Substituted(i) => gaps[*i].as_str(),
            Origin::Inserted => " ",
        };
        let first_alnum = text.chars().next().is_some_and(char::is_alphanumeric);
        // adjacent alphanumeric tokens would merge
        if gap.is_empty() && prev_alnum && first_alnum {
            s.push(' ');
        } else {
            s.push_str(gap);
        }
        s.push_str(text);
        prev_alnum = text.chars().last().is_some_and(char::is_alphanumeric);
    }
    s.push_str(&trailing);
    s
}

/// Corrupts every document of `corpus`; see [`NoiseChannelConfig`].
/// Document `i` draws from stream `i` of a generator seeded by
/// `cfg.seed`, so the result depends only on `(corpus, cfg)`.
pub fn corrupt_asr(corpus: &Corpus, cfg: &NoiseChannelConfig) -> Result<(Corpus, NoiseManifest)> {
    cfg.validate()?;
    let mut lex = Lexicon::new(corpus);
    let plans: Vec<DocPlan> =
        corpus.documents.iter().enumerate().map(|(i, d)| plan_document(d, i, &mut lex, cfg)).collect();
    let reference_tokens = corpus.num_document_tokens();
    let scale = match cfg.calibration_target() {
        Some(t) if reference_tokens == 0 && t > 0.0 => {
            return Err(Error::Calibration("cannot calibrate on a corpus without document tokens".into()))
        }
        Some(t) => calibrate(&plans, &lex, cfg, t)?,
        None => 1.0,
    };

    let mut documents = Vec::with_capacity(plans.len());
    let mut dropped = 0;
    let (mut edits, mut hyp_tokens) = (0, 0);
    for p in &plans {
        let planned = p.apply(&lex, cfg, scale);
        let context = render(p.doc, &planned);
        let tokens = tokenize(&context);
        debug_assert_eq!(tokens.len(), planned.tokens.len());
        edits += edit_distance(
            &p.doc.token_texts(),
            &tokens.iter().map(|t| t.text.as_str()).collect::<Vec<_>>(),
        );
        hyp_tokens += tokens.len();
        let mut questions = Vec::new();
        for q in &p.doc.questions {
            let answers: Vec<AlignedAnswer> = q
                .answers
                .iter()
                .filter_map(|a| {
                    let (s, e) = a.span;
                    let (ns, ne) = (planned.kept_at[s]?, planned.kept_at[e]?);
                    let same = ne - ns == e - s
                        && (s..=e).all(|i| tokens[ns + i - s].text == p.doc.tokens[i].text);
                    same.then(|| AlignedAnswer {
                        text: char_slice(&context, tokens[ns].start, tokens[ne].end),
                        start_char: tokens[ns].start,
                        span: (ns, ne),
                    })
                })
                .collect();
            if answers.is_empty() {
                dropped += 1;
                continue;
            }
            questions.push(super::squad::Question { answers, ..q.clone() });
        }
        documents.push(Document {
            title: p.doc.title.clone(),
            article: p.doc.article,
            context,
            tokens,
            questions,
        });
    }
    let measured_wer = if reference_tokens == 0 { 0.0 } else { edits as f64 / reference_tokens as f64 };
    let manifest = NoiseManifest {
        seed: cfg.seed,
        target_wer: cfg.calibration_target(),
        measured_wer,
        scale,
        p_sub: cfg.p_sub * scale,
        p_del: cfg.p_del * scale,
        p_ins: cfg.p_ins * scale,
        mix: format!("{}:{}:{}", cfg.p_sub, cfg.p_del, cfg.p_ins),
        policy: cfg.policy,
        protect_answer_span: cfg.protect_answer_span,
        documents: documents.len(),
        reference_tokens,
        hypothesis_tokens: hyp_tokens,
        dropped_questions: dropped,
        input_stats: corpus.stats,
    };
    let out = Corpus {
        documents,
        domain: Domain::Target,
        provenance: Provenance::Corrupted { seed: cfg.seed, target_wer: cfg.calibration_target(), measured_wer },
        stats: corpus.stats,
    };
    Ok((out, manifest))
}
