use serde::{Deserialize, Serialize};

/// A token and its character offsets `[start, end)` in the source text.
/// Offsets count Unicode scalar values, as SQuAD's `answer_start` does.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Splits on whitespace; runs of alphanumeric characters form one token and
/// every other visible character stands alone.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut run: Option<(usize, String)> = None;
    for (i, c) in text.chars().enumerate() {
        if c.is_alphanumeric() {
            match &mut run {
                Some((_, s)) => s.push(c),
                None => run = Some((i, c.to_string())),
            }
            continue;
        }
        if let Some((start, s)) = run.take() {
            out.push(Token { end: start + s.chars().count(), text: s, start });
        }
        if !c.is_whitespace() {
            out.push(Token { text: c.to_string(), start: i, end: i + 1 });
        }
    }
    if let Some((start, s)) = run {
        out.push(Token { end: start + s.chars().count(), text: s, start });
    }
    out
}

/// The characters `[start, end)` of `text`.
pub fn char_slice(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end.saturating_sub(start)).collect()
}

/// Rebuilds text from tokens and the whitespace gap before each one.
/// `gaps[i]` precedes `tokens[i]`; `trailing` follows the last token.
pub fn detokenize(tokens: &[&str], gaps: &[&str], trailing: &str) -> String {
    let mut s = String::new();
    for (t, g) in tokens.iter().zip(gaps) {
        s.push_str(g);
        s.push_str(t);
    }
    s.push_str(trailing);
    s
}

/// The gap before each token and the text after the last one.
pub fn gaps(text: &str, tokens: &[Token]) -> (Vec<String>, String) {
    let chars: Vec<char> = text.chars().collect();
    let mut prev = 0;
    let mut out = Vec::with_capacity(tokens.len());
    for t in tokens {
        out.push(chars[prev..t.start].iter().collect());
        prev = t.end;
    }
    (out, chars[prev..].iter().collect())
}
