use crate::error::{Error, Result};

/// Levenshtein distance with unit substitution, deletion and insertion
/// costs, by full dynamic programming.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let m = hypothesis.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0; m + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Word error rate: edit distance over the reference length.
pub fn measure_wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("word error rate needs a non-empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus WER: total edits over total reference tokens.
pub fn corpus_wer<T: PartialEq, R: AsRef<[T]>, H: AsRef<[T]>>(pairs: &[(R, H)]) -> Result<f64> {
    let (mut edits, mut words) = (0, 0);
    for (r, h) in pairs {
        edits += edit_distance(r.as_ref(), h.as_ref());
        words += r.as_ref().len();
    }
    if words == 0 {
        return Err(Error::Empty("word error rate needs a non-empty reference".into()));
    }
    Ok(edits as f64 / words as f64)
}
