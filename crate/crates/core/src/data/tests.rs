use proptest::prelude::*;

use super::*;
use crate::error::Error;
use crate::model::Domain;

fn squad_json(context: &str, answer: &str, start: usize) -> String {
    serde_json::json!({
        "version": "1.1",
        "data": [{
            "title": "t",
            "paragraphs": [{
                "context": context,
                "qas": [{"id": "q1", "question": "What?", "answers": [{"text": answer, "answer_start": start}]}]
            }]
        }]
    })
    .to_string()
}

/// Plain recursive Levenshtein with memoisation, independent of the DP
/// in the crate.
fn levenshtein_oracle(a: &[&str], b: &[&str]) -> usize {
    fn go(a: &[&str], b: &[&str], memo: &mut std::collections::HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        if let Some(&v) = memo.get(&(a.len(), b.len())) {
            return v;
        }
        let v = if a[0] == b[0] {
            go(&a[1..], &b[1..], memo)
        } else {
            1 + go(&a[1..], b, memo).min(go(a, &b[1..], memo)).min(go(&a[1..], &b[1..], memo))
        };
        memo.insert((a.len(), b.len()), v);
        v
    }
    go(a, b, &mut Default::default())
}

fn toy_corpus(documents: usize, seed: u64) -> Corpus {
    SyntheticConfig { documents, seed, ..SyntheticConfig::default() }.generate().unwrap()
}

fn texts(tokens: &[Token]) -> Vec<&str> {
    tokens.iter().map(|t| t.text.as_str()).collect()
}

#[test]
fn tokenize_splits_words_and_punctuation() {
    let toks = tokenize("The cat sat.");
    assert_eq!(texts(&toks), ["The", "cat", "sat", "."]);
    let offs: Vec<(usize, usize)> = toks.iter().map(|t| (t.start, t.end)).collect();
    assert_eq!(offs, [(0, 3), (4, 7), (8, 11), (11, 12)]);
    assert!(tokenize("").is_empty());
    assert!(tokenize("  \n\t").is_empty());
}

#[test]
fn tokenize_counts_characters_not_bytes() {
    let toks = tokenize("café au lait");
    assert_eq!((toks[1].start, toks[1].end), (5, 7));
}

proptest! {
    #[test]
    fn token_offsets_slice_the_source(text in "[a-zA-Zé0-9 .,'!?\\-\n]{0,60}") {
        let toks = tokenize(&text);
        for t in &toks {
            prop_assert_eq!(char_slice(&text, t.start, t.end), t.text.clone());
        }
        let (g, trailing) = gaps(&text, &toks);
        prop_assert_eq!(detokenize(&texts(&toks), &g.iter().map(String::as_str).collect::<Vec<_>>(), &trailing), text);
    }

    #[test]
    fn edit_distance_matches_oracle_and_is_symmetric(
        a in prop::collection::vec(prop::sample::select(vec!["a", "b", "c"]), 0..8),
        b in prop::collection::vec(prop::sample::select(vec!["a", "b", "c"]), 0..8),
    ) {
        let d = edit_distance(&a, &b);
        prop_assert_eq!(d, levenshtein_oracle(&a, &b));
        prop_assert_eq!(d, edit_distance(&b, &a));
        if !a.is_empty() {
            prop_assert_eq!(measure_wer(&a, &b).unwrap() * a.len() as f64, d as f64);
        }
    }
}

#[test]
fn wer_examples() {
    let r = ["the", "cat", "sat"];
    assert_eq!(measure_wer(&r, &r).unwrap(), 0.0);
    assert!((measure_wer(&r, &["the", "bat", "sat"]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    let empty: [&str; 0] = [];
    assert_eq!(measure_wer(&["a", "b"], &empty).unwrap(), 1.0);
    assert!(matches!(measure_wer(&empty, &["a"]), Err(Error::Empty(_))));
}

#[test]
fn load_aligns_answer_to_tokens() {
    // tokens: Paris(0) is(1) in(2) northern(3) France(4) .(5)
    let c = load_squad(&squad_json("Paris is in northern France.", "northern France", 12), Domain::Source).unwrap();
    let ex = c.examples();
    assert_eq!(ex.len(), 1);
    assert_eq!(ex[0].span, (3, 4));
    assert_eq!(ex[0].span_text(ex[0].span), "northern France");
    assert_eq!(c.stats, LoadStats::default());
}

#[test]
fn load_empty_data_is_empty_corpus() {
    let c = load_squad(r#"{"data": []}"#, Domain::Source).unwrap();
    assert!(c.documents.is_empty());
    assert_eq!(c.num_questions(), 0);
}

#[test]
fn answer_inside_a_token_is_dropped() {
    let c = load_squad(&squad_json("Two cats sat.", "cat", 4), Domain::Source).unwrap();
    assert_eq!(c.num_questions(), 0);
    assert_eq!(c.stats.misaligned, 1);
}

#[test]
fn question_without_answers_is_counted() {
    let json = r#"{"data":[{"title":"t","paragraphs":[{"context":"a b","qas":[{"id":"x","question":"q","answers":[]}]}]}]}"#;
    let c = load_squad(json, Domain::Source).unwrap();
    assert_eq!(c.stats.missing_answers, 1);
}

#[test]
fn malformed_input_names_the_path() {
    let json = r#"{"data":[{"title":"t","paragraphs":[{"context":"a b","qas":[{"id":"x","question":"q","answers":[{"text":"a","answer_start":"zero"}]}]}]}]}"#;
    match load_squad(json, Domain::Source) {
        Err(Error::Parse { path, .. }) => assert_eq!(path, "data[0].paragraphs[0].qas[0].answers[0].answer_start"),
        other => panic!("expected a parse error, got {other:?}"),
    }
    assert!(matches!(load_squad("{", Domain::Source), Err(Error::Parse { .. })));
}

#[test]
fn squad_layout_round_trips() {
    let c = toy_corpus(5, 3);
    let back = Corpus::from_squad(&c.to_squad(), Domain::Source);
    assert_eq!(back, c);
}

#[test]
fn vocabulary_threshold_and_order() {
    let c = load_squad(&squad_json("a a b", "b", 4), Domain::Source).unwrap();
    let v = Vocabulary::build(&[&c], 2).unwrap();
    assert!(v.contains("a"));
    assert!(!v.contains("b"));
    assert_eq!(v.word_id("b"), OOV);
    assert_eq!(v.word(PAD), Some("<pad>"));

    let c = toy_corpus(20, 1);
    let v1 = Vocabulary::build(&[&c], 1).unwrap();
    let v2 = Vocabulary::build(&[&c], 1).unwrap();
    assert_eq!(v1, v2);
    // most frequent first
    assert_eq!(v1.word_id("is"), 2);
    assert!(matches!(Vocabulary::build(&[&c], 0), Err(Error::Config(_))));
}

#[test]
fn vocabulary_serde_round_trip() {
    let v = Vocabulary::build(&[&toy_corpus(5, 0)], 1).unwrap();
    let back: Vocabulary = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
    assert_eq!(back, v);
}

#[test]
fn joint_vocabulary_sees_corruption_words() {
    let clean = load_squad(&squad_json("the cat sat on the mat .", "mat", 15), Domain::Source).unwrap();
    let mut noisy = clean.clone();
    noisy.documents[0].tokens = tokenize("the bat sat on the bat mat .");
    let v = Vocabulary::build(&[&clean, &noisy], 2).unwrap();
    assert!(v.contains("bat"));
    assert!(!Vocabulary::build(&[&clean], 2).unwrap().contains("bat"));
}

#[test]
fn batch_pads_with_masks() {
    let c = load_squad(&squad_json("a b c", "a", 0), Domain::Source).unwrap();
    let mut exs = c.examples();
    let mut long = exs[0].clone();
    long.document = tokenize("a b c d e");
    exs.push(long);
    let v = Vocabulary::build(&[&c], 1).unwrap();
    let b = batch(&exs, &v, DEFAULT_BATCH_SIZE, Some(5), None).unwrap();
    assert_eq!(b.batches.len(), 1);
    assert_eq!(b.batches[0].document_masks(), vec![vec![true, true, true, false, false], vec![true; 5]]);
    assert_eq!(b.batches[0].document_ids()[0][3..], [PAD, PAD]);
    assert_eq!(DEFAULT_BATCH_SIZE, 20);
}

#[test]
fn batch_truncation_drops_unreachable_gold() {
    let c = load_squad(&squad_json("a b c d e f g h", "g", 12), Domain::Source).unwrap();
    let exs = c.examples();
    assert_eq!(exs[0].span, (6, 6));
    let v = Vocabulary::build(&[&c], 1).unwrap();
    let b = batch(&exs, &v, 4, Some(4), None).unwrap();
    assert_eq!(b.dropped, 1);
    assert!(b.batches.is_empty());
    assert!(matches!(batch(&exs, &v, 0, None, None), Err(Error::Config(_))));
}

#[test]
fn batch_chunks_in_order() {
    let c = toy_corpus(3, 0);
    let exs = c.examples();
    let v = Vocabulary::build(&[&c], 1).unwrap();
    let b = batch(&exs, &v, 5, None, None).unwrap();
    assert_eq!(b.batches.iter().map(Batch::len).collect::<Vec<_>>(), [5, 5, 2]);
    assert_eq!(b.batches[1].ids[0], exs[5].id);
}

#[test]
fn zero_target_wer_is_identity() {
    let c = toy_corpus(30, 2);
    let cfg = NoiseChannelConfig { target_wer: 0.0, ..Default::default() };
    let (out, m) = corrupt_asr(&c, &cfg).unwrap();
    assert_eq!(out.documents, c.documents);
    assert_eq!(m.measured_wer, 0.0);
    assert_eq!(out.domain, Domain::Target);
}

#[test]
fn corruption_is_deterministic() {
    let c = toy_corpus(40, 2);
    let cfg = NoiseChannelConfig { seed: 9, ..Default::default() };
    let (a, ma) = corrupt_asr(&c, &cfg).unwrap();
    let (b, mb) = corrupt_asr(&c, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    let (d, _) = corrupt_asr(&c, &NoiseChannelConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.documents, d.documents);
}

#[test]
fn calibration_hits_target_on_10k_tokens() {
    let c = toy_corpus(500, 4);
    assert!(c.num_document_tokens() >= 10_000);
    for policy in [ConfusionPolicy::EditDistance, ConfusionPolicy::Frequency, ConfusionPolicy::Uniform] {
        let cfg = NoiseChannelConfig { policy, seed: 5, ..Default::default() };
        let (out, m) = corrupt_asr(&c, &cfg).unwrap();
        let (mut edits, mut words) = (0, 0);
        for (r, h) in c.documents.iter().zip(&out.documents) {
            edits += levenshtein_oracle(&r.token_texts(), &h.token_texts());
            words += r.tokens.len();
        }
        let wer = edits as f64 / words as f64;
        assert!((wer - m.measured_wer).abs() < 1e-12);
        assert!((0.217..=0.237).contains(&wer), "{policy:?}: {wer}");
        assert_eq!(m.dropped_questions, 0);
    }
}

#[test]
fn protected_answers_survive_at_reindexed_positions() {
    let c = toy_corpus(60, 7);
    let (out, _) = corrupt_asr(&c, &NoiseChannelConfig { target_wer: 0.4, ..Default::default() }).unwrap();
    assert_eq!(out.num_questions(), c.num_questions());
    for (before, after) in c.documents.iter().zip(&out.documents) {
        assert_eq!(texts(&tokenize(&after.context)), after.token_texts());
        for (qb, qa) in before.questions.iter().zip(&after.questions) {
            let (s, e) = qb.answers[0].span;
            let (ns, ne) = qa.answers[0].span;
            assert_eq!(texts(&after.tokens[ns..=ne]), texts(&before.tokens[s..=e]));
            assert_eq!(qa.answers[0].text, qb.answers[0].text);
            assert_eq!(char_slice(&after.context, qa.answers[0].start_char, qa.answers[0].start_char + qa.answers[0].text.chars().count()), qa.answers[0].text);
        }
    }
}

#[test]
fn unprotected_mode_drops_damaged_answers() {
    let c = toy_corpus(60, 7);
    let cfg = NoiseChannelConfig { target_wer: 0.4, protect_answer_span: false, ..Default::default() };
    let (out, m) = corrupt_asr(&c, &cfg).unwrap();
    assert!(m.dropped_questions > 0);
    assert_eq!(out.num_questions() + m.dropped_questions, c.num_questions());
    for d in &out.documents {
        for q in &d.questions {
            let (s, e) = q.answers[0].span;
            assert_eq!(char_slice(&d.context, d.tokens[s].start, d.tokens[e].end), q.answers[0].text);
        }
    }
}

#[test]
fn calibration_errors() {
    let c = toy_corpus(10, 0);
    let err = corrupt_asr(&c, &NoiseChannelConfig { target_wer: 1.0, ..Default::default() });
    assert!(matches!(err, Err(Error::Calibration(_))));
    // every document token is an answer token and insertions are off
    let only_answers = load_squad(&squad_json("north", "north", 0), Domain::Source).unwrap();
    let cfg = NoiseChannelConfig { p_ins: 0.0, target_wer: 0.2, ..Default::default() };
    assert!(matches!(corrupt_asr(&only_answers, &cfg), Err(Error::Calibration(_))));
    let bad = NoiseChannelConfig { p_sub: 0.7, p_del: 0.5, ..Default::default() };
    assert!(matches!(corrupt_asr(&c, &bad), Err(Error::Config(_))));
}

#[test]
fn uncalibrated_channel_uses_raw_probabilities() {
    let c = toy_corpus(100, 1);
    let cfg = NoiseChannelConfig { p_sub: 0.2, p_del: 0.0, p_ins: 0.0, calibrate: false, ..Default::default() };
    let (out, m) = corrupt_asr(&c, &cfg).unwrap();
    assert_eq!(m.scale, 1.0);
    // pure substitutions keep the length
    for (a, b) in c.documents.iter().zip(&out.documents) {
        assert_eq!(a.tokens.len(), b.tokens.len());
    }
    assert!(m.measured_wer > 0.05 && m.measured_wer < 0.2);
}

#[test]
fn edit_distance_policy_picks_close_words() {
    let c = toy_corpus(100, 1);
    let cfg = NoiseChannelConfig { p_sub: 0.3, p_del: 0.0, p_ins: 0.0, calibrate: false, ..Default::default() };
    let (out, _) = corrupt_asr(&c, &cfg).unwrap();
    let lexicon: std::collections::BTreeSet<Vec<char>> =
        c.documents.iter().flat_map(|d| d.tokens.iter().map(|t| t.text.chars().collect())).collect();
    let mut checked = 0;
    for (a, b) in c.documents.iter().zip(&out.documents) {
        for (x, y) in a.tokens.iter().zip(&b.tokens) {
            let xc: Vec<char> = x.text.chars().collect();
            let has_neighbour = lexicon.iter().any(|w| *w != xc && edit_distance(w, &xc) <= 2);
            if x.text != y.text && has_neighbour {
                checked += 1;
                let yc: Vec<char> = y.text.chars().collect();
                assert!(edit_distance(&xc, &yc) <= 2, "{} -> {}", x.text, y.text);
            }
        }
    }
    assert!(checked > 100);
}

#[test]
fn word_vector_import() {
    let c = load_squad(&squad_json("a b", "a", 0), Domain::Source).unwrap();
    let v = Vocabulary::build(&[&c], 1).unwrap();
    let wv = read_word_vectors("2 2\na 0.5 -1\nzzz 1 1\n", &v, 2).unwrap();
    assert_eq!(wv.rows, vec![(v.word_id("a"), vec![0.5, -1.0])]);
    assert_eq!(wv.unused, 1);
    assert!(matches!(read_word_vectors("a 1 2 3\n", &v, 2), Err(Error::Parse { .. })));
    assert!(matches!(read_word_vectors("a 1 x\n", &v, 2), Err(Error::Parse { .. })));

    let cfg = crate::model::ModelConfig {
        word_vocab_size: v.len(),
        char_vocab_size: v.char_len(),
        word_dim: 2,
        ..crate::model::ModelConfig::tiny()
    };
    let mut store = crate::autodiff::ParamStore::new();
    let m = crate::model::QaModel::new(&mut store, &cfg, 0, "m").unwrap();
    inject_word_vectors(&mut store, &m.embedding, &wv).unwrap();
    assert_eq!(store.value(m.embedding.word_table).row(v.word_id("a")), [0.5, -1.0]);
}

#[test]
fn synthetic_corpus_is_aligned_and_deterministic() {
    let cfg = SyntheticConfig::default();
    let c = cfg.generate().unwrap();
    assert!(c.num_questions() >= 2000);
    assert_eq!(c.stats, LoadStats::default());
    assert_eq!(c, cfg.generate().unwrap());
    for ex in c.examples().iter().take(50) {
        assert_eq!(ex.span.0, ex.span.1);
        assert_eq!(ex.span_text(ex.span), ex.golds[0]);
    }
    assert!(matches!(SyntheticConfig { questions_per_document: 9, ..cfg }.generate(), Err(Error::Config(_))));
}
