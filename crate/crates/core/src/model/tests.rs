use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{param_finite_difference_check, Coverage, Graph, ParamStore, Tensor, Var};
use crate::verify::fixtures::{qa_input, random, sequence};
use crate::Error;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

/// Scalar with generic O(1) gradients: `Σ x ⊙ R` for a fixed random `R`.
fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    let r = random(g.shape(x), seed);
    let p = g.mul_const(x, r).unwrap();
    g.sum(p)
}

fn default_vocab() -> ModelConfig {
    ModelConfig {
        word_vocab_size: 50,
        char_vocab_size: 30,
        ..ModelConfig::default()
    }
}

// ── embedding ───────────────────────────────────────────────────────

#[test]
fn embedding_shape_and_token_function() {
    let cfg = default_vocab();
    let mut store = ParamStore::new();
    let m = QaModel::new(&mut store, &cfg, 1, "m").unwrap();
    for len in [1, 4, 9] {
        let mut s = sequence(&cfg, len, len, 3);
        if len > 2 {
            s.words[2] = s.words[0];
            s.chars[2] = s.chars[0].clone();
        }
        let mut g = Graph::with_store(&store);
        let e = m.embed(&mut g, &s).unwrap();
        assert_eq!(g.shape(e), &[len, 96]);
        if len > 2 {
            assert_eq!(g.value(e).row(0), g.value(e).row(2));
        }
    }
}

#[test]
fn embedding_oov_row_and_bounds() {
    let cfg = ModelConfig::tiny();
    let mut store = ParamStore::new();
    let m = QaModel::new(&mut store, &cfg, 1, "m").unwrap();
    let mut s = sequence(&cfg, 3, 3, 4);
    s.words[1] = 1;
    let embed = |store: &ParamStore, s: &SequenceInput| {
        let mut g = Graph::with_store(store);
        let e = m.embed(&mut g, s).unwrap();
        g.value(e).clone()
    };
    let before = embed(&store, &s);
    // perturbing an unrelated word row leaves the OOV-token row unchanged
    let table = m.embedding.word_table;
    let unrelated = (2..cfg.word_vocab_size).find(|w| !s.words.contains(w)).unwrap();
    let d = cfg.word_dim;
    for k in 0..d {
        store.value_mut(table).data_mut()[unrelated * d + k] += 1.0;
    }
    let after = embed(&store, &s);
    assert_eq!(before, after);

    s.words[0] = cfg.word_vocab_size;
    let mut g = Graph::with_store(&store);
    assert!(matches!(m.embed(&mut g, &s), Err(Error::Index { .. })));
}

#[test]
fn injected_subword_vectors_replace_char_cnn() {
    let cfg = ModelConfig::tiny();
    let mut store = ParamStore::new();
    let m = QaModel::new(&mut store, &cfg, 1, "m").unwrap();
    let mut s = sequence(&cfg, 3, 3, 4);
    s.subword = Some(Tensor::zeros(&[3, cfg.char_dim]));
    let mut g = Graph::with_store(&store);
    let a = m.embed(&mut g, &s).unwrap();
    s.chars = vec![vec![2], vec![3], vec![4]];
    let b = m.embed(&mut g, &s).unwrap();
    assert_eq!(g.value(a), g.value(b));
    s.subword = Some(Tensor::zeros(&[2, cfg.char_dim]));
    assert!(matches!(m.embed(&mut g, &s), Err(Error::Shape { .. })));
}

// ── embedding encoder ───────────────────────────────────────────────

#[test]
fn embedding_encoder_preserves_shape_and_rejects_empty() {
    let cfg = ModelConfig::default();
    let mut store = ParamStore::new();
    let m = QaModel::new(&mut store, &cfg, 2, "m").unwrap();
    let mut g = Graph::with_store(&store);
    let x = g.constant(random(&[7, 96], 1));
    let y = m
        .embedding_encoder(&mut g, x, &SeqMask::all(7), &mut ForwardCtx::eval())
        .unwrap();
    assert_eq!(g.shape(y), &[7, 96]);
    let e = g.constant(Tensor::zeros(&[0, 96]));
    let r = m.embedding_encoder(&mut g, e, &SeqMask::all(0), &mut ForwardCtx::eval());
    assert!(matches!(r, Err(Error::Empty(_))));
}

fn slice_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn masked_rows_differ(a: &Tensor, b: &Tensor, valid: &[bool]) -> f64 {
    let mut worst: f64 = 0.0;
    for (r, &v) in valid.iter().enumerate() {
        if v {
            worst = worst.max(slice_diff(a.row(r), b.row(r)));
        }
    }
    worst
}

#[test]
fn padding_content_does_not_reach_valid_positions() {
    let cfg = ModelConfig::tiny();
    let mut store = ParamStore::new();
    let m = QaModel::new(&mut store, &cfg, 5, "m").unwrap();
    let valid: Vec<bool> = (0..6).map(|i| i < 4).collect();
    let mask = SeqMask::new(valid.clone());
    let x1 = random(&[6, 8], 1);
    let mut x2 = x1.clone();
    for v in &mut x2.data_mut()[4 * 8..] {
        *v = 100.0 * *v + 3.0;
    }
    let run = |x: &Tensor| {
        let mut g = Graph::with_store(&store);
        let xv = g.constant(x.clone());
        let e = m.embedding_encoder(&mut g, xv, &mask, &mut ForwardCtx::eval()).unwrap();
        let [m0, m1, m2] = m.model_encoder(&mut g, e, &mask, &mut ForwardCtx::eval()).unwrap();
        [e, m0, m1, m2].map(|v| g.value(v).clone())
    };
    let (a, b) = (run(&x1), run(&x2));
    for (p, q) in a.iter().zip(&b) {
        assert!(masked_rows_differ(p, q, &valid) <= 1e-9);
    }
}

#[test]
fn padding_tokens_do_not_change_predictions() {
    let cfg = ModelConfig::tiny();
    let mut store = ParamStore::new();
    let m = QaModel::new(&mut store, &cfg, 5, "m").unwrap();
    let mut input = qa_input(&cfg, 3, 5, 7);
    let base = m.predict(&store, &input).unwrap();
    for seq in [&mut input.question, &mut input.document] {
        seq.words.extend([3, 4]);
        seq.chars.extend([vec![1, 2], vec![5]]);
        seq.mask.extend([false, false]);
    }
    let padded = m.predict(&store, &input).unwrap();
    for i in 0..5 {
        assert!((base.p_start[i] - padded.p_start[i]).abs() <= 1e-9);
        assert!((base.p_end[i] - padded.p_end[i]).abs() <= 1e-9);
    }
    assert_eq!(&padded.p_start[5..], &[0.0, 0.0]);
    assert_eq!(&padded.p_end[5..], &[0.0, 0.0]);
}

// ── context-query attention ─────────────────────────────────────────

#[test]
fn attention_shapes_and_normalisation() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let att = ContextQueryAttention::new(&mut store, &mut rng, "att", 8);
    let mut g = Graph::with_store(&store);
    let c = g.constant(random(&[5, 8], 1));
    let q = g.constant(random(&[4, 8], 2));
    let qmask = SeqMask::new(vec![true, true, true, false]);
    let out = att.forward(&mut g, c, &SeqMask::all(5), q, &qmask).unwrap();
    assert_eq!(g.shape(out.similarity), &[5, 4]);
    assert_eq!(g.shape(out.fused), &[5, 8]);
    let r = g.value(out.row_attention);
    for i in 0..5 {
        let row = r.row(i);
        let s: f64 = row[..3].iter().sum();
        assert!((s - 1.0).abs() <= 1e-12);
        assert_eq!(row[3], 0.0);
    }
}

#[test]
fn single_token_question_attention_copies_it() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let att = ContextQueryAttention::new(&mut store, &mut rng, "att", 8);
    let mut g = Graph::with_store(&store);
    let c = g.constant(random(&[5, 8], 1));
    let qt = random(&[1, 8], 2);
    let q = g.constant(qt.clone());
    let out = att.forward(&mut g, c, &SeqMask::all(5), q, &SeqMask::all(1)).unwrap();
    let a = g.value(out.context_to_query);
    for i in 0..5 {
        assert!(slice_diff(a.row(i), qt.row(0)) <= 1e-15);
    }
}

#[test]
fn attention_rejects_masked_empty_question() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let att = ContextQueryAttention::new(&mut store, &mut rng, "att", 8);
    let mut g = Graph::with_store(&store);
    let c = g.constant(random(&[5, 8], 1));
    let q = g.constant(random(&[2, 8], 2));
    let r = att.forward(&mut g, c, &SeqMask::all(5), q, &SeqMask::new(vec![false, false]));
    assert!(matches!(r, Err(Error::Degenerate(_))));
}

// ── model encoder and output layer ──────────────────────────────────

#[test]
fn model_encoder_emits_three_distinct_outputs() {
    let cfg = ModelConfig::default();
    let mut store = ParamStore::new();
    let m = QaModel::new(&mut store, &cfg, 2, "m").unwrap();
    let mut g = Graph::with_store(&store);
    let x = g.constant(random(&[6, 96], 4));
    let out = m
        .model_encoder(&mut g, x, &SeqMask::all(6), &mut ForwardCtx::eval())
        .unwrap();
    for v in out {
        assert_eq!(g.shape(v), &[6, 96]);
    }
    let diff = g.value(out[1]).max_abs_diff(g.value(out[0]));
    assert!(diff > 0.0);
}

#[test]
fn output_distributions_are_masked_and_normalised() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let out = OutputLayer::new(&mut store, &mut rng, "out", 8);
    let mask = SeqMask::new(vec![true, true, false, true, false]);
    let ms: Vec<Tensor> = (0..3).map(|k| random(&[5, 8], k)).collect();
    let dist = |store: &ParamStore| {
        let mut g = Graph::with_store(store);
        let [a, b, c] = [0, 1, 2].map(|k| g.constant(ms[k].clone()));
        out.distributions(&mut g, a, b, c, &mask).unwrap()
    };
    let p = dist(&store);
    for d in [&p.p_start, &p.p_end] {
        assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert_eq!((d[2], d[4]), (0.0, 0.0));
        assert!(d.iter().all(|&x| x >= 0.0));
    }
    for id in out.params() {
        let shape = store.value(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let p = dist(&store);
    for d in [&p.p_start, &p.p_end] {
        assert_eq!(d, &vec![1.0 / 3.0, 1.0 / 3.0, 0.0, 1.0 / 3.0, 0.0]);
    }

    let mut g = Graph::with_store(&store);
    let [a, b, c] = [0, 1, 2].map(|k| g.constant(ms[k].clone()));
    let r = out.distributions(&mut g, a, b, c, &SeqMask::new(vec![false; 5]));
    assert!(matches!(r, Err(Error::Degenerate(_))));
}

// ── decoding and loss ───────────────────────────────────────────────

fn dist(p_start: &[f64], p_end: &[f64]) -> SpanDistributions {
    SpanDistributions {
        p_start: p_start.to_vec(),
        p_end: p_end.to_vec(),
    }
}

#[test]
fn predict_span_examples() {
    let one_hot = |i: usize| (0..6).map(|k| if k == i { 1.0 } else { 0.0 }).collect::<Vec<_>>();
    assert_eq!(predict_span(&dist(&one_hot(2), &one_hot(4)), 3), (2, 4));
    let u = [1.0 / 3.0; 3];
    assert_eq!(predict_span(&dist(&u, &u), 3), (0, 0));
    assert_eq!(predict_span(&dist(&[0.6, 0.4], &[0.1, 0.9]), 2), (0, 1));
}

/// Independent oracle: rank every valid pair by (score desc, i asc, j asc).
fn exhaustive_span(p: &SpanDistributions, max_len: usize) -> (usize, usize) {
    let n = p.p_start.len();
    let mut pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i..n).map(move |j| (i, j)))
        .filter(|&(i, j)| j - i < max_len)
        .collect();
    pairs.sort_by(|a, b| {
        let sa = p.p_start[a.0] * p.p_end[a.1];
        let sb = p.p_start[b.0] * p.p_end[b.1];
        sb.partial_cmp(&sa).unwrap().then(a.cmp(b))
    });
    pairs[0]
}

proptest! {
    #[test]
    fn predict_span_matches_exhaustive_search(
        raw in prop::collection::vec((0u8..5, 0u8..5), 1..12),
        max_len in 1usize..6,
    ) {
        // small integer weights make ties common
        let s: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
        let e: Vec<f64> = raw.iter().map(|r| r.1 as f64).collect();
        let p = dist(&s, &e);
        prop_assert_eq!(predict_span(&p, max_len), exhaustive_span(&p, max_len));
    }
}

#[test]
fn qa_loss_examples() {
    let hot = dist(&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]);
    assert_eq!(qa_loss(&hot, (1, 2)).unwrap(), 0.0);
    let u = dist(&[0.25; 4], &[0.25; 4]);
    assert!((qa_loss(&u, (0, 3)).unwrap() - 2.0 * 4f64.ln()).abs() <= 1e-12);
    let better = dist(&[0.4, 0.2, 0.2, 0.2], &[0.2, 0.2, 0.2, 0.4]);
    assert!(qa_loss(&better, (0, 3)).unwrap() < qa_loss(&u, (0, 3)).unwrap());
    let masked = dist(&[0.5, 0.0, 0.5], &[0.5, 0.0, 0.5]);
    assert!(matches!(qa_loss(&masked, (1, 2)), Err(Error::Data(_))));
    assert!(matches!(qa_loss(&u, (0, 4)), Err(Error::Index { .. })));
    let b = batch_qa_loss(&[(hot, (1, 2)), (u, (0, 3))]).unwrap();
    assert!((b - 4f64.ln()).abs() <= 1e-12);
}

#[test]
fn graph_loss_matches_distribution_loss() {
    let cfg = ModelConfig::tiny();
    let mut store = ParamStore::new();
    let m = QaModel::new(&mut store, &cfg, 9, "m").unwrap();
    let input = qa_input(&cfg, 3, 5, 2);
    let mut g = Graph::with_store(&store);
    let out = m.forward(&mut g, &input, &mut ForwardCtx::eval()).unwrap();
    let l = out.loss(&mut g, (1, 3)).unwrap();
    let p = out.distributions(&mut g).unwrap();
    let direct = qa_loss(&p, (1, 3)).unwrap();
    assert!((g.value(l).item().unwrap() - direct).abs() <= 1e-12);
}

// ── gradient checks ─────────────────────────────────────────────────

fn check_params(
    store: &mut ParamStore,
    ids: &[crate::autodiff::ParamId],
    f: impl Fn(&mut Graph) -> crate::Result<Var>,
) -> f64 {
    let cov = Coverage::Sample { per_param: 6, seed: 17 };
    let r = param_finite_difference_check(store, ids, EPS, cov, f).unwrap();
    assert!(r.checked > 0);
    r.max_rel_error
}

#[test]
fn encoder_block_gradients() {
    for seed in 0..3 {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        let m = QaModel::new(&mut store, &cfg, seed, "m").unwrap();
        let x = random(&[5, 8], seed + 10);
        let mask = SeqMask::new(vec![true, true, true, true, false]);
        let ids = m.layer_params(Layer::L1);
        let err = check_params(&mut store, &ids, |g| {
            let xv = g.constant(x.clone());
            let y = m.embedding_encoder(g, xv, &mask, &mut ForwardCtx::eval())?;
            Ok(project(g, y, 99))
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn attention_gradients() {
    for seed in 0..3 {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let att = ContextQueryAttention::new(&mut store, &mut rng, "att", 8);
        let c = random(&[5, 8], seed + 1);
        let q = random(&[3, 8], seed + 2);
        let ids = att.params();
        let err = check_params(&mut store, &ids, |g| {
            let (cv, qv) = (g.constant(c.clone()), g.constant(q.clone()));
            let out = att.forward(g, cv, &SeqMask::all(5), qv, &SeqMask::new(vec![true, true, false]))?;
            Ok(project(g, out.fused, 5))
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn model_encoder_gradients() {
    for seed in 0..3 {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        let m = QaModel::new(&mut store, &cfg, seed, "m").unwrap();
        let x = random(&[6, 8], seed + 20);
        let ids = m.layer_params(Layer::L3);
        let err = check_params(&mut store, &ids, |g| {
            let xv = g.constant(x.clone());
            let [a, b, c] = m.model_encoder(g, xv, &SeqMask::all(6), &mut ForwardCtx::eval())?;
            let s = g.concat_cols(&[a, b, c])?;
            Ok(project(g, s, 6))
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn output_layer_gradients() {
    for seed in 0..3 {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = OutputLayer::new(&mut store, &mut rng, "out", 8);
        let ms: Vec<Tensor> = (0..3).map(|k| random(&[5, 8], seed * 3 + k)).collect();
        let mask = SeqMask::new(vec![true, true, true, false, true]);
        let ids = out.params();
        let err = check_params(&mut store, &ids, |g| {
            let [a, b, c] = [0, 1, 2].map(|k| g.constant(ms[k].clone()));
            let (s, e) = out.logits(g, a, b, c)?;
            let ls = g.cross_entropy(s, 1, Some(mask.valid()))?;
            let le = g.cross_entropy(e, 4, Some(mask.valid()))?;
            g.add(ls, le)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn end_to_end_gradients() {
    for seed in 0..3 {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        let m = QaModel::new(&mut store, &cfg, seed, "m").unwrap();
        let input = qa_input(&cfg, 3, 5, seed + 40);
        let ids = m.params();
        let err = check_params(&mut store, &ids, |g| {
            let out = m.forward(g, &input, &mut ForwardCtx::eval())?;
            out.loss(g, (1, 3))
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

// ── checkpoints ─────────────────────────────────────────────────────

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let cfg = ModelConfig::tiny();
    let mut store = ParamStore::new();
    QaModel::new(&mut store, &cfg, 1, "m").unwrap();
    let text = Checkpoint::capture(&store, &cfg).unwrap().to_json().unwrap();

    let mut other = ParamStore::new();
    QaModel::new(&mut other, &cfg, 2, "m").unwrap();
    Checkpoint::from_json(&text).unwrap().restore(&mut other).unwrap();
    let again = Checkpoint::capture(&other, &cfg).unwrap().to_json().unwrap();
    assert_eq!(text, again);
}

#[test]
fn checkpoint_shape_mismatch_names_first_path() {
    let cfg = ModelConfig::tiny();
    let mut store = ParamStore::new();
    QaModel::new(&mut store, &cfg, 1, "m").unwrap();
    let ck = Checkpoint::capture(&store, &cfg).unwrap();

    let wider = ModelConfig { word_dim: 7, ..cfg.clone() };
    let mut other = ParamStore::new();
    QaModel::new(&mut other, &wider, 1, "m").unwrap();
    let before = Checkpoint::capture(&other, &wider).unwrap();
    let err = ck.restore(&mut other).unwrap_err().to_string();
    assert!(err.contains("m.embedding.projection.weight"), "{err}");
    // nothing was written
    assert_eq!(Checkpoint::capture(&other, &wider).unwrap(), before);
}
