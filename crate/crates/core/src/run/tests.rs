use std::collections::BTreeSet;
use std::path::Path;

use proptest::prelude::*;

use super::*;
use crate::adversarial::{AdversarialMode, GanAttach};
use crate::data::SyntheticConfig;
use crate::error::Error;
use crate::model::{Domain, Module};

fn small_data(config: &RunConfig, documents: usize) -> TrainingData {
    let source = SyntheticConfig { documents, ..SyntheticConfig::default() }.generate().unwrap();
    TrainingData::from_source(config, source).unwrap()
}

fn toy_in(dir: &Path, steps: usize) -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.max_steps = steps;
    cfg.early_stopping.eval_every = 5;
    cfg.optimizer.batch_size = 4;
    cfg.paths.checkpoint_dir = dir.join("ckpt");
    cfg.paths.log_file = dir.join("log.jsonl");
    cfg
}

#[test]
fn default_and_toy_configs_validate() {
    RunConfig::default().validate().unwrap();
    RunConfig::toy().validate().unwrap();
}

#[test]
fn toml_round_trip_of_defaults() {
    for cfg in [RunConfig::default(), RunConfig::toy()] {
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }
}

#[test]
fn empty_toml_is_the_default() {
    assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
}

#[test]
fn unknown_key_is_named() {
    let err = RunConfig::from_toml("[optimizer]\nlearning_rate = 0.1\n").unwrap_err();
    assert!(err.is_config());
    assert!(err.to_string().contains("learning_rate"), "{err}");
}

#[test]
fn invalid_values_name_their_field() {
    let cases = [
        ("[optimizer]\nlr = -1.0\n", "optimizer.lr"),
        ("[optimizer]\nbatch_size = 0\n", "optimizer.batch_size"),
        ("[early_stopping]\npatience = 0\n", "early_stopping.patience"),
        ("[early_stopping]\ndev_fraction = 1.0\n", "early_stopping.dev_fraction"),
        ("[adversarial]\nlambda_g = -0.5\n", "lambda_g"),
        ("[noise]\np_sub = 1.5\n", "noise"),
        ("[model]\nhidden_dim = 10\nattention_heads = 3\n", "model"),
        ("max_steps = 0\n", "max_steps"),
    ];
    for (text, field) in cases {
        let err = RunConfig::from_toml(text).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        assert!(err.to_string().contains(field), "{text}: {err}");
    }
}

#[test]
fn gan_attach_none_rejects_positive_lambda() {
    let err = RunConfig::from_toml("[tying]\ngan_attach = \"none\"\n[adversarial]\nlambda_g = 0.01\n").unwrap_err();
    assert!(err.to_string().contains("gan_attach"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn toml_round_trip(
        seed in any::<u32>(),
        steps in 1usize..100_000,
        lr in 1e-6f64..1.0,
        batch in 1usize..64,
        lambda in 0.0f64..2.0,
        n_critic in 1usize..10,
        tie in 0u8..16,
        attach in 0usize..3,
        log_gan in any::<bool>(),
        experiment in 0usize..4,
        max_doc in proptest::option::of(1usize..1000),
        wer in 0.0f64..0.9,
        calibrate in any::<bool>(),
    ) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed as u64;
        cfg.max_steps = steps;
        cfg.optimizer.lr = lr;
        cfg.optimizer.batch_size = batch;
        cfg.tying.tie_l1 = tie & 1 != 0;
        cfg.tying.tie_l2 = tie & 2 != 0;
        cfg.tying.tie_l3 = tie & 4 != 0;
        cfg.tying.tie_l4 = tie & 8 != 0;
        cfg.tying.gan_attach = [GanAttach::None, GanAttach::EmbeddingEncoder, GanAttach::AttentionOutput][attach];
        cfg.adversarial.lambda_g = if attach == 0 { 0.0 } else { lambda };
        cfg.adversarial.n_critic = n_critic;
        cfg.adversarial.mode = if log_gan { AdversarialMode::LogGan } else { AdversarialMode::WassersteinGp };
        cfg.experiment = [Experiment::Adversarial, Experiment::SourceOnly, Experiment::TargetOnly, Experiment::Finetune][experiment];
        cfg.data.max_doc_len = max_doc;
        cfg.noise.target_wer = wer;
        cfg.noise.calibrate = calibrate;
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn split_is_disjoint_and_shares_ids() {
    let cfg = RunConfig::toy();
    let data = small_data(&cfg, 30);
    let split = Split::new(&data, 0.2, 7);
    let n = data.source.num_questions();
    assert_eq!(split.source_train.len() + split.source_dev.len(), n);
    assert_eq!(split.source_dev.len(), (0.2 * n as f64).ceil() as usize);
    let dev: BTreeSet<_> = split.source_dev.iter().map(|e| &e.id).collect();
    assert!(split.source_train.iter().all(|e| !dev.contains(&e.id)));
    let tar_dev: BTreeSet<_> = split.target_dev.iter().map(|e| &e.id).collect();
    assert_eq!(dev, tar_dev);
    let again = Split::new(&data, 0.2, 7);
    assert_eq!(again.source_dev, split.source_dev);
    let other = Split::new(&data, 0.2, 8);
    assert_ne!(other.source_dev, split.source_dev);
}

#[test]
fn zero_dev_fraction_holds_out_nothing() {
    let cfg = RunConfig::toy();
    let data = small_data(&cfg, 5);
    let split = Split::new(&data, 0.0, 0);
    assert!(split.source_dev.is_empty() && split.target_dev.is_empty());
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn training_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_in(dir.path(), 6);
    let outputs = |cfg: &RunConfig| {
        let (_, s) = train(cfg, &small_data(cfg, 20)).unwrap();
        (read(&cfg.paths.log_file), read(&s.best_checkpoint), read(&s.final_checkpoint))
    };
    let first = outputs(&cfg);
    let second = outputs(&cfg);
    assert!(first == second, "reruns differ");
}

#[test]
fn log_records_every_step_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_in(dir.path(), 12);
    let (_, summary) = train(&cfg, &small_data(&cfg, 20)).unwrap();
    let text = std::fs::read_to_string(&cfg.paths.log_file).unwrap();
    let records: Vec<LogRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let steps = records.iter().filter(|r| matches!(r, LogRecord::Step { .. })).count();
    let evals: Vec<usize> = records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Eval { step, .. } => Some(*step),
            _ => None,
        })
        .collect();
    assert_eq!(steps, summary.steps);
    assert_eq!(evals, vec![5, 10, 12]);
    assert!(matches!(records.last(), Some(LogRecord::Stop { reason: StopReason::MaxSteps, step: 12 })));
    for r in &records {
        if let LogRecord::Step { l_qa_src, l_qa_tar, l_dis, critic_loss, phase, tying, .. } = r {
            assert_eq!(phase, "adversarial");
            assert_eq!(tying, "1111");
            assert!(l_qa_src.unwrap().is_finite() && l_qa_tar.unwrap().is_finite());
            assert!(l_dis.is_some() && critic_loss.is_some());
        }
    }
}

#[test]
fn checkpoint_reload_predicts_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_in(dir.path(), 5);
    let data = small_data(&cfg, 20);
    let (model, summary) = train(&cfg, &data).unwrap();
    let examples = data.target.examples();
    let before = model.predict(&examples).unwrap();
    let loaded = TrainedModel::load(&summary.best_checkpoint).unwrap();
    assert_eq!(loaded.eval_domain, Domain::Target);
    assert_eq!(loaded.predict(&examples).unwrap(), before);
    assert_eq!(before.len(), examples.len());
}

#[test]
fn source_only_trains_and_scores_the_source_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_in(dir.path(), 4);
    cfg.experiment = Experiment::SourceOnly;
    let (model, _) = train(&cfg, &small_data(&cfg, 10)).unwrap();
    assert_eq!(model.eval_domain, Domain::Source);
    let text = std::fs::read_to_string(&cfg.paths.log_file).unwrap();
    let first: LogRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    match first {
        LogRecord::Step { phase, l_qa_tar, l_dis, .. } => {
            assert_eq!(phase, "source");
            assert!(l_qa_tar.is_none() && l_dis.is_none());
        }
        other => panic!("unexpected first record {other:?}"),
    }
}

#[test]
fn finetune_switches_domains_and_copies_weights() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_in(dir.path(), 4);
    cfg.experiment = Experiment::Finetune;
    cfg.tying.tie_l4 = false;
    cfg.data.finetune_source_steps = Some(2);
    let (_, _) = train(&cfg, &small_data(&cfg, 10)).unwrap();
    let text = std::fs::read_to_string(&cfg.paths.log_file).unwrap();
    let phases: Vec<String> = text
        .lines()
        .filter_map(|l| match serde_json::from_str(l).unwrap() {
            LogRecord::Step { phase, .. } => Some(phase),
            _ => None,
        })
        .collect();
    assert_eq!(phases, ["source", "source", "target", "target"]);
}

#[test]
fn copy_source_to_target_equalises_untied_layers() {
    let mut cfg = RunConfig::toy();
    cfg.tying.tie_l4 = false;
    cfg.tying.tie_l3 = false;
    let model = crate::model::ModelConfig { word_vocab_size: 12, char_vocab_size: 10, ..cfg.model.clone() };
    let mut t = crate::adversarial::AdversarialTrainer::new(&model, cfg.tying, cfg.adversarial.clone(), cfg.optimizer.adam(), 3)
        .unwrap();
    let src = t.pair.source.params();
    let tar = t.pair.target.params();
    let first_untied = src.iter().zip(&tar).position(|(s, t)| s != t).unwrap();
    let bumped = t.store.value(src[first_untied]).map(|x| x + 1.0);
    t.store.set(src[first_untied], bumped).unwrap();
    assert_ne!(t.store.value(src[first_untied]), t.store.value(tar[first_untied]));
    t.copy_source_to_target().unwrap();
    for (s, q) in src.iter().zip(&tar) {
        assert_eq!(t.store.value(*s), t.store.value(*q));
    }
}

#[test]
fn non_finite_loss_aborts_and_keeps_best() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_in(dir.path(), 3);
    cfg.experiment = Experiment::SourceOnly;
    let data = small_data(&cfg, 10);
    let (_, summary) = train(&cfg, &data).unwrap();
    let best = read(&summary.best_checkpoint);
    std::fs::remove_file(&summary.final_checkpoint).unwrap();

    cfg.max_steps = 40;
    cfg.early_stopping.eval_every = 1;
    cfg.optimizer.lr = 1e300;
    let err = train(&cfg, &data).err().expect("training must diverge");
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let text = std::fs::read_to_string(&cfg.paths.log_file).unwrap();
    let last: LogRecord = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert!(matches!(last, LogRecord::Stop { reason: StopReason::NonFinite, .. }));
    assert_eq!(read(&summary.best_checkpoint), best);
    assert!(!summary.final_checkpoint.exists());
}

#[test]
fn early_stopping_halts_after_patience() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_in(dir.path(), 200);
    cfg.early_stopping.eval_every = 1;
    cfg.early_stopping.patience = 2;
    cfg.optimizer.lr = 1e-12;
    let (_, summary) = train(&cfg, &small_data(&cfg, 10)).unwrap();
    assert_eq!(summary.stop, StopReason::EarlyStopping);
    assert!(summary.steps < 200);
    assert_eq!(summary.best_step, Some(1));
}

#[test]
fn missing_source_path_is_a_config_error() {
    let err = TrainingData::load(&RunConfig::default()).unwrap_err();
    assert!(err.is_config(), "{err}");
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_in(dir.path(), 2);
    let (_, summary) = train(&cfg, &small_data(&cfg, 8)).unwrap();
    let again = dir.path().join("again.json");
    crate::model::Checkpoint::load(&summary.final_checkpoint).unwrap().save(&again).unwrap();
    assert_eq!(read(&summary.final_checkpoint), read(&again));
    let model = TrainedModel::load(&summary.final_checkpoint).unwrap();
    let third = dir.path().join("third.json");
    model.checkpoint(2).unwrap().save(&third).unwrap();
    assert_eq!(read(&summary.final_checkpoint), read(&third));
}
