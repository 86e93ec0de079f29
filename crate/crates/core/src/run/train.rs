use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Experiment, RunConfig, StopMetric};
use crate::adversarial::{AdversarialTrainer, LossBundle};
use crate::data::{batch, corrupt_asr, encode_input, load_squad_file, Corpus, Example, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{evaluate_examples, EvalReport, PredictionSet};
use crate::model::{predict_span, Checkpoint, Domain, LabeledInput, ModelConfig};

pub const BEST_CHECKPOINT: &str = "best.json";
pub const FINAL_CHECKPOINT: &str = "final.json";

/// Why a run ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    EarlyStopping,
    NonFinite,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: usize,
        /// Which update ran: `adversarial`, `source` or `target`.
        phase: String,
        l_qa_src: Option<f64>,
        l_qa_tar: Option<f64>,
        l_dis: Option<f64>,
        l_enc: Option<f64>,
        critic_loss: Option<f64>,
        lambda_g: f64,
        mode: String,
        tying: String,
    },
    Eval {
        step: usize,
        dev_em: f64,
        dev_f1: f64,
        best: bool,
    },
    Stop {
        step: usize,
        reason: StopReason,
    },
}

/// Clean and noisy training corpora.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub source: Corpus,
    pub target: Corpus,
}

impl TrainingData {
    /// Loads `paths.source_train`, and `paths.target_train` or, failing
    /// that, a noisy copy of the source made with `config.noise`.
    pub fn load(config: &RunConfig) -> Result<Self> {
        let src_path = config
            .paths
            .source_train
            .as_ref()
            .ok_or_else(|| Error::Config("paths.source_train is not set".into()))?;
        let source = load_squad_file(src_path, Domain::Source)?;
        Self::from_source(config, source)
    }

    pub fn from_source(config: &RunConfig, source: Corpus) -> Result<Self> {
        let target = match &config.paths.target_train {
            Some(p) => load_squad_file(p, Domain::Target)?,
            None => corrupt_asr(&source, &config.noise)?.0,
        };
        Ok(TrainingData { source, target })
    }
}

/// Train and dev examples of both domains.
#[derive(Clone, Debug)]
pub struct Split {
    pub source_train: Vec<Example>,
    pub source_dev: Vec<Example>,
    pub target_train: Vec<Example>,
    pub target_dev: Vec<Example>,
}

impl Split {
    /// Holds out `fraction` of the questions of each domain. When the two
    /// corpora share question ids the same ids are held out of both.
    pub fn new(data: &TrainingData, fraction: f64, seed: u64) -> Self {
        let src = data.source.examples();
        let tar = data.target.examples();
        let held_out = |examples: &[Example], stream: u64| -> BTreeSet<String> {
            let mut ids: Vec<&String> = examples.iter().map(|e| &e.id).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            ids.shuffle(&mut rng);
            let n = (fraction * ids.len() as f64).ceil() as usize;
            ids.into_iter().take(n).cloned().collect()
        };
        let src_dev = held_out(&src, 4);
        let shared = tar.iter().any(|e| src_dev.contains(&e.id));
        let tar_dev = if shared { src_dev.clone() } else { held_out(&tar, 5) };
        let part = |examples: Vec<Example>, dev: &BTreeSet<String>| -> (Vec<Example>, Vec<Example>) {
            examples.into_iter().partition(|e| !dev.contains(&e.id))
        };
        let (source_train, source_dev) = part(src, &src_dev);
        let (target_train, target_dev) = part(tar, &tar_dev);
        Split { source_train, source_dev, target_train, target_dev }
    }

    pub fn dev(&self, domain: Domain) -> &[Example] {
        match domain {
            Domain::Source => &self.source_dev,
            Domain::Target => &self.target_dev,
        }
    }
}

/// Cycles through examples in a fresh random order every epoch.
struct Sampler {
    examples: Vec<Example>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(examples: Vec<Example>, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Sampler { order: (0..examples.len()).collect(), examples, pos: usize::MAX, rng }
    }

    fn next(&mut self, n: usize) -> Vec<Example> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n.min(self.examples.len()) {
            if self.pos >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.examples[self.order[self.pos]].clone());
            self.pos += 1;
        }
        out
    }
}

/// The vocabulary of both training corpora and the model config sized to it.
pub fn build_vocabulary(config: &RunConfig, data: &TrainingData) -> Result<(Vocabulary, ModelConfig)> {
    let vocab = Vocabulary::build(&[&data.source, &data.target], config.data.min_count)?;
    let model = ModelConfig {
        word_vocab_size: vocab.len(),
        char_vocab_size: vocab.char_len(),
        ..config.model.clone()
    };
    Ok((vocab, model))
}

/// Best-span answer text for every example, from `domain`'s model.
/// Examples with an empty question or document get the empty answer.
pub fn predict(
    trainer: &AdversarialTrainer,
    domain: Domain,
    examples: &[Example],
    vocab: &Vocabulary,
    max_doc_len: Option<usize>,
    max_q_len: Option<usize>,
) -> Result<PredictionSet> {
    let model = trainer.pair.model(domain);
    let mut out = PredictionSet::new();
    for ex in examples {
        if ex.question.is_empty() || ex.document.is_empty() {
            out.insert(ex.id.clone(), String::new());
            continue;
        }
        let input = encode_input(ex, vocab, max_doc_len, max_q_len);
        let p = model.predict(&trainer.store, &input)?;
        let span = predict_span(&p, model.config.max_span_length);
        out.insert(ex.id.clone(), ex.span_text(span));
    }
    Ok(out)
}

/// A trained model ready for prediction.
pub struct TrainedModel {
    pub trainer: AdversarialTrainer,
    pub vocab: Vocabulary,
    pub config: RunConfig,
    /// Model config with vocabulary sizes filled in.
    pub model: ModelConfig,
    pub eval_domain: Domain,
}

impl TrainedModel {
    pub fn predict(&self, examples: &[Example]) -> Result<PredictionSet> {
        predict(
            &self.trainer,
            self.eval_domain,
            examples,
            &self.vocab,
            self.config.data.max_doc_len,
            self.config.data.max_q_len,
        )
    }

    /// Parameters, vocabulary and run configuration as one checkpoint.
    pub fn checkpoint(&self, step: usize) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::capture(&self.trainer.store, &self.model)?;
        ckpt.extra.insert("run_config".into(), serde_json::to_value(&self.config)?);
        ckpt.extra.insert("vocabulary".into(), serde_json::to_value(&self.vocab)?);
        ckpt.extra.insert("step".into(), step.into());
        ckpt.extra.insert("eval_domain".into(), serde_json::to_value(self.eval_domain)?);
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let field = |key: &str| {
            ckpt.extra
                .get(key)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("extra.{key} is missing")))
        };
        let config: RunConfig = serde_json::from_value(field("run_config")?)?;
        let vocab: Vocabulary = serde_json::from_value(field("vocabulary")?)?;
        let eval_domain: Domain = serde_json::from_value(field("eval_domain")?)?;
        if vocab.len() != ckpt.config.word_vocab_size || vocab.char_len() != ckpt.config.char_vocab_size {
            return Err(Error::Checkpoint("vocabulary does not match the model's embedding sizes".into()));
        }
        let mut trainer = AdversarialTrainer::new(
            &ckpt.config,
            config.tying,
            config.adversarial.clone(),
            config.optimizer.adam(),
            config.seed,
        )?;
        ckpt.restore(&mut trainer.store)?;
        Ok(TrainedModel { trainer, vocab, config, model: ckpt.config.clone(), eval_domain })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Summary of a finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub stop: StopReason,
    /// Step and dev scores of the best evaluation.
    pub best_step: Option<usize>,
    pub best_dev: Option<EvalReport>,
    /// Training examples skipped because the answer lies past `max_doc_len`.
    pub dropped_examples: usize,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
}

struct Logger {
    out: BufWriter<File>,
}

impl Logger {
    fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Logger { out: BufWriter::new(File::create(path)?) })
    }

    fn write(&mut self, record: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

fn fits(ex: &Example, max_doc_len: Option<usize>) -> bool {
    max_doc_len.is_none_or(|m| ex.span.1 < m)
}

fn encode(examples: &[Example], vocab: &Vocabulary, config: &RunConfig) -> Result<Vec<LabeledInput>> {
    let b = batch(examples, vocab, examples.len().max(1), config.data.max_doc_len, config.data.max_q_len)?;
    Ok(b.batches.into_iter().flat_map(|b| b.inputs).collect())
}

fn tying_bits(t: &crate::adversarial::TyingConfig) -> String {
    [t.tie_l1, t.tie_l2, t.tie_l3, t.tie_l4].iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// Trains per `config`, writing the JSONL log to `paths.log_file` and the
/// best and final checkpoints under `paths.checkpoint_dir`.
///
/// Non-finite losses end the run with [`Error::NonFinite`] after a `stop`
/// record; the best checkpoint is kept and no final one is written.
pub fn train(config: &RunConfig, data: &TrainingData) -> Result<(TrainedModel, RunSummary)> {
    config.validate()?;
    let (vocab, model_cfg) = build_vocabulary(config, data)?;
    let split = Split::new(data, config.early_stopping.dev_fraction, config.seed);
    let eval_domain = config.experiment.eval_domain();
    let max_doc = config.data.max_doc_len;

    let keep = |v: &[Example]| -> Vec<Example> { v.iter().filter(|e| fits(e, max_doc)).cloned().collect() };
    let src_train = keep(&split.source_train);
    let tar_train = keep(&split.target_train);
    let dropped = split.source_train.len() + split.target_train.len() - src_train.len() - tar_train.len();
    let needs_src = config.experiment != Experiment::TargetOnly;
    let needs_tar = config.experiment != Experiment::SourceOnly;
    if (needs_src && src_train.is_empty()) || (needs_tar && tar_train.is_empty()) {
        return Err(Error::Empty("no training examples left after the dev split".into()));
    }
    let dev = split.dev(eval_domain).to_vec();

    let trainer = AdversarialTrainer::new(
        &model_cfg,
        config.tying,
        config.adversarial.clone(),
        config.optimizer.adam(),
        config.seed,
    )?;
    let mut run = TrainedModel { trainer, vocab, config: config.clone(), model: model_cfg, eval_domain };

    let ckpt_dir = &config.paths.checkpoint_dir;
    std::fs::create_dir_all(ckpt_dir)?;
    let best_path = ckpt_dir.join(BEST_CHECKPOINT);
    let final_path = ckpt_dir.join(FINAL_CHECKPOINT);
    let mut log = Logger::create(&config.paths.log_file)?;

    let mut src_sampler = Sampler::new(src_train, config.seed, 3);
    let mut tar_sampler = Sampler::new(tar_train, config.seed, 6);
    let bs = config.optimizer.batch_size;
    let switch = config.finetune_switch();
    let mode = config.adversarial.mode.name().to_string();
    let tying = tying_bits(&config.tying);

    let mut best: Option<(usize, EvalReport, f64)> = None;
    let mut best_params = None;
    let mut stale = 0;
    let mut stop = StopReason::MaxSteps;
    let mut step = 0;
    while step < config.max_steps {
        step += 1;
        let phase = match config.experiment {
            Experiment::Adversarial => "adversarial",
            Experiment::SourceOnly => "source",
            Experiment::TargetOnly => "target",
            Experiment::Finetune if step <= switch => "source",
            Experiment::Finetune => "target",
        };
        if config.experiment == Experiment::Finetune && step == switch + 1 {
            run.trainer.copy_source_to_target()?;
        }
        let result: Result<LogRecord> = (|| {
            let mut record = LogRecord::Step {
                step,
                phase: phase.into(),
                l_qa_src: None,
                l_qa_tar: None,
                l_dis: None,
                l_enc: None,
                critic_loss: None,
                lambda_g: config.adversarial.lambda_g,
                mode: mode.clone(),
                tying: tying.clone(),
            };
            let LogRecord::Step { l_qa_src, l_qa_tar, l_dis, l_enc, critic_loss, .. } = &mut record else {
                unreachable!()
            };
            match phase {
                "adversarial" => {
                    let s = encode(&src_sampler.next(bs), &run.vocab, config)?;
                    let t = encode(&tar_sampler.next(bs), &run.vocab, config)?;
                    let b: LossBundle = run.trainer.training_step(&s, &t)?;
                    *l_qa_src = Some(b.l_qa_src);
                    *l_qa_tar = Some(b.l_qa_tar);
                    *l_dis = Some(b.l_dis);
                    *l_enc = Some(b.l_enc);
                    *critic_loss = b.critic_loss;
                }
                "source" => {
                    let s = encode(&src_sampler.next(bs), &run.vocab, config)?;
                    *l_qa_src = Some(run.trainer.single_domain_step(Domain::Source, &s)?);
                }
                _ => {
                    let t = encode(&tar_sampler.next(bs), &run.vocab, config)?;
                    *l_qa_tar = Some(run.trainer.single_domain_step(Domain::Target, &t)?);
                }
            }
            Ok(record)
        })();
        match result {
            Ok(record) => log.write(&record)?,
            Err(e @ Error::NonFinite(_)) => {
                log.write(&LogRecord::Stop { step, reason: StopReason::NonFinite })?;
                return Err(e);
            }
            Err(e) => return Err(e),
        }

        let due = step % config.early_stopping.eval_every == 0 || step == config.max_steps;
        if due && !dev.is_empty() {
            let report = match run.predict(&dev).and_then(|p| evaluate_examples(&p, &dev)) {
                Ok(r) => r,
                Err(e @ Error::NonFinite(_)) => {
                    log.write(&LogRecord::Stop { step, reason: StopReason::NonFinite })?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let score = match config.early_stopping.metric {
                StopMetric::DevF1 => report.f1,
                StopMetric::DevExactMatch => report.exact_match,
            };
            let improved = best.as_ref().is_none_or(|(_, _, s)| score > *s);
            log.write(&LogRecord::Eval { step, dev_em: report.exact_match, dev_f1: report.f1, best: improved })?;
            if improved {
                best = Some((step, report, score));
                let ckpt = run.checkpoint(step)?;
                ckpt.save(&best_path)?;
                best_params = Some(ckpt);
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.early_stopping.patience {
                    stop = StopReason::EarlyStopping;
                    break;
                }
            }
        }
    }
    log.write(&LogRecord::Stop { step, reason: stop })?;
    run.checkpoint(step)?.save(&final_path)?;
    match best_params {
        Some(ckpt) => ckpt.restore(&mut run.trainer.store)?,
        None => run.checkpoint(step)?.save(&best_path)?,
    }
    let summary = RunSummary {
        steps: step,
        stop,
        best_step: best.as_ref().map(|b| b.0),
        best_dev: best.map(|b| b.1),
        dropped_examples: dropped,
        best_checkpoint: best_path,
        final_checkpoint: final_path,
    };
    Ok((run, summary))
}
