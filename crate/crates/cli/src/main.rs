use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use advqa::data::{corrupt_asr, load_squad_file, save_squad_file};
use advqa::eval::evaluate;
use advqa::model::Domain;
use advqa::run::{train, RunConfig, TrainedModel, TrainingData};
use advqa::verify::{run_scope, GradcheckOptions, Scope};
use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

/// Overrides the directory of the training log.
const LOG_DIR_ENV: &str = "ADVQA_LOG_DIR";

#[derive(Parser)]
#[command(name = "advqa", version, about = "Adversarial domain adaptation for QA over ASR-noisy text")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed (the noise seed for `corrupt`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pass a SQuAD file through the synthetic ASR channel.
    Corrupt {
        input: PathBuf,
        output: PathBuf,
    },
    /// Train per the configuration; writes checkpoints and a JSONL log.
    Train,
    /// Score a checkpoint on a SQuAD file.
    Eval {
        checkpoint: PathBuf,
        corpus: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// primitives, blocks, end_to_end or adversarial
        #[arg(default_value = "primitives")]
        scope: String,
    },
}

/// A failure and the exit code it maps to.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<advqa::Error> for Failure {
    fn from(e: advqa::Error) -> Self {
        if matches!(e, advqa::Error::Config(_)) {
            Failure::Usage(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Outcome {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Corrupt { input, output } => corrupt(config, cli.seed, &input, &output),
        Command::Train => train_cmd(config, cli.config.is_some(), cli.seed, cli.out.as_deref()),
        Command::Eval { checkpoint, corpus } => eval_cmd(&checkpoint, &corpus, cli.out.as_deref()),
        Command::Gradcheck { scope } => gradcheck(&scope, cli.seed),
    }
}

/// The configuration with relative paths resolved against its directory.
fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let mut cfg = RunConfig::load(path).map_err(|e| match e {
        e @ advqa::Error::Io(_) => Failure::Usage(anyhow!(e).context(format!("cannot read {}", path.display()))),
        e => Failure::Usage(e.into()),
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    let paths = &mut cfg.paths;
    for p in [&mut paths.source_train, &mut paths.target_train, &mut paths.test].into_iter().flatten() {
        resolve(p);
    }
    resolve(&mut paths.checkpoint_dir);
    resolve(&mut paths.log_file);
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn manifest_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    output.with_file_name(format!("{stem}.manifest.json"))
}

fn corrupt(mut config: RunConfig, seed: Option<u64>, input: &Path, output: &Path) -> Outcome {
    if let Some(s) = seed {
        config.noise.seed = s;
    }
    let corpus = load_squad_file(input, Domain::Source)?;
    let (noisy, manifest) = corrupt_asr(&corpus, &config.noise)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    save_squad_file(output, &noisy)?;
    let mpath = manifest_path(output);
    write_json(&mpath, &manifest)?;
    println!(
        "wrote {} ({} documents, measured WER {:.4}, {} questions dropped)",
        output.display(),
        manifest.documents,
        manifest.measured_wer,
        manifest.dropped_questions
    );
    println!("manifest {}", mpath.display());
    Ok(())
}

fn train_cmd(mut config: RunConfig, has_config: bool, seed: Option<u64>, out: Option<&Path>) -> Outcome {
    if !has_config {
        return Err(Failure::Usage(anyhow!("train needs --config")));
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(dir) = out {
        config.paths.checkpoint_dir = dir.join("checkpoints");
        config.paths.log_file = dir.join("train.jsonl");
    }
    if let Some(dir) = std::env::var_os(LOG_DIR_ENV) {
        let name = config.paths.log_file.file_name().map(PathBuf::from).unwrap_or_else(|| "train.jsonl".into());
        config.paths.log_file = PathBuf::from(dir).join(name);
    }
    config.validate()?;
    let data = TrainingData::load(&config)?;
    let started = Instant::now();
    let (model, summary) = train(&config, &data)?;
    println!(
        "{} steps in {:.1}s, stopped by {:?}",
        summary.steps,
        started.elapsed().as_secs_f64(),
        summary.stop
    );
    if let (Some(step), Some(dev)) = (summary.best_step, summary.best_dev) {
        println!("best dev at step {step}: {dev}");
    }
    println!("checkpoints {} and {}", summary.best_checkpoint.display(), summary.final_checkpoint.display());
    println!("log {}", config.paths.log_file.display());
    if let Some(test) = &config.paths.test {
        let corpus = load_squad_file(test, model.eval_domain)?;
        let preds = model.predict(&corpus.examples())?;
        let report = evaluate(&preds, &corpus)?;
        let dir = out.map(Path::to_path_buf).unwrap_or_else(|| config.paths.checkpoint_dir.clone());
        write_json(&dir.join("test_predictions.json"), &preds)?;
        write_json(&dir.join("test_report.json"), &report)?;
        println!("test {}: {report}", test.display());
    }
    Ok(())
}

fn eval_cmd(checkpoint: &Path, corpus_path: &Path, out: Option<&Path>) -> Outcome {
    let model = TrainedModel::load(checkpoint)
        .map_err(|e| Failure::Runtime(anyhow!(e).context(format!("cannot load {}", checkpoint.display()))))?;
    let corpus = load_squad_file(corpus_path, model.eval_domain)?;
    if corpus.num_questions() == 0 {
        eprintln!("notice: {} contains 0 questions; the report is vacuous", corpus_path.display());
    }
    let preds = model.predict(&corpus.examples())?;
    let report = evaluate(&preds, &corpus)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    write_json(&dir.join("predictions.json"), &preds)?;
    write_json(&dir.join("report.json"), &report)?;
    println!("{} questions: {report}", corpus.num_questions());
    Ok(())
}

fn gradcheck(scope: &str, seed: Option<u64>) -> Outcome {
    let scope: Scope = scope.parse()?;
    let mut opts = GradcheckOptions::default();
    if let Some(s) = seed {
        opts.seeds = vec![s, s + 1, s + 2];
    }
    let started = Instant::now();
    let rows = run_scope(scope, &opts)?;
    for row in &rows {
        println!("{row}");
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    println!(
        "{}: {} checks, {failed} failed, {:.1}s",
        scope.name(),
        rows.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Failure::Runtime(anyhow!("{failed} gradient checks exceeded their tolerance")));
    }
    Ok(())
}
