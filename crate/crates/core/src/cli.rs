//! Command-line front end.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::ModelConfig;
use crate::corpus::{load_embeddings, load_jsonl, save_jsonl, SentenceInstance};
use crate::eval::{evaluate, pn_report, write_pr_csv, Evaluation, DEFAULT_P_AT};
use crate::gradcheck::{check_all, tiny_fixture};
use crate::pipeline::{ablation_config, build_model, eval_bags, train_and_evaluate, training_bags};
use crate::seeding::{self, stream};
use crate::synth::{generate_synthetic, SynthConfig};
use crate::trainer::{EpochReport, Trainer};

/// Exit statuses, one per failure class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const CONFIG: i32 = 4;
    pub const CORPUS: i32 = 5;
    pub const TRAIN: i32 = 6;
    pub const CHECKPOINT: i32 = 7;
    pub const GRADCHECK: i32 = 8;
    pub const EVAL: i32 = 9;
}

#[derive(Parser, Debug)]
#[command(
    name = "fgsi",
    version,
    about = "Distant-supervision relation extraction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a held-out corpus and write PR / P@N reports.
    Eval(EvalArgs),
    /// Write per-pair predictions as JSON lines.
    Predict(PredictArgs),
    /// Check analytic gradients of a tiny model against finite differences.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic corpus with controllable label noise.
    Synth(SynthArgs),
    /// Train the full model and the plain-embedding control on the same data.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON configuration; missing keys use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training corpus (JSON lines).
    #[arg(long)]
    corpus: PathBuf,
    /// Pretrained word vectors in GloVe text format.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// CSV precision-recall curve.
    #[arg(long)]
    report_pr: Option<PathBuf>,
    /// JSON summary with P@N and AUC.
    #[arg(long)]
    report_pn: Option<PathBuf>,
    /// N values for P@N.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_P_AT)]
    p_at: Vec<usize>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Gate threshold of the tiny model; -1 keeps every sentence.
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    beta: f64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out_train: PathBuf,
    #[arg(long)]
    out_test: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Fraction of noisy training bags.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Relations besides NA.
    #[arg(long, default_value_t = 8)]
    relations: usize,
    #[arg(long, default_value_t = 500)]
    vocab: usize,
    #[arg(long, default_value_t = 600)]
    train_bags: usize,
    #[arg(long, default_value_t = 200)]
    test_bags: usize,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// JSON file receiving both evaluations.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// A failure tagged with the stage that produced it.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub stage: &'static str,
    pub message: String,
}

impl CliError {
    fn new(code: i32, stage: &'static str, err: impl std::fmt::Display) -> Self {
        CliError {
            code,
            stage,
            message: err.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::USAGE
            } else {
                exit::OK
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Synth(a) => synth(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error [{}]: {}", e.stage, e.message);
            e.code
        }
    }
}

fn read_config(path: Option<&Path>) -> CliResult<ModelConfig> {
    let Some(path) = path else {
        return Ok(ModelConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::new(exit::IO, "config", format!("{}: {e}", path.display())))?;
    let config =
        ModelConfig::from_json(&text).map_err(|e| CliError::new(exit::CONFIG, "config", e))?;
    config
        .validate()
        .map_err(|e| CliError::new(exit::CONFIG, "config", e))?;
    Ok(config)
}

fn read_corpus(path: &Path, max_len: usize) -> CliResult<Vec<SentenceInstance>> {
    let load = load_jsonl(path, max_len).map_err(|e| {
        let code = if matches!(e, crate::corpus::CorpusError::Io { .. }) {
            exit::IO
        } else {
            exit::CORPUS
        };
        CliError::new(code, "corpus", e)
    })?;
    if !load.rejected.is_empty() {
        eprintln!(
            "{}: skipped {} sentence(s) whose entities fall beyond {max_len} tokens",
            path.display(),
            load.rejected.len()
        );
    }
    Ok(load.instances)
}

fn read_pretrained(
    path: Option<&Path>,
    seed: u64,
) -> CliResult<Option<(crate::corpus::Vocabulary, crate::Tensor)>> {
    path.map(|p| {
        let mut rng = seeding::rng(seed, &[stream::UNK_ROW]);
        load_embeddings(p, &mut rng).map_err(|e| CliError::new(exit::CORPUS, "embeddings", e))
    })
    .transpose()
}

fn create(path: &Path, stage: &'static str) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::new(exit::IO, stage, format!("{}: {e}", path.display())))
}

fn io_err(stage: &'static str) -> impl Fn(std::io::Error) -> CliError {
    move |e| CliError::new(exit::IO, stage, e)
}

fn log_epoch(r: &EpochReport) {
    eprintln!(
        "epoch {:>3}  loss {:.5}  grad {:.4}  gated {:.3}  lr {:.2e}",
        r.epoch + 1,
        r.mean_loss,
        r.mean_grad_norm,
        r.gated_fraction,
        r.final_lr
    );
}

fn train(a: TrainArgs) -> CliResult {
    let (mut trainer, train_data) = match &a.resume {
        Some(ckpt) => {
            let trainer = load_checkpoint(ckpt)
                .map_err(|e| CliError::new(exit::CHECKPOINT, "checkpoint", e))?;
            let data = read_corpus(&a.corpus, trainer.model.config.max_sentence_len)?;
            (trainer, data)
        }
        None => {
            let config = read_config(a.config.as_deref())?;
            let data = read_corpus(&a.corpus, config.max_sentence_len)?;
            let pretrained = read_pretrained(a.embeddings.as_deref(), a.seed)?;
            let model = build_model(&config, &data, pretrained, a.seed)
                .map_err(|e| CliError::new(exit::TRAIN, "model", e))?;
            let n = training_bags(&model, &data)
                .map_err(|e| CliError::new(exit::TRAIN, "model", e))?
                .len();
            (Trainer::new(model, a.seed, n), data)
        }
    };
    let bags = training_bags(&trainer.model, &train_data)
        .map_err(|e| CliError::new(exit::CORPUS, "corpus", e))?;
    let epochs = trainer.model.config.epochs as u64;
    while trainer.cursor.epoch < epochs && a.max_steps.is_none_or(|m| trainer.adam.t < m) {
        let report = trainer
            .train_until(&bags, a.max_steps)
            .map_err(|e| CliError::new(exit::TRAIN, "train", e))?;
        if report.steps > 0 {
            log_epoch(&report);
        }
    }
    save_checkpoint(&a.out, &trainer).map_err(|e| CliError::new(exit::CHECKPOINT, "checkpoint", e))
}

fn load_for_eval(
    model: &Path,
    corpus: &Path,
) -> CliResult<(Trainer, Vec<crate::model::PreparedBag>)> {
    let trainer =
        load_checkpoint(model).map_err(|e| CliError::new(exit::CHECKPOINT, "checkpoint", e))?;
    let data = read_corpus(corpus, trainer.model.config.max_sentence_len)?;
    let bags =
        eval_bags(&trainer.model, &data).map_err(|e| CliError::new(exit::CORPUS, "corpus", e))?;
    Ok((trainer, bags))
}

fn write_reports(
    eval: &Evaluation,
    config: &ModelConfig,
    seed: u64,
    ns: &[usize],
    pr: Option<&Path>,
    pn: Option<&Path>,
) -> CliResult {
    if let Some(path) = pr {
        let mut w = create(path, "report")?;
        write_pr_csv(&mut w, &eval.records, &eval.curve).map_err(io_err("report"))?;
        w.flush().map_err(io_err("report"))?;
    }
    let report = pn_report(
        eval,
        ns,
        serde_json::to_value(config).expect("config serializes"),
        seed,
    );
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match pn {
        Some(path) => fs::write(path, json + "\n").map_err(io_err("report")),
        None => {
            // A closed pipe on stdout is not an evaluation failure.
            let _ = writeln!(std::io::stdout(), "{json}");
            Ok(())
        }
    }
}

fn eval(a: EvalArgs) -> CliResult {
    let (trainer, bags) = load_for_eval(&a.model, &a.corpus)?;
    let evaluation =
        evaluate(&trainer.model, &bags).map_err(|e| CliError::new(exit::EVAL, "eval", e))?;
    if evaluation.gold_facts == 0 {
        return Err(CliError::new(
            exit::EVAL,
            "eval",
            "test corpus has no non-NA facts",
        ));
    }
    write_reports(
        &evaluation,
        &trainer.model.config,
        trainer.seed,
        &a.p_at,
        a.report_pr.as_deref(),
        a.report_pn.as_deref(),
    )
}

#[derive(Serialize)]
struct Prediction<'a> {
    head: &'a str,
    tail: &'a str,
    predicted: &'a str,
    score: f64,
    scores: BTreeMap<&'a str, f64>,
}

fn predict(a: PredictArgs) -> CliResult {
    let (trainer, bags) = load_for_eval(&a.model, &a.corpus)?;
    let model = &trainer.model;
    let evaluation = evaluate(model, &bags).map_err(|e| CliError::new(exit::EVAL, "predict", e))?;
    let mut w = create(&a.out, "predict")?;
    for (bag, score) in bags.iter().zip(&evaluation.scores) {
        let line = Prediction {
            head: &bag.head,
            tail: &bag.tail,
            predicted: model.relations.name(score.predicted),
            score: score.scores[score.predicted],
            scores: model
                .relations
                .names()
                .iter()
                .map(String::as_str)
                .zip(score.scores.iter().copied())
                .collect(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| CliError::new(exit::IO, "predict", e))?;
        w.write_all(b"\n").map_err(io_err("predict"))?;
    }
    w.flush().map_err(io_err("predict"))
}

fn gradcheck(a: GradcheckArgs) -> CliResult {
    let mut fx = tiny_fixture(a.seed, a.beta);
    let report = check_all(&mut fx.model, &fx.bag, a.step, a.tol)
        .map_err(|e| CliError::new(exit::GRADCHECK, "gradcheck", e))?;
    for g in report.groups() {
        println!(
            "{:<24} {:>5} elements  max rel err {:.3e}  {}",
            g.param,
            g.checked,
            g.max_rel_error,
            if g.failed == 0 { "PASS" } else { "FAIL" }
        );
    }
    if report.passed() {
        Ok(())
    } else {
        let n = report.failures().count();
        Err(CliError::new(
            exit::GRADCHECK,
            "gradcheck",
            format!("{n} element(s) exceed relative error {}", a.tol),
        ))
    }
}

fn synth(a: SynthArgs) -> CliResult {
    let config = SynthConfig {
        seed: a.seed,
        num_relations: a.relations,
        vocab_size: a.vocab,
        noise_rate: a.noise,
        train_bags: a.train_bags,
        test_bags: a.test_bags,
        ..SynthConfig::default()
    };
    let corpus =
        generate_synthetic(&config).map_err(|e| CliError::new(exit::CONFIG, "synth", e))?;
    save_jsonl(&a.out_train, &corpus.train).map_err(|e| CliError::new(exit::IO, "synth", e))?;
    save_jsonl(&a.out_test, &corpus.test).map_err(|e| CliError::new(exit::IO, "synth", e))?;
    eprintln!(
        "wrote {} training and {} test sentences ({:.1}% noisy training bags)",
        corpus.train.len(),
        corpus.test.len(),
        100.0 * corpus.truth.noisy_fraction()
    );
    Ok(())
}

#[derive(Serialize)]
struct AblationSide {
    config: ModelConfig,
    auc: f64,
    p_at: BTreeMap<String, f64>,
}

fn ablate(a: AblateArgs) -> CliResult {
    let config = read_config(a.config.as_deref())?;
    let train_data = read_corpus(&a.train, config.max_sentence_len)?;
    let test_data = read_corpus(&a.test, config.max_sentence_len)?;
    let mut sides = BTreeMap::new();
    for (label, cfg) in [
        ("full", config.clone()),
        ("ablated", ablation_config(&config)),
    ] {
        let pretrained = read_pretrained(a.embeddings.as_deref(), a.seed)?;
        eprintln!("training {label} model");
        let (_, evaluation) =
            train_and_evaluate(&cfg, &train_data, &test_data, pretrained, a.seed, log_epoch)
                .map_err(|e| CliError::new(exit::TRAIN, "ablate", e))?;
        println!("{label:<8} auc {:.4}", evaluation.auc);
        let report = pn_report(&evaluation, &DEFAULT_P_AT, serde_json::Value::Null, a.seed);
        sides.insert(
            label,
            AblationSide {
                config: cfg,
                auc: evaluation.auc,
                p_at: report.p_at,
            },
        );
    }
    if let Some(path) = &a.report {
        let json = serde_json::to_string_pretty(&sides).expect("report serializes");
        fs::write(path, json + "\n").map_err(io_err("report"))?;
    }
    Ok(())
}
