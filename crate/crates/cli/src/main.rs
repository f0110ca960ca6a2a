use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sia_seq::data::{load_jsonl, GeneratorSpec, Task, Vocabulary};
use sia_seq::decode::batch_generate;
use sia_seq::model::{load_model, ModelConfig, SeqModel};
use sia_seq::pipeline::{
    evaluate_examples, prepare_data, run_pas, sweep, sweep_points, train_stage, LossKind, PipelineConfig,
    PreparedData, RunRecord, Stage, SweepParam,
};
use sia_seq::{Error, Result};

/// Staged training and evaluation of headline-editing models.
#[derive(Parser)]
#[command(name = "sia-seq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and vocabulary.
    GenData(Common),
    /// Language-model pre-training on article bodies.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: StageIo,
    },
    /// Body-to-headline adaptation.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: StageIo,
    },
    /// Headline-editing fine-tuning, followed by test-set evaluation.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: StageIo,
        #[command(flatten)]
        sia: SiaFlags,
        #[command(flatten)]
        decode: DecodeFlags,
    },
    /// Decode edited headlines for a JSONL file.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        decode: DecodeFlags,
    },
    /// Compute all metrics of a model on a JSONL test file.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Training targets for Sent-REP-4 [default: train.jsonl beside --data]
        #[arg(long)]
        train: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeFlags,
    },
    /// Fine-tune once per alpha/beta grid point from one adapted model.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        param: ParamArg,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.5, 1.0])]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 20.0, 40.0])]
        betas: Vec<f64>,
        #[command(flatten)]
        sia: SiaFlags,
        #[command(flatten)]
        decode: DecodeFlags,
    },
    /// Pre-train, adapt, fine-tune and evaluate in one go.
    RunPas {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sia: SiaFlags,
        #[command(flatten)]
        decode: DecodeFlags,
    },
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (JSON); a bare generator spec is accepted too.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory receiving every output of the command.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct StageIo {
    /// Directory written by gen-data [default: generate from the config]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to start from [default: fresh initialisation]
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct SiaFlags {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long)]
    skip_adapt: bool,
}

#[derive(Args)]
struct DecodeFlags {
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    length_norm_lambda: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Mle,
    Sia,
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamArg {
    Alpha,
    Beta,
    Joint,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Validation(format!("reading {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    match serde_json::from_value::<PipelineConfig>(value.clone()) {
        Ok(cfg) => Ok(cfg),
        Err(pipeline_err) => match serde_json::from_value::<GeneratorSpec>(value) {
            Ok(generator) => Ok(PipelineConfig {
                generator,
                ..PipelineConfig::default()
            }),
            Err(_) => Err(Error::Validation(format!("{}: {pipeline_err}", path.display()))),
        },
    }
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("SIA_SEQ_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Validation(format!("SIA_SEQ_THREADS={v:?} is not a positive integer"))),
        },
    }
}

fn resolve(common: &Common, sia: Option<&SiaFlags>, decode: Option<&DecodeFlags>) -> Result<PipelineConfig> {
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(f) = sia {
        if let Some(a) = f.alpha {
            cfg.sia.alpha = a;
        }
        if let Some(b) = f.beta {
            cfg.sia.beta = b;
        }
        if let Some(l) = f.loss {
            cfg.loss = match l {
                LossArg::Mle => LossKind::Mle,
                LossArg::Sia => LossKind::Sia,
            };
        }
        cfg.skip_adapt |= f.skip_adapt;
    }
    if let Some(f) = decode {
        if let Some(b) = f.beam_size {
            cfg.decode.beam_size = b;
        }
        if let Some(t) = f.temperature {
            cfg.decode.temperature = t;
        }
        if let Some(l) = f.length_norm_lambda {
            cfg.decode.length_norm_lambda = l;
        }
    }
    if let Some(n) = threads_from_env()? {
        cfg.threads = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        context: format!("creating {}", dir.display()),
        source: e,
    })
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    })
}

fn write_json<T: Serialize>(dir: &Path, name: &str, v: &T) -> Result<()> {
    write(dir, name, &serde_json::to_string_pretty(v).expect("plain data serialises"))
}

/// Data for the stage commands: a gen-data directory, or freshly generated
/// splits that are also saved under `out/data`.
fn stage_data(cfg: &PipelineConfig, data: Option<&Path>, out: &Path) -> Result<PreparedData> {
    match data {
        Some(dir) => PreparedData::load(dir),
        None => {
            let d = prepare_data(cfg)?;
            d.save(&out.join("data"))?;
            Ok(d)
        }
    }
}

fn load_checked(path: &Path, vocab: Option<&Vocabulary>) -> Result<(SeqModel, Vocabulary)> {
    let ck = load_model(path, None)?;
    let ck_vocab = ck
        .vocab
        .ok_or_else(|| Error::Format(format!("{} carries no vocabulary", path.display())))?;
    if let Some(v) = vocab {
        if *v != ck_vocab {
            return Err(Error::Format(format!(
                "{} was trained with a different vocabulary than the data",
                path.display()
            )));
        }
    }
    Ok((ck.model, ck_vocab))
}

fn run_stage(stage: Stage, common: &Common, io: &StageIo, sia: Option<&SiaFlags>, decode: Option<&DecodeFlags>) -> Result<()> {
    let mut cfg = resolve(common, sia, decode)?;
    let out = common.out.as_path();
    create_out(out)?;
    let data = stage_data(&cfg, io.data.as_deref(), out)?;
    let model = match &io.model {
        Some(p) => load_checked(p, Some(&data.vocab))?.0,
        None => SeqModel::init(&ModelConfig {
            vocab_size: data.vocab.len(),
            seed: cfg.seed,
            ..cfg.model.clone()
        })?,
    };
    cfg.model = model.config().clone();
    write_json(out, "config.json", &cfg)?;

    let loss = if stage == Stage::Finetune { cfg.loss } else { LossKind::Mle };
    let mut tc = cfg.train_config(stage, loss, &cfg.sia);
    tc.out_checkpoint = Some(out.join(format!("{}.ckpt", stage.name())));
    let (train, valid) = match stage {
        Stage::Pretrain => (data.train.iter().chain(&data.adapt_train).cloned().collect(), data.valid.clone()),
        Stage::Adapt => (data.adapt_train.clone(), data.adapt_valid.clone()),
        Stage::Finetune => (data.train.clone(), data.valid.clone()),
    };
    let (model, mut record): (SeqModel, RunRecord) = train_stage(&tc, &train, &valid, &data.vocab, model)?;
    if stage == Stage::Finetune {
        let (metrics, generated) =
            evaluate_examples(&model, &data.vocab, &data.test, &data.train_targets(), cfg.limits, &cfg.decode)?;
        write(out, "metrics.json", &metrics.to_json())?;
        write(out, "metrics.csv", &metrics.to_csv())?;
        write(out, "generated.txt", &lines(&generated))?;
        record.metrics = Some(metrics);
    }
    write_json(out, "record.json", &record)?;
    println!(
        "{}: {} steps, best validation perplexity {:.4} at step {}",
        stage.name(),
        record.steps_run,
        record.best_valid_perplexity,
        record.best_step
    );
    Ok(())
}

fn lines(texts: &[String]) -> String {
    texts.iter().map(|t| format!("{t}\n")).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = resolve(&common, None, None)?;
            create_out(&common.out)?;
            write_json(&common.out, "config.json", &cfg)?;
            let data = prepare_data(&cfg)?;
            data.save(&common.out)?;
            println!(
                "wrote {} train, {} valid, {} test and {} adaptation examples; vocabulary of {}",
                data.train.len(),
                data.valid.len(),
                data.test.len(),
                data.adapt_train.len() + data.adapt_valid.len(),
                data.vocab.len()
            );
        }
        Command::Pretrain { common, io } => run_stage(Stage::Pretrain, &common, &io, None, None)?,
        Command::Adapt { common, io } => run_stage(Stage::Adapt, &common, &io, None, None)?,
        Command::Finetune { common, io, sia, decode } => {
            run_stage(Stage::Finetune, &common, &io, Some(&sia), Some(&decode))?
        }
        Command::Generate { common, model, data, decode } => {
            let cfg = resolve(&common, None, Some(&decode))?;
            create_out(&common.out)?;
            write_json(&common.out, "config.json", &cfg)?;
            let (model, vocab) = load_checked(&model, None)?;
            let examples = load_jsonl(&data)?;
            let out = batch_generate(&model, &examples, &vocab, Task::Edit, cfg.limits.max_src_len, &cfg.decode)?;
            write(&common.out, "generated.txt", &lines(&out))?;
            println!("generated {} headlines", out.len());
        }
        Command::Evaluate { common, model, data, train, decode } => {
            let cfg = resolve(&common, None, Some(&decode))?;
            create_out(&common.out)?;
            write_json(&common.out, "config.json", &cfg)?;
            let (model, vocab) = load_checked(&model, None)?;
            let test = load_jsonl(&data)?;
            let train_path = train.unwrap_or_else(|| data.with_file_name("train.jsonl"));
            let train_targets: Vec<String> = load_jsonl(&train_path)?.into_iter().map(|e| e.edited).collect();
            let (metrics, generated) = evaluate_examples(&model, &vocab, &test, &train_targets, cfg.limits, &cfg.decode)?;
            write(&common.out, "metrics.json", &metrics.to_json())?;
            write(&common.out, "metrics.csv", &metrics.to_csv())?;
            write(&common.out, "generated.txt", &lines(&generated))?;
            print!("{}", metrics.to_csv());
        }
        Command::Sweep { common, param, alphas, betas, sia, decode } => {
            let cfg = resolve(&common, Some(&sia), Some(&decode))?;
            let param = match param {
                ParamArg::Alpha => SweepParam::Alpha,
                ParamArg::Beta => SweepParam::Beta,
                ParamArg::Joint => SweepParam::Joint,
            };
            let points = sweep_points(param, &alphas, &betas, &cfg.sia)?;
            let table = sweep(&cfg, param, &points, Some(&common.out))?;
            print!("{}", table.to_csv());
        }
        Command::RunPas { common, sia, decode } => {
            let cfg = resolve(&common, Some(&sia), Some(&decode))?;
            let outcome = run_pas(&cfg, Some(&common.out))?;
            print!("{}", outcome.metrics.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(if e.category() == "validation" { 3 } else { 1 })
        }
    }
}
