use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_corpus, generate_headline_corpus, load_jsonl, save_jsonl, Example, GeneratorSpec, SeqLimits, Task, Vocabulary,
};
use crate::decode::{batch_generate, DecodeConfig};
use crate::error::{Error, Result};
use crate::losses::SiaConfig;
use crate::metrics::{perplexity, MetricsReport};
use crate::model::{ModelConfig, SeqModel};
use crate::pipeline::train::{train_stage, LossKind, RunRecord, Stage, TrainConfig};

/// Optimisation settings of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSettings {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
}

impl Default for StageSettings {
    fn default() -> Self {
        StageSettings {
            lr: 3e-3,
            batch_size: 16,
            max_steps: 300,
            eval_every: 50,
            patience: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds model initialisation and batch order of every stage.
    pub seed: u64,
    pub generator: GeneratorSpec,
    pub n_valid: usize,
    pub n_test: usize,
    /// Size of the separately generated adaptation corpus.
    pub adapt_examples: usize,
    pub min_freq: usize,
    /// `vocab_size` and `seed` are filled in from the data and `seed`.
    pub model: ModelConfig,
    pub limits: SeqLimits,
    pub pretrain: StageSettings,
    pub adapt: StageSettings,
    pub finetune: StageSettings,
    /// Fine-tuning objective; the earlier stages always use MLE.
    pub loss: LossKind,
    pub sia: SiaConfig,
    pub decode: DecodeConfig,
    pub skip_adapt: bool,
    /// Upper bound on concurrently trained sweep points.
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            generator: GeneratorSpec::default(),
            n_valid: 200,
            n_test: 200,
            adapt_examples: 1200,
            min_freq: 1,
            model: ModelConfig {
                n_layers: 1,
                hidden: 32,
                heads: 2,
                ffn_mult: 2,
                max_positions: 64,
                init_std: 0.05,
                ..ModelConfig::default()
            },
            limits: SeqLimits {
                max_src_len: 48,
                max_tgt_len: 16,
            },
            pretrain: StageSettings::default(),
            adapt: StageSettings::default(),
            finetune: StageSettings {
                max_steps: 1500,
                patience: 6,
                ..StageSettings::default()
            },
            loss: LossKind::Sia,
            sia: SiaConfig::default(),
            decode: DecodeConfig {
                max_len: 16,
                ..DecodeConfig::default()
            },
            skip_adapt: false,
            threads: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.sia.validate()?;
        self.decode.validate()?;
        if self.n_valid == 0 || self.n_test == 0 {
            return Err(Error::Validation("n_valid and n_test must be at least 1".into()));
        }
        if self.n_valid + self.n_test >= self.generator.n_examples {
            return Err(Error::Validation(format!(
                "n_valid {} plus n_test {} leaves no training examples out of {}",
                self.n_valid, self.n_test, self.generator.n_examples
            )));
        }
        if self.adapt_examples < 2 {
            return Err(Error::Validation("adapt_examples must be at least 2".into()));
        }
        if self.threads == 0 {
            return Err(Error::Validation("threads must be at least 1".into()));
        }
        if self.limits.max_src_len > self.model.max_positions || self.limits.max_tgt_len > self.model.max_positions {
            return Err(Error::Validation(format!(
                "sequence limits {:?} exceed model max_positions {}",
                self.limits, self.model.max_positions
            )));
        }
        Ok(())
    }

    /// The resolved settings of one stage.
    pub fn train_config(&self, stage: Stage, loss: LossKind, sia: &SiaConfig) -> TrainConfig {
        let s = match stage {
            Stage::Pretrain => &self.pretrain,
            Stage::Adapt => &self.adapt,
            Stage::Finetune => &self.finetune,
        };
        TrainConfig {
            stage,
            loss,
            sia: sia.clone(),
            lr: s.lr,
            batch_size: s.batch_size,
            max_steps: s.max_steps,
            eval_every: s.eval_every,
            patience: s.patience,
            seed: self.seed,
            limits: self.limits,
            init_checkpoint: None,
            out_checkpoint: None,
        }
    }
}

/// Splits and vocabulary shared by every stage of one run.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub vocab: Vocabulary,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    pub adapt_train: Vec<Example>,
    pub adapt_valid: Vec<Example>,
}

const SPLITS: [&str; 5] = ["train", "valid", "test", "adapt_train", "adapt_valid"];

impl PreparedData {
    /// Reference headlines of the training split.
    pub fn train_targets(&self) -> Vec<String> {
        self.train.iter().map(|e| e.edited.clone()).collect()
    }

    fn splits(&self) -> [&Vec<Example>; 5] {
        [&self.train, &self.valid, &self.test, &self.adapt_train, &self.adapt_valid]
    }

    /// Writes one JSONL file per split and `vocab.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for (name, split) in SPLITS.iter().zip(self.splits()) {
            save_jsonl(split, &dir.join(format!("{name}.jsonl")))?;
        }
        self.vocab.save(&dir.join("vocab.json"))
    }

    /// Reads a directory written by [`PreparedData::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| load_jsonl(&dir.join(format!("{name}.jsonl")));
        Ok(PreparedData {
            vocab: Vocabulary::load(&dir.join("vocab.json"))?,
            train: read("train")?,
            valid: read("valid")?,
            test: read("test")?,
            adapt_train: read("adapt_train")?,
            adapt_valid: read("adapt_valid")?,
        })
    }
}

fn shuffled(mut v: Vec<Example>, seed: u64) -> Vec<Example> {
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

/// Generates the editing corpus and the adaptation corpus and splits them.
///
/// The editing corpus gives `n_test` test and `n_valid` validation
/// examples, the rest train. A tenth of the adaptation corpus validates
/// the adaptation stage. Both corpora are generated even when adaptation
/// is skipped, so that ablations share pre-training data and vocabulary.
/// The vocabulary covers the training text only.
pub fn prepare_data(cfg: &PipelineConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let gen = &cfg.generator;
    let mut corpus = shuffled(generate_corpus(gen)?, gen.seed ^ 0x5711);
    let train = corpus.split_off(cfg.n_test + cfg.n_valid);
    let valid = corpus.split_off(cfg.n_test);
    let test = corpus;

    let mut adapt_valid = shuffled(generate_headline_corpus(gen, cfg.adapt_examples)?, gen.seed ^ 0xada9);
    let adapt_train = adapt_valid.split_off((cfg.adapt_examples / 10).max(1));

    let mut texts: Vec<&str> = Vec::new();
    for e in train.iter().chain(&adapt_train) {
        texts.extend([e.body.as_str(), e.original.as_str(), e.edited.as_str()]);
    }
    let vocab = Vocabulary::build(&texts, cfg.min_freq)?;
    Ok(PreparedData {
        vocab,
        train,
        valid,
        test,
        adapt_train,
        adapt_valid,
    })
}

/// Test-set perplexity and generation metrics of a fine-tuned model.
pub fn evaluate(model: &SeqModel, data: &PreparedData, cfg: &PipelineConfig) -> Result<MetricsReport> {
    Ok(evaluate_examples(model, &data.vocab, &data.test, &data.train_targets(), cfg.limits, &cfg.decode)?.0)
}

/// Scores `model` on `test` and returns the metrics with the generated
/// headlines. `train_targets` define the Sent-REP-4 reference set.
pub fn evaluate_examples(
    model: &SeqModel,
    vocab: &Vocabulary,
    test: &[Example],
    train_targets: &[String],
    limits: SeqLimits,
    decode: &DecodeConfig,
) -> Result<(MetricsReport, Vec<String>)> {
    let ppl = perplexity(model, test, vocab, Task::Edit, limits)?;
    let generated = batch_generate(model, test, vocab, Task::Edit, limits.max_src_len, decode)?;
    let refs: Vec<String> = test.iter().map(|e| e.edited.clone()).collect();
    let report = MetricsReport::from_text(ppl, &generated, &refs, train_targets)?;
    Ok((report, generated))
}

fn in_stage<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: stage.to_string(),
        source: Box::new(e),
    })
}

fn ckpt(out: Option<&Path>, name: &str) -> Option<PathBuf> {
    out.map(|d| d.join(format!("{name}.ckpt")))
}

/// Models produced by the stages that precede fine-tuning.
#[derive(Clone, Debug)]
pub struct StageModels {
    pub pretrained: SeqModel,
    pub adapted: Option<SeqModel>,
    pub records: Vec<RunRecord>,
}

impl StageModels {
    /// Where fine-tuning starts: the adapted model when there is one.
    pub fn start(&self) -> &SeqModel {
        self.adapted.as_ref().unwrap_or(&self.pretrained)
    }
}

/// Runs pre-training and, unless `skip_adapt`, adaptation.
pub fn run_stages(cfg: &PipelineConfig, data: &PreparedData, out: Option<&Path>) -> Result<StageModels> {
    let model_cfg = ModelConfig {
        vocab_size: data.vocab.len(),
        seed: cfg.seed,
        ..cfg.model.clone()
    };
    let init = in_stage("pretrain", SeqModel::init(&model_cfg))?;
    let mut records = Vec::new();

    let pretrain_data: Vec<Example> = data.train.iter().chain(&data.adapt_train).cloned().collect();
    let mut tc = cfg.train_config(Stage::Pretrain, LossKind::Mle, &cfg.sia);
    tc.out_checkpoint = ckpt(out, "pretrain");
    let (pretrained, rec) = in_stage("pretrain", train_stage(&tc, &pretrain_data, &data.valid, &data.vocab, init))?;
    records.push(rec);

    let adapted = if cfg.skip_adapt {
        None
    } else {
        let mut tc = cfg.train_config(Stage::Adapt, LossKind::Mle, &cfg.sia);
        tc.out_checkpoint = ckpt(out, "adapt");
        let (m, rec) = in_stage(
            "adapt",
            train_stage(&tc, &data.adapt_train, &data.adapt_valid, &data.vocab, pretrained.clone()),
        )?;
        records.push(rec);
        Some(m)
    };
    Ok(StageModels {
        pretrained,
        adapted,
        records,
    })
}

/// A fine-tuning variant: objective plus importance-aware settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub loss: LossKind,
    pub sia: SiaConfig,
}

impl Arm {
    /// Fine-tunes `start` and evaluates the result on the test split.
    pub fn run(
        &self,
        cfg: &PipelineConfig,
        data: &PreparedData,
        start: &SeqModel,
        out_checkpoint: Option<PathBuf>,
    ) -> Result<(SeqModel, RunRecord)> {
        let mut tc = cfg.train_config(Stage::Finetune, self.loss, &self.sia);
        tc.out_checkpoint = out_checkpoint;
        let (model, mut rec) = in_stage(
            "finetune",
            train_stage(&tc, &data.train, &data.valid, &data.vocab, start.clone()),
        )?;
        rec.metrics = Some(in_stage("evaluate", evaluate(&model, data, cfg))?);
        Ok((model, rec))
    }
}

#[derive(Clone, Debug)]
pub struct PasOutcome {
    pub records: Vec<RunRecord>,
    pub metrics: MetricsReport,
    pub model: SeqModel,
    pub vocab: Vocabulary,
}

/// Runs all stages and evaluates the final model on the test split.
///
/// With `out` set, every stage's best checkpoint is written there along
/// with `config.json`, `records.json`, `metrics.json` and `metrics.csv`.
pub fn run_pas(cfg: &PipelineConfig, out: Option<&Path>) -> Result<PasOutcome> {
    let data = in_stage("data", prepare_data(cfg))?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        write(dir, "config.json", &to_json(cfg))?;
    }
    let stages = run_stages(cfg, &data, out)?;
    let arm = Arm {
        loss: cfg.loss,
        sia: cfg.sia.clone(),
    };
    let (model, rec) = arm.run(cfg, &data, stages.start(), ckpt(out, "finetune"))?;
    let metrics = rec.metrics.clone().expect("arm reports metrics");
    let mut records = stages.records;
    records.push(rec);
    if let Some(dir) = out {
        write(dir, "records.json", &to_json(&records))?;
        write(dir, "metrics.json", &metrics.to_json())?;
        write(dir, "metrics.csv", &metrics.to_csv())?;
    }
    Ok(PasOutcome {
        records,
        metrics,
        model,
        vocab: data.vocab,
    })
}

pub(crate) fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serialises")
}

pub(crate) fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
