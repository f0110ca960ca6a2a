use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Example, SeqLimits, Task, Vocabulary};
use crate::error::{Error, Result};
use crate::losses::{loss_on, Objective, SiaConfig};
use crate::metrics::{perplexity, MetricsReport};
use crate::model::{load_model, save_model, ForwardOptions, SeqModel};
use crate::numcore::{Tape, Tensor};
use crate::pipeline::optim::Adam;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Adapt,
    Finetune,
}

impl Stage {
    pub fn task(self) -> Task {
        match self {
            Stage::Pretrain => Task::Pretrain,
            Stage::Adapt => Task::Adapt,
            Stage::Finetune => Task::Edit,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Adapt => "adapt",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mle,
    Sia,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub loss: LossKind,
    pub sia: SiaConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Validation perplexity is measured every this many steps.
    pub eval_every: usize,
    /// Evaluations without improvement tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    pub limits: SeqLimits,
    pub init_checkpoint: Option<PathBuf>,
    pub out_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Finetune,
            loss: LossKind::Sia,
            sia: SiaConfig::default(),
            lr: 1e-3,
            batch_size: 32,
            max_steps: 400,
            eval_every: 50,
            patience: 3,
            seed: 0,
            limits: SeqLimits::default(),
            init_checkpoint: None,
            out_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage != Stage::Finetune && self.loss != LossKind::Mle {
            return Err(Error::Validation(format!(
                "the {} stage trains with the mle loss only",
                self.stage.name()
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(Error::Validation(
                "batch_size, eval_every and patience must be at least 1".into(),
            ));
        }
        self.sia.validate()
    }

    pub fn objective(&self) -> Objective {
        match self.loss {
            LossKind::Mle => Objective::Mle,
            LossKind::Sia => Objective::Sia(self.sia.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub valid_perplexity: f64,
}

/// What one training stage did.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: Stage,
    pub config: TrainConfig,
    pub seed: u64,
    pub steps_run: usize,
    /// Training loss of every step, in order.
    pub train_losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub best_step: usize,
    pub best_valid_perplexity: f64,
    pub stopped_early: bool,
    pub metrics: Option<MetricsReport>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// Everything except the wall-clock time, for reproducibility checks.
    pub fn same_values(&self, other: &RunRecord) -> bool {
        self.stage == other.stage
            && self.config == other.config
            && self.steps_run == other.steps_run
            && self.train_losses == other.train_losses
            && self.evals == other.evals
            && self.best_step == other.best_step
            && self.best_valid_perplexity == other.best_valid_perplexity
            && self.metrics == other.metrics
    }
}

/// One gradient step's loss and gradients, without touching the model.
pub fn loss_and_grads(
    model: &SeqModel,
    batch: &crate::data::Batch,
    objective: &Objective,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, true);
    let lp = model.forward_on(&mut tape, &vars, batch, ForwardOptions { dropout_rng })?;
    let (loss, _) = loss_on(&mut tape, objective, lp, &batch.decoder_target_ids, &batch.target_mask)?;
    tape.backward(loss)?;
    let grads = vars
        .all
        .iter()
        .map(|&v| tape.grad(v).expect("trainable leaf has a gradient"))
        .collect();
    Ok((tape.value(loss).item(), grads))
}

/// Trains `model` on one stage and returns the best-validation weights.
///
/// Batches are reshuffled every epoch from `seed + epoch`. Validation
/// perplexity is taken before the first step and then every `eval_every`
/// steps; training stops once `patience` evaluations in a row fail to beat
/// the best one so far.
pub fn train_stage(
    cfg: &TrainConfig,
    train: &[Example],
    valid: &[Example],
    vocab: &Vocabulary,
    model: SeqModel,
) -> Result<(SeqModel, RunRecord)> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::EmptyInput(format!(
            "{} stage needs training and validation examples",
            cfg.stage.name()
        )));
    }
    let started = Instant::now();
    let mut model = match &cfg.init_checkpoint {
        Some(path) => load_model(path, Some(model.config()))?.model,
        None => model,
    };
    let task = cfg.stage.task();
    let objective = cfg.objective();
    let mut opt = Adam::new(model.params(), cfg.lr);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d40f);
    let use_dropout = model.config().dropout_rate > 0.0;

    let ppl0 = perplexity(&model, valid, vocab, task, cfg.limits)?;
    let mut evals = vec![EvalPoint {
        step: 0,
        valid_perplexity: ppl0,
    }];
    let (mut best, mut best_step, mut best_ppl) = (model.clone(), 0, ppl0);
    let mut misses = 0;
    let mut losses = Vec::with_capacity(cfg.max_steps);
    let mut stopped_early = false;

    let mut epoch = 0u64;
    let mut batches = Vec::new().into_iter();
    while losses.len() < cfg.max_steps {
        let batch = match batches.next() {
            Some(b) => b,
            None => {
                batches = make_batches(train, vocab, task, cfg.batch_size, cfg.limits, cfg.seed.wrapping_add(epoch))?
                    .into_iter();
                epoch += 1;
                continue;
            }
        };
        let rng = use_dropout.then_some(&mut dropout_rng);
        let (loss, grads) = loss_and_grads(&model, &batch, &objective, rng)?;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                op: "train_stage",
                msg: format!("loss became {loss} at step {}", losses.len() + 1),
            });
        }
        opt.step(model.params_mut(), &grads);
        losses.push(loss);

        let step = losses.len();
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let ppl = perplexity(&model, valid, vocab, task, cfg.limits)?;
            evals.push(EvalPoint {
                step,
                valid_perplexity: ppl,
            });
            if ppl < best_ppl {
                best_ppl = ppl;
                best_step = step;
                best = model.clone();
                misses = 0;
            } else {
                misses += 1;
                if misses >= cfg.patience {
                    stopped_early = step < cfg.max_steps;
                    break;
                }
            }
        }
    }

    if let Some(path) = &cfg.out_checkpoint {
        save_model(&best, Some(vocab), path)?;
    }
    let record = RunRecord {
        stage: cfg.stage,
        config: cfg.clone(),
        seed: cfg.seed,
        steps_run: losses.len(),
        train_losses: losses,
        evals,
        best_step,
        best_valid_perplexity: best_ppl,
        stopped_early,
        metrics: None,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((best, record))
}
