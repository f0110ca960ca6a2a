use sia_seq::data::{generate_headline_corpus, GeneratorSpec, Vocabulary};
use sia_seq::losses::SiaConfig;
use sia_seq::model::{save_model, ModelConfig, SeqModel};
use sia_seq::pipeline::{
    prepare_data, run_pas, run_stages, sweep_from, sweep_points, train_stage, Arm, LossKind, PipelineConfig,
    PreparedData, Stage, StageSettings, SweepParam, TrainConfig,
};
use sia_seq::Error;

fn settings(max_steps: usize) -> StageSettings {
    StageSettings {
        lr: 3e-3,
        batch_size: 8,
        max_steps,
        eval_every: 5,
        patience: 2,
    }
}

fn tiny() -> PipelineConfig {
    let mut cfg = PipelineConfig {
        generator: GeneratorSpec {
            n_examples: 120,
            seed: 5,
            ..GeneratorSpec::default()
        },
        n_valid: 16,
        n_test: 12,
        adapt_examples: 60,
        pretrain: settings(10),
        adapt: settings(10),
        finetune: settings(15),
        ..PipelineConfig::default()
    };
    cfg.model.hidden = 16;
    cfg.decode.beam_size = 3;
    cfg.decode.max_len = 10;
    cfg
}

fn model_for(vocab: &Vocabulary, seed: u64, init_std: f64) -> SeqModel {
    SeqModel::init(&ModelConfig {
        vocab_size: vocab.len(),
        seed,
        init_std,
        ..tiny().model
    })
    .unwrap()
}

fn finetune_cfg(max_steps: usize) -> TrainConfig {
    TrainConfig {
        stage: Stage::Finetune,
        loss: LossKind::Sia,
        lr: 3e-3,
        batch_size: 8,
        max_steps,
        eval_every: 5,
        patience: 3,
        seed: 7,
        limits: tiny().limits,
        ..TrainConfig::default()
    }
}

#[test]
fn splits_are_sized_disjoint_and_round_trip() {
    let cfg = tiny();
    let data = prepare_data(&cfg).unwrap();
    assert_eq!(data.test.len(), 12);
    assert_eq!(data.valid.len(), 16);
    assert_eq!(data.train.len(), 120 - 28);
    assert_eq!(data.adapt_train.len() + data.adapt_valid.len(), 60);
    assert_eq!(data.adapt_valid.len(), 6);
    for ex in &data.test {
        assert!(!data.train.contains(ex));
    }
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let back = PreparedData::load(dir.path()).unwrap();
    assert_eq!(back.train, data.train);
    assert_eq!(back.adapt_valid, data.adapt_valid);
    assert_eq!(back.vocab, data.vocab);
}

#[test]
fn training_is_deterministic() {
    let data = prepare_data(&tiny()).unwrap();
    let cfg = finetune_cfg(12);
    let run = || train_stage(&cfg, &data.train, &data.valid, &data.vocab, model_for(&data.vocab, 3, 0.05)).unwrap();
    let (m1, r1) = run();
    let (m2, r2) = run();
    assert!(r1.same_values(&r2));
    assert_eq!(r1.train_losses.len(), 12);
    assert_eq!(m1.params(), m2.params());
}

#[test]
fn patience_one_stops_at_the_first_miss_and_keeps_the_best() {
    let data = prepare_data(&tiny()).unwrap();
    // A step size this large makes the first evaluation worse than the start.
    let cfg = TrainConfig {
        lr: 0.5,
        patience: 1,
        max_steps: 100,
        loss: LossKind::Mle,
        ..finetune_cfg(100)
    };
    let init = model_for(&data.vocab, 3, 0.05);
    let (best, rec) = train_stage(&cfg, &data.train, &data.valid, &data.vocab, init.clone()).unwrap();
    assert!(rec.evals[1].valid_perplexity >= rec.evals[0].valid_perplexity);
    assert!(rec.stopped_early);
    assert_eq!(rec.steps_run, 5);
    assert_eq!(rec.best_step, 0);
    assert_eq!(rec.evals.len(), 2);
    assert_eq!(best.params(), init.params());
}

#[test]
fn adaptation_drives_loss_below_the_uniform_start() {
    let spec = GeneratorSpec::default();
    let corpus = generate_headline_corpus(&spec, 550).unwrap();
    let (train, valid) = corpus.split_at(500);
    let texts: Vec<&str> = corpus.iter().flat_map(|e| [e.body.as_str(), e.edited.as_str()]).collect();
    let vocab = Vocabulary::build(&texts, 1).unwrap();
    let cfg = TrainConfig {
        stage: Stage::Adapt,
        loss: LossKind::Mle,
        max_steps: 200,
        eval_every: 50,
        patience: 10,
        ..finetune_cfg(200)
    };
    // A near-zero initialisation predicts almost uniformly, where validation
    // perplexity equals the vocabulary size.
    let v = vocab.len() as f64;
    let (_, rec) = train_stage(&cfg, train, valid, &vocab, model_for(&vocab, 0, 0.02)).unwrap();
    assert!((rec.evals[0].valid_perplexity - v).abs() < 0.05 * v, "{:?}", rec.evals[0]);
    assert_eq!(rec.steps_run, 200);
    let head: f64 = rec.train_losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = rec.train_losses[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.8 * head, "{tail} vs {head}");
    assert!(rec.best_valid_perplexity < 0.5 * v, "{} vs {v}", rec.best_valid_perplexity);
}

#[test]
fn finetuning_starts_from_the_adapted_checkpoint() {
    let cfg = tiny();
    let data = prepare_data(&cfg).unwrap();
    let stages = run_stages(&cfg, &data, None).unwrap();
    let adapted = stages.adapted.clone().unwrap();
    assert_ne!(adapted.params(), stages.pretrained.params());

    let arm = Arm {
        loss: LossKind::Sia,
        sia: SiaConfig::default(),
    };
    let (warm, _) = arm.run(&cfg, &data, &adapted, None).unwrap();
    let cold_init = SeqModel::init(adapted.config()).unwrap();
    let (cold, _) = arm.run(&cfg, &data, &cold_init, None).unwrap();
    assert_ne!(warm.params(), cold.params());

    // Loading the checkpoint by path is the same as passing the model.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adapt.ckpt");
    save_model(&adapted, Some(&data.vocab), &path).unwrap();
    let mut tc = cfg.train_config(Stage::Finetune, LossKind::Sia, &SiaConfig::default());
    let (direct, r1) = train_stage(&tc, &data.train, &data.valid, &data.vocab, adapted.clone()).unwrap();
    tc.init_checkpoint = Some(path);
    let (loaded, r2) = train_stage(&tc, &data.train, &data.valid, &data.vocab, cold_init).unwrap();
    assert_eq!(direct.params(), loaded.params());
    assert_eq!(r1.train_losses, r2.train_losses);
}

#[test]
fn single_point_sweep_equals_one_finetune_and_threads_do_not_matter() {
    let cfg = tiny();
    let data = prepare_data(&cfg).unwrap();
    let stages = run_stages(&cfg, &data, None).unwrap();
    let sia = SiaConfig::default();
    let pts = sweep_points(SweepParam::Alpha, &[sia.alpha], &[], &sia).unwrap();
    let table = sweep_from(&cfg, &data, stages.start(), SweepParam::Alpha, &pts).unwrap();
    let (_, single) = Arm {
        loss: LossKind::Sia,
        sia,
    }
    .run(&cfg, &data, stages.start(), None)
    .unwrap();
    assert_eq!(table.rows.len(), 1);
    assert!(table.rows[0].record.same_values(&single));
    assert_eq!(table.rows[0].normalized, [0.0; 6]);
    let csv = table.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0].split(',').count(), 14);
    assert_eq!(lines[1].split(',').count(), 14);

    let pts = sweep_points(SweepParam::Joint, &[0.0, 1.0], &[0.0, 40.0], &SiaConfig::default()).unwrap();
    assert_eq!(pts.len(), 4);
    let serial = sweep_from(&cfg, &data, stages.start(), SweepParam::Joint, &pts).unwrap();
    let parallel = sweep_from(
        &PipelineConfig {
            threads: 3,
            ..cfg.clone()
        },
        &data,
        stages.start(),
        SweepParam::Joint,
        &pts,
    )
    .unwrap();
    for (a, b) in serial.rows.iter().zip(&parallel.rows) {
        assert_eq!((a.alpha, a.beta), (b.alpha, b.beta));
        assert!(a.record.same_values(&b.record));
    }
    for row in &serial.rows {
        assert!(row.normalized.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn sweep_grids_are_validated() {
    let base = SiaConfig::default();
    assert!(matches!(
        sweep_points(SweepParam::Beta, &[1.0], &[], &base),
        Err(Error::Validation(_))
    ));
    assert!(matches!(
        sweep_points(SweepParam::Alpha, &[-1.0], &[], &base),
        Err(Error::Validation(_))
    ));
    let pts = sweep_points(SweepParam::Beta, &[], &[0.0, 20.0], &base).unwrap();
    assert_eq!(pts, vec![(base.alpha, 0.0), (base.alpha, 20.0)]);
}

#[test]
fn run_pas_writes_its_outputs_and_is_reproducible() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let a = run_pas(&cfg, Some(dir.path())).unwrap();
    let b = run_pas(&cfg, None).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.records.len(), 3);
    for name in ["config.json", "records.json", "metrics.json", "metrics.csv", "pretrain.ckpt", "adapt.ckpt", "finetune.ckpt"] {
        assert!(dir.path().join(name).exists(), "missing {name}");
    }
    let echoed: PipelineConfig =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed, cfg);

    let skipped = run_pas(
        &PipelineConfig {
            skip_adapt: true,
            ..cfg
        },
        None,
    )
    .unwrap();
    assert_eq!(skipped.records.len(), 2);
    assert_eq!(skipped.records[1].stage, Stage::Finetune);
}

#[test]
fn stage_failures_name_the_stage() {
    let cfg = tiny();
    let data = prepare_data(&cfg).unwrap();
    let mut no_valid = data.clone();
    no_valid.valid.clear();
    let err = run_stages(&cfg, &no_valid, None).unwrap_err();
    assert!(err.to_string().starts_with("stage pretrain failed:"), "{err}");
    assert_eq!(err.category(), "empty-input");

    let mut no_adapt_valid = data;
    no_adapt_valid.adapt_valid.clear();
    let err = run_stages(&cfg, &no_adapt_valid, None).unwrap_err();
    assert!(err.to_string().starts_with("stage adapt failed:"), "{err}");
}

#[test]
fn earlier_stages_refuse_the_importance_aware_loss() {
    let cfg = TrainConfig {
        stage: Stage::Adapt,
        loss: LossKind::Sia,
        ..TrainConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
    let bad = TrainConfig {
        patience: 0,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
}
