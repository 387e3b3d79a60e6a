mod fixtures;

use capsosr::harness::{
    calibrate, evaluate, metrics_from_samples, run_ablation, run_experiment, AblationPlan, Checkpoint, EvalOutput,
    ExperimentConfig, LogRecord, RunLog, Trainer, MAGIC,
};
use capsosr::targets::TargetMode;
use capsosr::Error;
use fixtures::{toy_config, toy_data};

fn trained(cfg: &ExperimentConfig, steps: u64) -> Trainer {
    let data = toy_data(cfg);
    let mut trainer = Trainer::new(cfg.clone(), data.split.known_classes.clone()).unwrap();
    trainer.run_until(&data.train, steps, &mut RunLog::in_memory()).unwrap();
    trainer
}

#[test]
fn config_file_round_trip() {
    let mut cfg = toy_config();
    cfg.loss.alpha = 2.0;
    cfg.training.max_steps = Some(7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
    let partial = ExperimentConfig::from_toml("[loss]\nmargin = 5.0\n").unwrap();
    assert_eq!(partial.loss.margin, 5.0);
    assert_eq!(partial.model, ExperimentConfig::default().model);
    assert!(ExperimentConfig::from_toml("[loss]\nmargn = 5.0\n").is_err());
}

#[test]
fn single_step_smoke() {
    let cfg = toy_config();
    let data = toy_data(&cfg);
    let mut trainer = Trainer::new(cfg, data.split.known_classes.clone()).unwrap();
    let mut log = RunLog::in_memory();
    trainer.run_until(&data.train, 1, &mut log).unwrap();
    assert_eq!(trainer.step(), 1);
    assert!(trainer.last_loss().unwrap().is_finite());
    assert!(matches!(log.records(), [LogRecord::Step { step: 0, .. }]));
}

#[test]
fn training_is_deterministic() {
    let cfg = toy_config();
    let a = trained(&cfg, 10).checkpoint().unwrap();
    let b = trained(&cfg, 10).checkpoint().unwrap();
    assert_eq!(a.last_loss.unwrap().to_bits(), b.last_loss.unwrap().to_bits());
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    let mut other = cfg.clone();
    other.seeds.data += 1;
    assert_ne!(trained(&other, 10).checkpoint().unwrap().to_bytes().unwrap(), a.to_bytes().unwrap());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let cfg = toy_config();
    let data = toy_data(&cfg);
    let straight = trained(&cfg, 14).checkpoint().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    trained(&cfg, 6).checkpoint().unwrap().save(&path).unwrap();
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(resumed.step(), 6);
    resumed.run_until(&data.train, 14, &mut RunLog::in_memory()).unwrap();
    assert_eq!(resumed.checkpoint().unwrap().to_bytes().unwrap(), straight.to_bytes().unwrap());
}

#[test]
fn checkpoint_bytes_and_metrics_survive_round_trip() {
    let cfg = toy_config();
    let data = toy_data(&cfg);
    let mut ckpt = trained(&cfg, 54).checkpoint().unwrap();
    calibrate(&mut ckpt, &data).unwrap();
    let bytes = ckpt.to_bytes().unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(evaluate(&back, &data.test).unwrap(), evaluate(&ckpt, &data.test).unwrap());

    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad_magic).is_err());
    let mut bad_version = bytes;
    bad_version[8] = 99;
    assert!(Checkpoint::from_bytes(&bad_version).is_err());
}

#[test]
fn calibration_is_idempotent_and_keeps_retention() {
    let cfg = toy_config();
    let data = toy_data(&cfg);
    let mut ckpt = trained(&cfg, 54).checkpoint().unwrap();
    let first = calibrate(&mut ckpt, &data).unwrap();
    let thresholds = ckpt.thresholds.clone();
    let second = calibrate(&mut ckpt, &data).unwrap();
    assert_eq!(first, second);
    assert_eq!(thresholds, ckpt.thresholds);
    let n = first.n_calibration as f64;
    assert!(first.distance_acceptance >= 0.95 - 1.0 / n);
    assert_eq!(first.fit_counts.len(), 3);
}

#[test]
fn evaluation_requires_calibration() {
    let cfg = toy_config();
    let data = toy_data(&cfg);
    let ckpt = trained(&cfg, 2).checkpoint().unwrap();
    assert!(matches!(evaluate(&ckpt, &data.test), Err(Error::Precondition(_))));
}

#[test]
fn report_matches_exported_samples() {
    let cfg = toy_config();
    let data = toy_data(&cfg);
    let outcome = run_experiment(&cfg, &data, &mut RunLog::in_memory()).unwrap();
    let eval = &outcome.eval;
    assert!(eval.report.auroc.is_some());
    assert_eq!(eval.report.n_unknown, data.test.labels.iter().filter(|&&l| l == 3).count());
    let json = serde_json::to_string(eval).unwrap();
    let back: EvalOutput = serde_json::from_str(&json).unwrap();
    assert_eq!(&back, eval);
    assert_eq!(metrics_from_samples(&back.samples, 3).unwrap(), eval.report);
    assert!(eval.samples.iter().all(|s| s.knownness.is_finite()));

    // without unknowns AUROC is undefined and the unknown class is degenerate
    let known_only: Vec<usize> = (0..data.test.len()).filter(|&i| data.test.labels[i] < 3).collect();
    let closed = evaluate(&outcome.checkpoint, &data.test.subset(&known_only)).unwrap();
    assert_eq!(closed.report.auroc, None);
    assert_eq!(closed.report.n_unknown, 0);
    if !closed.samples.iter().any(|s| s.decision == 3) {
        assert!(closed.report.degenerate_classes.contains(&3));
    }
}

#[test]
fn nan_input_aborts_with_diagnostics() {
    let cfg = toy_config();
    let mut data = toy_data(&cfg);
    for p in data.train.pixels.iter_mut().step_by(7) {
        *p = f32::NAN;
    }
    let mut trainer = Trainer::new(cfg, data.split.known_classes.clone()).unwrap();
    match trainer.run_until(&data.train, 3, &mut RunLog::in_memory()) {
        Err(Error::NonFiniteLoss { step, diagnostics }) => {
            assert_eq!(step, 0);
            assert!(diagnostics.contains("non-finite"));
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn run_log_writes_json_lines() {
    let cfg = toy_config();
    let data = toy_data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.jsonl");
    let mut trainer = Trainer::new(cfg, data.split.known_classes.clone()).unwrap();
    let spe = trainer.steps_per_epoch(data.train.len());
    {
        let mut log = RunLog::append_to(&path).unwrap();
        trainer.run_until(&data.train, spe, &mut log).unwrap();
        assert_eq!(log.target_distances().len(), 1);
    }
    let text = std::fs::read_to_string(&path).unwrap();
    let records: Vec<LogRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len() as u64, spe + 1);
    assert!(matches!(records.last(), Some(LogRecord::Epoch { epoch: 0, .. })));
}

#[test]
fn single_cell_ablation_renders() {
    let cfg = toy_config();
    let data = toy_data(&cfg);
    let plan = AblationPlan {
        alphas: vec![1.0],
        margins: vec![10.0],
        variants: false,
    };
    let table = run_ablation(&cfg, &plan, &data).unwrap();
    assert_eq!(table.cells.len(), 1);
    let text = table.render();
    assert!(text.contains("m_k=10.0"));
    assert!(text.contains("α=1.0"));
    assert!(table.grid_cell(1.0, 10.0).unwrap().auroc.is_some());
}

#[test]
fn contrastive_term_keeps_targets_apart() {
    let mut with = toy_config();
    with.loss.alpha = 1.0;
    with.model.target_mode = TargetMode::Learnable;
    let mut without = with.clone();
    without.loss.alpha = 0.0;
    let distance = |cfg: &ExperimentConfig| {
        capsosr::targets::min_pairwise_target_distance(trained(cfg, 54).model().bank()).unwrap()
    };
    let (a1, a0) = (distance(&with), distance(&without));
    assert!(a1 > a0, "α=1 gives {a1}, α=0 gives {a0}");
}
