//! Experiment orchestration: config, training, calibration, evaluation,
//! checkpoints, run logs and ablations.

mod ablation;
mod checkpoint;
mod config;
mod data;
mod evaluate;
mod runlog;
mod train;

pub use ablation::{run_ablation, AblationCell, AblationPlan, AblationTable};
pub use checkpoint::{Checkpoint, StoredTensor, FORMAT_VERSION, MAGIC};
pub use config::{
    DataConfig, DatasetFormat, DetectorConfig, ExperimentConfig, LrSchedule, Precision, SeedConfig, TrainingConfig, UnknownSource,
};
pub use data::{assemble, dataset_dir, load_experiment_data, resolve_split, ExperimentData};
pub use evaluate::{
    calibrate, evaluate, infer_set, knownness, metrics_from_samples, CalibrationReport, EvalOutput, SampleScore,
};
pub use runlog::{LogRecord, RunLog};
pub use train::{model_from_checkpoint, train, Trainer};

use crate::error::Result;

/// Result of train → calibrate → evaluate.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub checkpoint: Checkpoint,
    pub calibration: CalibrationReport,
    pub eval: EvalOutput,
}

pub fn run_experiment(cfg: &ExperimentConfig, data: &ExperimentData, log: &mut RunLog) -> Result<ExperimentOutcome> {
    let mut checkpoint = train(cfg, &data.split.known_classes, &data.train, log)?;
    let calibration = calibrate(&mut checkpoint, data)?;
    let eval = evaluate(&checkpoint, &data.test)?;
    Ok(ExperimentOutcome {
        checkpoint,
        calibration,
        eval,
    })
}
