//! Command-level workflow: run configuration, checkpoint files, diffusion
//! training and the gen-data / train / calibrate / restore / evaluate steps.

mod checkpoint;
mod commands;
mod config;
mod ddpm;

pub use checkpoint::{
    ae_checkpoint, ae_from_checkpoint, calibration_checkpoint, calibration_from_checkpoint, checksum_of,
    ddpm_checkpoint, ddpm_from_checkpoint, sha256_hex, Checkpoint, DdpmMeta, Kind, RestoreMode,
};
pub use commands::{
    cmd_calibrate, cmd_evaluate, cmd_gen_data, cmd_restore, cmd_train, load_calibration, load_manifest,
    load_models, restore_subject, upsample_mask, Evaluation, LoadedModels, RestoreReport, Stage, TrainReport,
    DICE_THRESHOLDS,
};
pub use config::{RunConfig, RunPaths};
pub use ddpm::{encode_cohort, eval_loss, train_ddpm, LatentSet, EVAL_DRAWS};
