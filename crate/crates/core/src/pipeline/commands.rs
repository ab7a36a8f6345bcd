use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{
    ae_checkpoint, ae_from_checkpoint, calibration_checkpoint, calibration_from_checkpoint, ddpm_checkpoint,
    ddpm_from_checkpoint, Checkpoint, RestoreMode,
};
use super::config::{RunConfig, RunPaths};
use super::ddpm::{encode_cohort, train_ddpm};
use crate::autoencoder::{train_ae, AeModel};
use crate::backbone::Denoiser;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::Array;
use crate::phantom::{generate_cohorts, read_volume, write_volume, Cohort, CohortManifest, Covariates, ManifestRow};
use crate::restoration::{
    calibrate_thresholds, restore_cadd, restore_plain, subject_stream, CalibrationTable, Models, Restoration,
};
use crate::scoring::{
    dice_max, render_report, residual_maps, score_subject, scores_csv, summarize, PixelStats, SubjectInput,
    SubjectScore, Summary,
};
use crate::training::{write_log, LogRow};

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::config(format!("missing {what} at {}; {hint}", path.display())));
    }
    Ok(())
}

pub fn load_manifest(cfg: &RunConfig) -> Result<CohortManifest> {
    let paths = RunPaths::new(&cfg.out_dir);
    require(&paths.manifest(), "manifest", "run gen-data first")?;
    CohortManifest::read(&paths.manifest())
}

/// Generates the phantom cohorts under `<out>/data`. An existing non-empty
/// data directory is only replaced with `force`.
pub fn cmd_gen_data(cfg: &RunConfig, force: bool) -> Result<CohortManifest> {
    cfg.validate()?;
    let dir = RunPaths::new(&cfg.out_dir).data();
    let occupied = std::fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !force {
            return Err(Error::Input(format!(
                "{} already contains data; pass --force to overwrite",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let manifest = generate_cohorts(&cfg.data, cfg.seed, &dir)?;
    manifest.write()?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Ae,
    Ddpm,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub checksum: String,
    pub log: Vec<LogRow>,
}

pub fn cmd_train(cfg: &RunConfig, stage: Stage) -> Result<TrainReport> {
    match stage {
        Stage::Ae => cmd_train_ae(cfg),
        Stage::Ddpm => cmd_train_ddpm(cfg),
    }
}

fn cmd_train_ae(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out_dir);
    let manifest = load_manifest(cfg)?;
    let (model, log) = train_ae(&manifest, &cfg.ae, &cfg.train_ae, cfg.seed)?;
    write_log(&paths.train_log("ae"), &log)?;
    let checksum = ae_checkpoint(&model)?.save(&paths.ae_checkpoint())?;
    Ok(TrainReport { checksum, log })
}

fn load_ae(cfg: &RunConfig) -> Result<(AeModel, String)> {
    let path = RunPaths::new(&cfg.out_dir).ae_checkpoint();
    require(&path, "autoencoder checkpoint", "run train --stage ae first")?;
    let (ck, sum) = Checkpoint::load(&path)?;
    Ok((ae_from_checkpoint(&ck, &cfg.ae)?, sum))
}

fn cmd_train_ddpm(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out_dir);
    let manifest = load_manifest(cfg)?;
    if cfg.ae.identity && !paths.ae_checkpoint().exists() {
        cmd_train_ae(cfg)?;
    }
    let (ae, ae_sum) = load_ae(cfg)?;
    let schedule = NoiseSchedule::build(&cfg.diffusion)?;
    let train = encode_cohort(&ae, &manifest, Cohort::Train)?;
    let val = encode_cohort(&ae, &manifest, Cohort::Validation)?;
    let (model, outcome) = train_ddpm(&train, &val, cfg.backbone_config(), &schedule, &cfg.train_ddpm, cfg.seed)?;
    write_log(&paths.train_log("ddpm"), &outcome.log)?;
    let checksum = ddpm_checkpoint(&model, &cfg.diffusion, &ae_sum)?.save(&paths.ddpm_checkpoint())?;
    Ok(TrainReport {
        checksum,
        log: outcome.log,
    })
}

/// Trained stages loaded from a run directory.
pub struct LoadedModels {
    pub ae: AeModel,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub ddpm_checksum: String,
}

impl LoadedModels {
    pub fn models(&self) -> Models<'_> {
        Models {
            ae: &self.ae,
            denoiser: &self.denoiser,
            schedule: &self.schedule,
        }
    }
}

/// Loads both checkpoints and checks that the diffusion model was trained
/// on this autoencoder.
pub fn load_models(cfg: &RunConfig) -> Result<LoadedModels> {
    let (ae, ae_sum) = load_ae(cfg)?;
    let path = RunPaths::new(&cfg.out_dir).ddpm_checkpoint();
    require(&path, "diffusion checkpoint", "run train --stage ddpm first")?;
    let (ck, ddpm_checksum) = Checkpoint::load(&path)?;
    let (denoiser, meta) = ddpm_from_checkpoint(&ck, &cfg.backbone_config(), &cfg.diffusion)?;
    if meta.ae_checksum != ae_sum {
        return Err(Error::Calibration(format!(
            "diffusion checkpoint expects autoencoder {}, found {ae_sum}",
            meta.ae_checksum
        )));
    }
    let loaded = LoadedModels {
        ae,
        denoiser,
        schedule: NoiseSchedule::build(&cfg.diffusion)?,
        ddpm_checksum,
    };
    loaded.models().check()?;
    Ok(loaded)
}

/// Restores one volume. Outputs are clamped to `[0, 1]`, which only
/// matters for the identity autoencoder.
pub fn restore_subject(
    models: Models<'_>,
    cfg: &RunConfig,
    table: Option<&CalibrationTable>,
    mode: RestoreMode,
    subject_id: &str,
    x: &Array,
    cov: Option<&Covariates>,
) -> Result<Restoration> {
    if models.denoiser.config.conditioning && cov.is_none() {
        return Err(Error::Input(format!("subject {subject_id} has no covariates but the model is conditioned")));
    }
    let base = subject_stream(cfg.seed, subject_id);
    let mut r = match mode {
        RestoreMode::Cadd => {
            let table = table.ok_or_else(|| Error::Calibration("cadd restoration needs a calibration table".into()))?;
            restore_cadd(models, x, cov, table, &cfg.restoration, &base)?
        }
        RestoreMode::Plain => restore_plain(models, x, cov, cfg.restoration.t_int, &base)?,
    };
    r.x_hat = r.x_hat.map(|v| v.clamp(0.0, 1.0));
    Ok(r)
}

fn load_rows<'a>(manifest: &'a CohortManifest, cohorts: &[Cohort]) -> Vec<&'a ManifestRow> {
    cohorts.iter().flat_map(|&c| manifest.cohort(c)).collect()
}

fn restore_rows(
    models: Models<'_>,
    cfg: &RunConfig,
    table: Option<&CalibrationTable>,
    mode: RestoreMode,
    manifest: &CohortManifest,
    rows: &[&ManifestRow],
) -> Result<Vec<(Array, Restoration)>> {
    rows.par_iter()
        .map(|row| {
            let x = read_volume(&manifest.resolve(&row.path))?;
            let r = restore_subject(models, cfg, table, mode, &row.subject_id, &x, Some(&row.covariates))?;
            Ok((x, r))
        })
        .collect()
}

/// Builds KL thresholds on the validation cohort, then pixel statistics
/// from validation restorations under `mode`.
pub fn cmd_calibrate(cfg: &RunConfig, mode: RestoreMode) -> Result<CalibrationTable> {
    cfg.validate()?;
    let manifest = load_manifest(cfg)?;
    let loaded = load_models(cfg)?;
    let models = loaded.models();
    let val = encode_cohort(&loaded.ae, &manifest, Cohort::Validation)?;
    if val.is_empty() {
        return Err(Error::Calibration("validation cohort is empty".into()));
    }
    let cond = loaded.denoiser.config.conditioning;
    let subjects: Vec<(String, Array, Option<Covariates>)> = val
        .ids
        .iter()
        .zip(&val.latents)
        .zip(&val.covariates)
        .map(|((id, z), c)| (id.clone(), z.clone(), cond.then_some(*c)))
        .collect();
    let thresholds = calibrate_thresholds(models, &subjects, &cfg.restoration, cfg.seed)?;
    let mut table = CalibrationTable {
        config: cfg.restoration.clone(),
        thresholds,
        model_checksum: loaded.ddpm_checksum.clone(),
        mae_stats: None,
        wmae_stats: None,
    };
    let rows = load_rows(&manifest, &[Cohort::Validation]);
    let restored = restore_rows(models, cfg, Some(&table), mode, &manifest, &rows)?;
    let mut mae = Vec::new();
    let mut wmae = Vec::new();
    for (x, r) in &restored {
        let maps = residual_maps(x, &r.x_hat)?;
        mae.push(maps.mae_map);
        wmae.push(maps.wmae_map);
    }
    table.mae_stats = Some(PixelStats::from_maps(&mae)?);
    table.wmae_stats = Some(PixelStats::from_maps(&wmae)?);
    calibration_checkpoint(&table, mode)?.save(&RunPaths::new(&cfg.out_dir).calibration())?;
    Ok(table)
}

/// Loads the calibration table and checks it belongs to the current model.
pub fn load_calibration(cfg: &RunConfig, ddpm_checksum: &str) -> Result<(CalibrationTable, RestoreMode)> {
    let path = RunPaths::new(&cfg.out_dir).calibration();
    require(&path, "calibration", "run calibrate first")?;
    let (ck, _) = Checkpoint::load(&path)?;
    let (table, mode) = calibration_from_checkpoint(&ck)?;
    if table.model_checksum != ddpm_checksum {
        return Err(Error::Calibration(format!(
            "calibration was built for model {}, current model is {ddpm_checksum}",
            table.model_checksum
        )));
    }
    Ok((table, mode))
}

/// Nearest-neighbour upsampling of a latent-grid mask to the image grid.
pub fn upsample_mask(mask: &Array, image: [usize; 3]) -> Result<Array> {
    let s = mask.shape();
    if s.len() != 3 || (0..3).any(|i| s[i] == 0 || image[i] % s[i] != 0) {
        return Err(Error::dim(format!("cannot upsample {s:?} to {image:?}")));
    }
    let f = [image[0] / s[0], image[1] / s[1], image[2] / s[2]];
    let mut out = Array::zeros(&image);
    for i in 0..image[0] {
        for j in 0..image[1] {
            for k in 0..image[2] {
                out.set(&[i, j, k], mask.at(&[i / f[0], j / f[1], k / f[2]]));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RestoreInfo {
    mode: RestoreMode,
    model_checksum: String,
    subjects: Vec<String>,
}

const RESTORE_INFO: &str = "restore.json";

/// Output summary of a restore run.
#[derive(Clone, Debug)]
pub struct RestoreReport {
    pub subjects: Vec<String>,
    /// Mean combined-mask fraction per subject (cadd only).
    pub mask_fractions: Vec<f64>,
}

/// Restores the given cohorts into `<out>/restored/<mode>/`, writing each
/// `x̂` and, for cadd, the union of combined masks on the image grid.
pub fn cmd_restore(cfg: &RunConfig, mode: RestoreMode, cohorts: &[Cohort]) -> Result<RestoreReport> {
    cfg.validate()?;
    let manifest = load_manifest(cfg)?;
    let loaded = load_models(cfg)?;
    let table = match mode {
        RestoreMode::Cadd => Some(load_calibration(cfg, &loaded.ddpm_checksum)?.0),
        RestoreMode::Plain => None,
    };
    let rows = load_rows(&manifest, cohorts);
    let restored = restore_rows(loaded.models(), cfg, table.as_ref(), mode, &manifest, &rows)?;
    let dir = RunPaths::new(&cfg.out_dir).restored(mode.as_str());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let image = cfg.ae.image_shape();
    let mut fractions = Vec::new();
    for (row, (_, r)) in rows.iter().zip(&restored) {
        write_volume(&dir.join(format!("{}.cvol", row.subject_id)), &r.x_hat)?;
        if let Some(u) = r.mask_union() {
            write_volume(&dir.join(format!("{}_mask.cvol", row.subject_id)), &upsample_mask(&u, image)?)?;
            fractions.push(r.masks.iter().map(|m| m.fraction()).sum::<f64>() / r.masks.len() as f64);
        }
    }
    let subjects: Vec<String> = rows.iter().map(|r| r.subject_id.clone()).collect();
    let info = RestoreInfo {
        mode,
        model_checksum: loaded.ddpm_checksum,
        subjects: subjects.clone(),
    };
    let json = serde_json::to_vec_pretty(&info).map_err(|e| Error::config(e.to_string()))?;
    write_file(&dir.join(RESTORE_INFO), &json)?;
    Ok(RestoreReport {
        subjects,
        mask_fractions: fractions,
    })
}

/// Map types entering the Dice sweep.
const DICE_MAPS: [&str; 2] = ["MAE", "wMAE"];
pub const DICE_THRESHOLDS: usize = 99;

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub scores: Vec<SubjectScore>,
    pub summary: Summary,
    pub report: String,
}

/// Scores every test-healthy and disease subject restored under `mode`
/// and writes the scores CSV and the text report.
pub fn cmd_evaluate(cfg: &RunConfig, mode: RestoreMode) -> Result<Evaluation> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out_dir);
    let manifest = load_manifest(cfg)?;
    let dir = paths.restored(mode.as_str());
    let info_path = dir.join(RESTORE_INFO);
    require(&info_path, "restorations", "run restore first")?;
    let info: RestoreInfo = serde_json::from_slice(&std::fs::read(&info_path).map_err(|e| Error::io(&info_path, e))?)
        .map_err(|e| Error::format(0, format!("{}: {e}", info_path.display())))?;
    let (table, cal_mode) = load_calibration(cfg, &info.model_checksum)?;
    if cal_mode != mode {
        return Err(Error::Calibration(format!(
            "pixel statistics were calibrated for {} restorations, evaluating {}",
            cal_mode.as_str(),
            mode.as_str()
        )));
    }
    let (mae_stats, wmae_stats) = match (&table.mae_stats, &table.wmae_stats) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Calibration("calibration has no pixel statistics".into())),
    };
    let fg = read_volume(&manifest.foreground_path())?;
    let region: Vec<bool> = fg.data().iter().map(|&v| v > 0.0).collect();

    let rows = load_rows(&manifest, &[Cohort::TestHealthy, Cohort::Disease]);
    let missing: Vec<&str> = rows
        .iter()
        .filter(|r| !dir.join(format!("{}.cvol", r.subject_id)).exists())
        .map(|r| r.subject_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Input(format!("missing restorations for: {}", missing.join(", "))));
    }

    let scored: Vec<(SubjectScore, Option<[f64; 2]>)> = rows
        .par_iter()
        .map(|row| {
            let x = read_volume(&manifest.resolve(&row.path))?;
            let x_hat = read_volume(&dir.join(format!("{}.cvol", row.subject_id)))?;
            let input = SubjectInput {
                subject_id: &row.subject_id,
                cohort: row.cohort,
                severity: row.severity,
                x: &x,
                x_hat: &x_hat,
            };
            let s = score_subject(&input, &fg, mae_stats, wmae_stats)?;
            let dice = match &row.mask_path {
                Some(p) => {
                    let gt: Vec<bool> = read_volume(&manifest.resolve(p))?.data().iter().map(|&v| v > 0.0).collect();
                    Some([
                        dice_max(s.z_mae.data(), &gt, Some(&region), DICE_THRESHOLDS)?,
                        dice_max(s.z_wmae.data(), &gt, Some(&region), DICE_THRESHOLDS)?,
                    ])
                }
                None => None,
            };
            Ok((s.score, dice))
        })
        .collect::<Result<_>>()?;

    let dice: Vec<(&'static str, Vec<f64>)> = DICE_MAPS
        .iter()
        .enumerate()
        .map(|(k, name)| (*name, scored.iter().filter_map(|(_, d)| d.map(|d| d[k])).collect()))
        .collect();
    let scores: Vec<SubjectScore> = scored.into_iter().map(|(s, _)| s).collect();
    let summary = summarize(&scores, &dice)?;
    let report = format!("restoration mode: {}\n{}", mode.as_str(), render_report(&summary));
    write_file(&paths.scores(), &scores_csv(&scores)?)?;
    write_file(&paths.report(), report.as_bytes())?;
    Ok(Evaluation { scores, summary, report })
}
