//! Per-subject scores, the scores CSV and the plain-text evaluation report.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::Array;
use crate::phantom::Cohort;

use super::metrics::{residual_maps, ResidualMaps};
use super::normative::{evt_index, zscore_map, PixelStats};
use super::stats::{auc, pearson, welch_t, WelchResult};

pub const SCORES_HEADER: [&str; 10] = [
    "subject_id",
    "cohort",
    "mae",
    "psnr",
    "ssim",
    "idx_mae_1",
    "idx_mae_5",
    "idx_wmae_1",
    "idx_wmae_5",
    "severity",
];

/// Index names in CSV column order.
pub const INDEX_NAMES: [&str; 4] = ["MAE-top1%", "MAE-top5%", "wMAE-top1%", "wMAE-top5%"];

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectScore {
    pub subject_id: String,
    pub cohort: Cohort,
    pub mae: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub idx_mae_1: f64,
    pub idx_mae_5: f64,
    pub idx_wmae_1: f64,
    pub idx_wmae_5: f64,
    pub severity: Option<f64>,
}

impl SubjectScore {
    pub fn indices(&self) -> [f64; 4] {
        [self.idx_mae_1, self.idx_mae_5, self.idx_wmae_1, self.idx_wmae_5]
    }
}

/// Signed z-maps of both residual types plus the scalar score.
#[derive(Clone, Debug)]
pub struct ScoredSubject {
    pub score: SubjectScore,
    pub maps: ResidualMaps,
    pub z_mae: Array,
    pub z_wmae: Array,
}

pub struct SubjectInput<'a> {
    pub subject_id: &'a str,
    pub cohort: Cohort,
    pub severity: Option<f64>,
    pub x: &'a Array,
    pub x_hat: &'a Array,
}

pub fn score_subject(
    input: &SubjectInput<'_>,
    foreground: &Array,
    mae_stats: &PixelStats,
    wmae_stats: &PixelStats,
) -> Result<ScoredSubject> {
    let maps = residual_maps(input.x, input.x_hat)?;
    let z_mae = zscore_map(&maps.mae_map, mae_stats, foreground)?;
    let z_wmae = zscore_map(&maps.wmae_map, wmae_stats, foreground)?;
    let score = SubjectScore {
        subject_id: input.subject_id.to_string(),
        cohort: input.cohort,
        mae: maps.mae,
        psnr: maps.psnr,
        ssim: maps.ssim,
        idx_mae_1: evt_index(&z_mae, foreground, 0.01)?,
        idx_mae_5: evt_index(&z_mae, foreground, 0.05)?,
        idx_wmae_1: evt_index(&z_wmae, foreground, 0.01)?,
        idx_wmae_5: evt_index(&z_wmae, foreground, 0.05)?,
        severity: input.severity,
    };
    if score.indices().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("abnormality index of {}", input.subject_id)));
    }
    Ok(ScoredSubject { score, maps, z_mae, z_wmae })
}

fn fmt_f(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

/// Scores CSV, rows sorted by subject id.
pub fn scores_csv(scores: &[SubjectScore]) -> Result<Vec<u8>> {
    let mut sorted: Vec<&SubjectScore> = scores.iter().collect();
    sorted.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SCORES_HEADER)?;
    for s in sorted {
        let mut rec = vec![s.subject_id.clone(), s.cohort.as_str().to_string()];
        rec.extend([s.mae, s.psnr, s.ssim].map(fmt_f));
        rec.extend(s.indices().map(fmt_f));
        rec.push(s.severity.map(fmt_f).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Input(format!("csv buffer: {e}")))
}

/// `(mean, half-width)` of a `mean ± 1.96·SEM` interval; half-width is NaN
/// for fewer than two values.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 || !mean.is_finite() {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionRow {
    pub index: &'static str,
    pub auc: f64,
    pub welch: WelchResult,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub n_healthy: usize,
    pub n_disease: usize,
    /// `(metric, mean, half-width)` over the healthy holdout.
    pub quality: Vec<(&'static str, f64, f64)>,
    pub detection: Vec<DetectionRow>,
    /// Average max Dice per residual type over disease subjects with masks.
    pub dice: Vec<(&'static str, f64)>,
    /// Pearson ρ between severity and each index over disease subjects.
    pub correlation: Vec<(&'static str, f64)>,
}

impl Summary {
    pub fn detection_for(&self, index: &str) -> Option<&DetectionRow> {
        self.detection.iter().find(|r| r.index == index)
    }

    pub fn correlation_for(&self, index: &str) -> Option<f64> {
        self.correlation.iter().find(|r| r.0 == index).map(|r| r.1)
    }
}

/// Cohort statistics. `dice` holds `(residual type, per-subject max Dice)`.
pub fn summarize(scores: &[SubjectScore], dice: &[(&'static str, Vec<f64>)]) -> Result<Summary> {
    let mut sorted: Vec<&SubjectScore> = scores.iter().collect();
    sorted.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    let healthy: Vec<&SubjectScore> = sorted.iter().copied().filter(|s| s.cohort == Cohort::TestHealthy).collect();
    let disease: Vec<&SubjectScore> = sorted.iter().copied().filter(|s| s.cohort == Cohort::Disease).collect();

    let mut quality = Vec::new();
    if !healthy.is_empty() {
        type Get = fn(&SubjectScore) -> f64;
        let metrics: [(&'static str, Get); 3] = [("MAE", |s| s.mae), ("PSNR", |s| s.psnr), ("SSIM", |s| s.ssim)];
        for (name, get) in metrics {
            let v: Vec<f64> = healthy.iter().map(|s| get(s)).collect();
            let (m, h) = mean_ci(&v);
            quality.push((name, m, h));
        }
    }

    let mut detection = Vec::new();
    if !healthy.is_empty() && !disease.is_empty() {
        for (k, name) in INDEX_NAMES.iter().enumerate() {
            let h: Vec<f64> = healthy.iter().map(|s| s.indices()[k]).collect();
            let d: Vec<f64> = disease.iter().map(|s| s.indices()[k]).collect();
            detection.push(DetectionRow {
                index: name,
                auc: auc(&h, &d)?,
                welch: welch_t(&d, &h)?,
            });
        }
    }

    let dice = dice
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(name, v)| (*name, v.iter().sum::<f64>() / v.len() as f64))
        .collect();

    let mut correlation = Vec::new();
    let graded: Vec<&SubjectScore> = disease.iter().copied().filter(|s| s.severity.is_some()).collect();
    if graded.len() >= 2 {
        let sev: Vec<f64> = graded.iter().filter_map(|s| s.severity).collect();
        for (k, name) in INDEX_NAMES.iter().enumerate() {
            let idx: Vec<f64> = graded.iter().map(|s| s.indices()[k]).collect();
            correlation.push((*name, pearson(&sev, &idx)?));
        }
    }

    Ok(Summary {
        n_healthy: healthy.len(),
        n_disease: disease.len(),
        quality,
        detection,
        dice,
        correlation,
    })
}

fn cell(v: f64) -> String {
    if v.is_nan() {
        "n/a".into()
    } else if v.is_infinite() {
        fmt_f(v)
    } else {
        format!("{v:.4}")
    }
}

fn sci(v: f64) -> String {
    format!("{v:.3e}")
}

/// Plain-text report. Sections without data are omitted.
pub fn render_report(s: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "evaluation report");
    let _ = writeln!(out, "subjects: test_healthy={} disease={}", s.n_healthy, s.n_disease);

    if !s.quality.is_empty() {
        let _ = writeln!(out, "\n[image quality, test_healthy]");
        let _ = writeln!(out, "{:<8}{:>12}{:>12}", "metric", "mean", "ci95");
        for (name, m, h) in &s.quality {
            let _ = writeln!(out, "{name:<8}{:>12}{:>12}", cell(*m), format!("±{}", cell(*h)));
        }
        let _ = writeln!(out, "ci95 is mean ± 1.96·SEM (normal approximation)");
    }

    if !s.detection.is_empty() {
        let _ = writeln!(out, "\n[detection, test_healthy vs disease]");
        let _ = writeln!(out, "{:<12}{:>8}{:>12}{:>10}{:>12}", "index", "AUC", "t", "df", "p");
        for r in &s.detection {
            let _ = writeln!(
                out,
                "{:<12}{:>8}{:>12}{:>10}{:>12}",
                r.index,
                format!("{:.4}", r.auc),
                format!("{:.3}", r.welch.t),
                format!("{:.2}", r.welch.df),
                sci(r.welch.p)
            );
        }
        let _ = writeln!(out, "t and p from a two-sided Welch test, disease minus healthy");
    }

    if !s.dice.is_empty() {
        let _ = writeln!(out, "\n[segmentation, disease]");
        let _ = writeln!(out, "{:<12}{:>10}", "map", "avg max Dice");
        for (name, d) in &s.dice {
            let _ = writeln!(out, "{name:<12}{:>10}", format!("{d:.4}"));
        }
    }

    if !s.correlation.is_empty() {
        let _ = writeln!(out, "\n[severity correlation, disease]");
        let _ = writeln!(out, "{:<12}{:>10}", "index", "pearson");
        for (name, r) in &s.correlation {
            let _ = writeln!(out, "{name:<12}{:>10}", format!("{r:.4}"));
        }
    }

    let _ = writeln!(
        out,
        "\nwMAE weights the voxelwise MAE by (1 - SSIM) of the whole volume.\n\
         Indices average the top 1% or 5% of signed foreground z-scores."
    );
    out
}
