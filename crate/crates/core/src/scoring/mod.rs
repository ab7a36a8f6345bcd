//! Image-quality metrics, normative z-scoring, subject indices and cohort
//! statistics.

mod metrics;
mod normative;
mod report;
mod stats;

pub use metrics::{psnr, residual_maps, ssim, ResidualMaps, SSIM_WINDOW};
pub use normative::{evt_index, zscore_map, PixelStats, STD_FLOOR};
pub use report::{
    mean_ci, render_report, score_subject, scores_csv, summarize, DetectionRow, ScoredSubject, SubjectInput,
    SubjectScore, Summary, INDEX_NAMES, SCORES_HEADER,
};
pub use stats::{auc, dice_max, ln_gamma, nearest_rank, pearson, percentile, reg_inc_beta, welch_t, WelchResult};
