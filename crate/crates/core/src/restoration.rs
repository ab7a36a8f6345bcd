//! Masked blend-and-average restoration.
//!
//! Each subject is encoded once, then for every noise level `U` of the grid
//! the latent is noised to `U`, scored by a single KL evaluation, fully
//! denoised, and blended back into the clean latent under a mask that
//! requires both the subject's own top-percentile KL and the validation
//! cohort's per-position threshold to be exceeded. The blended latents are
//! averaged with equal weight and decoded.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::AeModel;
use crate::backbone::Denoiser;
use crate::diffusion::{forward_sample, kl_map, model_mean, posterior_params, reverse_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{label_key, stream_id, Array, RngStream};
use crate::phantom::Covariates;
use crate::scoring::{nearest_rank, percentile, PixelStats};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestorationConfig {
    /// Largest noise level `T_int`.
    pub t_int: usize,
    pub stride: usize,
    pub percentile: f64,
}

impl Default for RestorationConfig {
    fn default() -> Self {
        Self {
            t_int: 25,
            stride: 5,
            percentile: 95.0,
        }
    }
}

impl RestorationConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.stride == 0 || self.t_int == 0 || self.t_int % self.stride != 0 {
            return Err(Error::config(format!(
                "restoration stride {} must be positive and divide t_int {}",
                self.stride, self.t_int
            )));
        }
        if self.t_int > steps {
            return Err(Error::config(format!("t_int {} exceeds diffusion steps {steps}", self.t_int)));
        }
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return Err(Error::config(format!("mask percentile {} outside (0, 100)", self.percentile)));
        }
        Ok(())
    }

    /// `{stride·k : k = 1..t_int/stride}`.
    pub fn grid(&self) -> Vec<usize> {
        if self.stride == 0 {
            return Vec::new();
        }
        (1..=self.t_int / self.stride).map(|k| k * self.stride).collect()
    }
}

/// Validation-derived thresholds for every grid level, plus the pixel
/// statistics used to z-score residual maps.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationTable {
    pub config: RestorationConfig,
    /// One `[h, w, d]` array per grid level, in grid order.
    pub thresholds: Vec<Array>,
    /// Checksum of the diffusion checkpoint the table was built against.
    pub model_checksum: String,
    pub mae_stats: Option<PixelStats>,
    pub wmae_stats: Option<PixelStats>,
}

impl CalibrationTable {
    pub fn threshold(&self, u: usize) -> Result<&Array> {
        let idx = self
            .config
            .grid()
            .iter()
            .position(|&g| g == u)
            .ok_or_else(|| Error::Calibration(format!("no calibration level for U={u}")))?;
        self.thresholds
            .get(idx)
            .ok_or_else(|| Error::Calibration(format!("calibration table is missing level U={u}")))
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.config.grid();
        if self.thresholds.len() != grid.len() {
            return Err(Error::Calibration(format!(
                "calibration table has {} levels, grid has {}",
                self.thresholds.len(),
                grid.len()
            )));
        }
        if self.thresholds.iter().any(|t| t.data().iter().any(|&v| v.is_nan() || v < 0.0)) {
            return Err(Error::Calibration("negative or NaN threshold".into()));
        }
        Ok(())
    }
}

/// Trained stages used by restoration.
#[derive(Clone, Copy, Debug)]
pub struct Models<'a> {
    pub ae: &'a AeModel,
    pub denoiser: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
}

impl Models<'_> {
    pub fn check(&self) -> Result<()> {
        if self.denoiser.config.timesteps != self.schedule.steps() {
            return Err(Error::Calibration(format!(
                "denoiser trained for {} steps, schedule has {}",
                self.denoiser.config.timesteps,
                self.schedule.steps()
            )));
        }
        if self.denoiser.latent_shape() != self.ae.config.latent_shape() {
            return Err(Error::Calibration(format!(
                "denoiser latent {:?} does not match autoencoder latent {:?}",
                self.denoiser.latent_shape(),
                self.ae.config.latent_shape()
            )));
        }
        Ok(())
    }

    fn spatial(&self) -> [usize; 3] {
        let l = self.ae.config.latent_shape();
        [l[1], l[2], l[3]]
    }
}

/// Per-subject base stream for restoration draws. Level `U` uses
/// `derive([U, 1])` to noise and `derive([U, 2])` for the reverse chain.
pub fn subject_stream(seed: u64, subject_id: &str) -> RngStream {
    RngStream::new(seed, stream_id(&[label_key("restore"), label_key(subject_id)]))
}

fn noise_stream(base: &RngStream, u: usize) -> RngStream {
    base.derive(&[u as u64, 1])
}

fn chain_stream(base: &RngStream, u: usize) -> RngStream {
    base.derive(&[u as u64, 2])
}

/// Channel mean of a `[c, h, w, d]` array.
pub fn channel_mean(a: &Array) -> Result<Array> {
    if a.ndim() != 4 {
        return Err(Error::dim(format!("channel_mean expects [c,h,w,d], got {:?}", a.shape())));
    }
    let c = a.shape()[0];
    let sp = &a.shape()[1..];
    let n: usize = sp.iter().product();
    let mut out = Array::zeros(sp);
    for ch in 0..c {
        for (o, v) in out.data_mut().iter_mut().zip(&a.data()[ch * n..(ch + 1) * n]) {
            *o += v;
        }
    }
    Ok(out.scale(1.0 / c as f64))
}

/// Noises `z0` to level `u` and scores it with one denoiser call.
/// Returns `(z_U, kl_agg)`.
pub fn noise_and_score(
    models: Models<'_>,
    z0: &Array,
    u: usize,
    cov: Option<&Covariates>,
    rng: &mut RngStream,
) -> Result<(Array, Array)> {
    let s = models.schedule;
    s.check_t(u)?;
    let eps = rng.normal_array(z0.shape());
    let z_u = forward_sample(s, z0, u, &eps)?;
    let eps_hat = models.denoiser.denoise_eps(&z_u, u, cov)?;
    let (mu_tilde, var) = posterior_params(s, &z_u, z0, u)?;
    let mu_theta = model_mean(s, &z_u, u, &eps_hat)?;
    let kl = kl_map(&mu_tilde, &mu_theta, var)?;
    Ok((z_u, channel_mean(&kl)?))
}

/// Runs the reverse chain from `z_u` at level `u` down to `t = 1` using an
/// arbitrary noise predictor.
pub fn run_chain<F>(s: &NoiseSchedule, z_u: &Array, u: usize, rng: &mut RngStream, mut eps_fn: F) -> Result<Array>
where
    F: FnMut(&Array, usize) -> Result<Array>,
{
    s.check_t(u)?;
    let mut z = z_u.clone();
    for t in (1..=u).rev() {
        let eps_hat = eps_fn(&z, t)?;
        z = reverse_step(s, &z, t, &eps_hat, rng)?;
    }
    Ok(z)
}

/// `z_0^U`: the full reverse chain from `z_U`, conditioned throughout.
pub fn denoise_from(
    models: Models<'_>,
    z_u: &Array,
    u: usize,
    cov: Option<&Covariates>,
    rng: &mut RngStream,
) -> Result<Array> {
    run_chain(models.schedule, z_u, u, rng, |z, t| models.denoiser.denoise_eps(z, t, cov))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Masks {
    /// Sample-wise: above the subject's own percentile.
    pub m_s: Array,
    /// Vector-wise: above the validation threshold at that position.
    pub m_v: Array,
    pub m: Array,
}

impl Masks {
    pub fn fraction(&self) -> f64 {
        self.m.mean()
    }
}

/// Builds both masks with strict `>` and their conjunction.
pub fn compute_masks(kl_agg: &Array, thresholds: &Array, pct: f64) -> Result<Masks> {
    kl_agg.ensure_same_shape(thresholds, "compute_masks")?;
    let own = percentile(kl_agg.data(), pct)?;
    let m_s = kl_agg.map(|v| f64::from(u8::from(v > own)));
    let m_v = kl_agg.zip_map(thresholds, |v, t| f64::from(u8::from(v > t)))?;
    let m = m_s.zip_map(&m_v, |a, b| a * b)?;
    Ok(Masks { m_s, m_v, m })
}

/// `m ⊙ z_restored + (1 − m) ⊙ z0` with the spatial mask broadcast over
/// channels. Unmasked entries are copied from `z0`.
pub fn blend(z_restored: &Array, z0: &Array, mask: &Array) -> Result<Array> {
    z_restored.ensure_same_shape(z0, "blend")?;
    let n = mask.len();
    if n == 0 || z0.len() % n != 0 || z0.shape().get(1..) != Some(mask.shape()) {
        return Err(Error::dim(format!("mask {:?} does not broadcast to {:?}", mask.shape(), z0.shape())));
    }
    let mut out = z0.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if mask[i % n] > 0.0 {
            *v = z_restored[i];
        }
    }
    Ok(out)
}

/// Equal-weight mean summed in list order. Entries that agree across every
/// latent are copied, so untouched positions stay bit-exact.
pub fn average_latents(latents: &[Array]) -> Result<Array> {
    let first = latents.first().ok_or_else(|| Error::config("nothing to average"))?;
    for z in latents {
        z.ensure_same_shape(first, "average_latents")?;
    }
    let k = latents.len() as f64;
    let mut out = first.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if latents.iter().all(|z| z[i].to_bits() == first[i].to_bits()) {
            continue;
        }
        *v = latents.iter().map(|z| z[i]).sum::<f64>() / k;
    }
    Ok(out)
}

/// Per-position nearest-rank percentile of KL maps across validation
/// subjects for every grid level.
///
/// `subjects` are `(subject id, latent, covariates)`; each subject draws its
/// noise from [`subject_stream`], so a validation subject restored later
/// sees the same `z_U`.
pub fn calibrate_thresholds(
    models: Models<'_>,
    subjects: &[(String, Array, Option<Covariates>)],
    config: &RestorationConfig,
    seed: u64,
) -> Result<Vec<Array>> {
    models.check()?;
    config.validate(models.schedule.steps())?;
    if subjects.is_empty() {
        return Err(Error::Calibration("validation cohort is empty".into()));
    }
    let grid = config.grid();
    // kl[subject][level]
    let kl: Vec<Vec<Array>> = subjects
        .par_iter()
        .map(|(id, z0, cov)| {
            let base = subject_stream(seed, id);
            grid.iter()
                .map(|&u| Ok(noise_and_score(models, z0, u, cov.as_ref(), &mut noise_stream(&base, u))?.1))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let rank = nearest_rank(config.percentile, subjects.len());
    let sp = models.spatial();
    let mut out = Vec::with_capacity(grid.len());
    let mut column = vec![0.0; subjects.len()];
    for level in 0..grid.len() {
        let mut thr = Array::zeros(&sp);
        for p in 0..thr.len() {
            for (c, s) in column.iter_mut().zip(&kl) {
                *c = s[level][p];
            }
            column.sort_by(f64::total_cmp);
            thr[p] = column[rank - 1];
        }
        out.push(thr);
    }
    Ok(out)
}

/// One restored subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Restoration {
    pub x_hat: Array,
    pub z_hat: Array,
    /// Per grid level, in grid order; empty for the plain baseline.
    pub masks: Vec<Masks>,
}

impl Restoration {
    /// Union of the combined masks over all levels, on the latent grid.
    pub fn mask_union(&self) -> Option<Array> {
        let first = self.masks.first()?;
        let mut u = first.m.clone();
        for m in &self.masks[1..] {
            for (a, b) in u.data_mut().iter_mut().zip(m.m.data()) {
                *a = a.max(*b);
            }
        }
        Some(u)
    }
}

/// Masked blend-and-average restoration of one image.
pub fn restore_cadd(
    models: Models<'_>,
    x0: &Array,
    cov: Option<&Covariates>,
    table: &CalibrationTable,
    config: &RestorationConfig,
    base: &RngStream,
) -> Result<Restoration> {
    models.check()?;
    config.validate(models.schedule.steps())?;
    if table.config.grid() != config.grid() {
        return Err(Error::config(format!(
            "calibration grid {:?} does not match restoration grid {:?}",
            table.config.grid(),
            config.grid()
        )));
    }
    let z0 = models.ae.to_latent(x0)?;
    let mut blended = Vec::new();
    let mut masks = Vec::new();
    for u in config.grid() {
        let thr = table.threshold(u)?;
        let (z_u, kl_agg) = noise_and_score(models, &z0, u, cov, &mut noise_stream(base, u))?;
        let m = compute_masks(&kl_agg, thr, config.percentile)?;
        let restored = denoise_from(models, &z_u, u, cov, &mut chain_stream(base, u))?;
        blended.push(blend(&restored, &z0, &m.m)?);
        masks.push(m);
    }
    let z_hat = average_latents(&blended)?;
    let x_hat = models.ae.from_latent(&z_hat)?;
    Ok(Restoration { x_hat, z_hat, masks })
}

/// Baseline: noise to `t_int`, denoise fully, decode. `t_int = 0` is the
/// autoencoder reconstruction.
pub fn restore_plain(
    models: Models<'_>,
    x0: &Array,
    cov: Option<&Covariates>,
    t_int: usize,
    base: &RngStream,
) -> Result<Restoration> {
    models.check()?;
    let z0 = models.ae.to_latent(x0)?;
    let z_hat = if t_int == 0 {
        z0
    } else {
        let eps = noise_stream(base, t_int).normal_array(z0.shape());
        let z_u = forward_sample(models.schedule, &z0, t_int, &eps)?;
        denoise_from(models, &z_u, t_int, cov, &mut chain_stream(base, t_int))?
    };
    let x_hat = models.ae.from_latent(&z_hat)?;
    Ok(Restoration {
        x_hat,
        z_hat,
        masks: Vec::new(),
    })
}
