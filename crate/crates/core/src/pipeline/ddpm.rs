use crate::autoencoder::AeModel;
use crate::backbone::{BackboneConfig, CovariateStats, Denoiser};
use crate::diffusion::{ddpm_loss, forward_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{label_key, stream_id, Array, RngStream};
use crate::phantom::{read_volume, Cohort, CohortManifest, Covariates};
use crate::training::{fit, TrainConfig, TrainOutcome};

/// Scaled mean latents of one cohort, in manifest order.
#[derive(Clone, Debug)]
pub struct LatentSet {
    pub ids: Vec<String>,
    pub latents: Vec<Array>,
    pub covariates: Vec<Covariates>,
}

impl LatentSet {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

pub fn encode_cohort(ae: &AeModel, manifest: &CohortManifest, cohort: Cohort) -> Result<LatentSet> {
    let mut set = LatentSet {
        ids: Vec::new(),
        latents: Vec::new(),
        covariates: Vec::new(),
    };
    for row in manifest.cohort(cohort) {
        let x = read_volume(&manifest.resolve(&row.path))?;
        set.latents.push(ae.to_latent(&x)?);
        set.ids.push(row.subject_id.clone());
        set.covariates.push(row.covariates);
    }
    Ok(set)
}

fn cov_for<'a>(model: &Denoiser, c: &'a Covariates) -> Option<&'a Covariates> {
    model.config.conditioning.then_some(c)
}

/// Draws `(t, ε)` with `t` uniform on `1..=T`.
fn draw(rng: &mut RngStream, steps: usize, shape: &[usize]) -> (usize, Array) {
    let t = 1 + rng.index(steps);
    (t, rng.normal_array(shape))
}

/// Mean noise-prediction loss over a fixed set of `(t, ε)` draws per
/// subject, keyed by subject id so the value is comparable across models.
pub fn eval_loss(model: &Denoiser, schedule: &NoiseSchedule, set: &LatentSet, seed: u64, draws: usize) -> Result<f64> {
    if set.is_empty() || draws == 0 {
        return Err(Error::config("evaluation needs subjects and draws"));
    }
    let mut total = 0.0;
    for ((id, z0), c) in set.ids.iter().zip(&set.latents).zip(&set.covariates) {
        let mut rng = RngStream::new(seed, stream_id(&[label_key("ddpm-eval"), label_key(id)]));
        for _ in 0..draws {
            let (t, eps) = draw(&mut rng, schedule.steps(), z0.shape());
            let z_t = forward_sample(schedule, z0, t, &eps)?;
            total += ddpm_loss(&eps, &model.denoise_eps(&z_t, t, cov_for(model, c))?)?;
        }
    }
    Ok(total / (set.len() * draws) as f64)
}

pub const EVAL_DRAWS: usize = 4;

/// Trains the noise predictor with Adam, keeping the parameters with the
/// lowest validation loss.
pub fn train_ddpm(
    train: &LatentSet,
    val: &LatentSet,
    config: BackboneConfig,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Denoiser, TrainOutcome)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("diffusion training needs non-empty train and validation cohorts"));
    }
    if config.timesteps != schedule.steps() {
        return Err(Error::config("backbone timesteps differ from the schedule"));
    }
    let stats = if config.conditioning {
        Some(CovariateStats::from_covariates(&train.covariates)?)
    } else {
        None
    };
    let mut init_rng = RngStream::new(seed, stream_id(&[label_key("ddpm-init")]));
    let base = Denoiser::init(config, stats, &mut init_rng)?;
    let bs = cfg.batch_size;
    let outcome = fit(
        base.params.clone(),
        cfg,
        |params, step| {
            let model = Denoiser { params: params.clone(), ..base.clone() };
            let mut rng = RngStream::new(seed, stream_id(&[label_key("ddpm-batch"), step as u64]));
            let mut total = 0.0;
            let mut grads = params.zeros_like();
            for _ in 0..bs {
                let i = rng.index(train.len());
                let z0 = &train.latents[i];
                let (t, eps) = draw(&mut rng, schedule.steps(), z0.shape());
                let z_t = forward_sample(schedule, z0, t, &eps)?;
                let (l, g) = model.loss_and_grad(&z_t, t, cov_for(&model, &train.covariates[i]), &eps)?;
                total += l;
                grads.add_assign(&g)?;
            }
            grads.scale_all(1.0 / bs as f64);
            Ok((total / bs as f64, grads))
        },
        |params| {
            let model = Denoiser { params: params.clone(), ..base.clone() };
            eval_loss(&model, schedule, val, seed, EVAL_DRAWS)
        },
    )?;
    let model = Denoiser { params: outcome.best.clone(), ..base };
    Ok((model, outcome))
}
