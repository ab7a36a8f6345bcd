use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::AeConfig;
use crate::backbone::{BackboneArch, BackboneConfig};
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::phantom::PhantomConfig;
use crate::restoration::RestorationConfig;
use crate::training::TrainConfig;

/// Everything a pipeline run needs, read from a TOML file. Every section and
/// key is optional; missing values take the desk defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Run directory holding data, checkpoints, restorations and reports.
    pub out_dir: PathBuf,
    /// Feed age and sex to the denoiser.
    pub conditioning: bool,
    pub data: PhantomConfig,
    pub ae: AeConfig,
    pub diffusion: DiffusionConfig,
    pub backbone: BackboneArch,
    pub restoration: RestorationConfig,
    pub train_ae: TrainConfig,
    pub train_ddpm: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out_dir: PathBuf::from("run"),
            conditioning: true,
            data: PhantomConfig::default(),
            ae: AeConfig::default(),
            diffusion: DiffusionConfig::default(),
            backbone: BackboneArch::default(),
            restoration: RestorationConfig::default(),
            train_ae: TrainConfig {
                lr: 2e-3,
                batch_size: 4,
                max_steps: 300,
                eval_every: 50,
                patience: 3,
            },
            train_ddpm: TrainConfig {
                lr: 1e-4,
                batch_size: 8,
                max_steps: 2000,
                eval_every: 100,
                patience: 5,
            },
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Backbone configuration implied by the autoencoder, schedule and
    /// conditioning flag.
    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            arch: self.backbone.clone(),
            latent: self.ae.latent_shape(),
            timesteps: self.diffusion.steps,
            conditioning: self.conditioning,
        }
    }

    /// Per-section checks plus the cross-field constraints.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.ae.validate()?;
        if self.ae.image_size != self.data.size {
            return Err(Error::config(format!(
                "ae.image_size {} does not match data.size {}",
                self.ae.image_size, self.data.size
            )));
        }
        crate::diffusion::NoiseSchedule::build(&self.diffusion)?;
        self.backbone_config().validate()?;
        self.restoration.validate(self.diffusion.steps)?;
        self.train_ae.validate()?;
        self.train_ddpm.validate()?;
        if self.data.n_validation < 2 {
            return Err(Error::config("data.n_validation must be at least 2 for pixel statistics"));
        }
        Ok(())
    }
}

/// File layout under the run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self) -> PathBuf {
        self.data().join(crate::phantom::MANIFEST_FILE)
    }

    pub fn ae_checkpoint(&self) -> PathBuf {
        self.root.join("ae.ckpt")
    }

    pub fn ddpm_checkpoint(&self) -> PathBuf {
        self.root.join("ddpm.ckpt")
    }

    pub fn calibration(&self) -> PathBuf {
        self.root.join("calibration.ckpt")
    }

    pub fn train_log(&self, stage: &str) -> PathBuf {
        self.root.join(format!("{stage}_log.csv"))
    }

    pub fn restored(&self, mode: &str) -> PathBuf {
        self.root.join("restored").join(mode)
    }

    pub fn scores(&self) -> PathBuf {
        self.root.join("scores.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.txt")
    }
}
