use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{CohortManifest, ManifestRow};
use super::{generate_phantom, inject_anomaly, write_volume, Cohort, Covariates};
use crate::error::{Error, Result};
use crate::numerics::{stream_id, Array, RngStream};
use crate::numerics::label_key;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub size: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test_healthy: usize,
    pub n_disease: usize,
    pub age_min: f64,
    pub age_max: f64,
    pub severity_min: f64,
    pub severity_max: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 32,
            n_train: 64,
            n_validation: 16,
            n_test_healthy: 16,
            n_disease: 32,
            age_min: 45.0,
            age_max: 80.0,
            severity_min: 0.2,
            severity_max: 1.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if !super::SUPPORTED_SIZES.contains(&self.size) {
            return Err(Error::config(format!("data.size must be one of {:?}", super::SUPPORTED_SIZES)));
        }
        if !(self.age_min < self.age_max) {
            return Err(Error::config("data.age_min must be below data.age_max"));
        }
        if !(self.severity_min > 0.0 && self.severity_min <= self.severity_max && self.severity_max <= 1.0) {
            return Err(Error::config("severities must satisfy 0 < min <= max <= 1"));
        }
        if self.n_train == 0 {
            return Err(Error::config("data.n_train must be positive"));
        }
        Ok(())
    }

    fn plan(&self) -> Vec<Cohort> {
        [
            (Cohort::Train, self.n_train),
            (Cohort::Validation, self.n_validation),
            (Cohort::TestHealthy, self.n_test_healthy),
            (Cohort::Disease, self.n_disease),
        ]
        .iter()
        .flat_map(|&(c, n)| std::iter::repeat_n(c, n))
        .collect()
    }
}

struct Generated {
    row: ManifestRow,
    volume: Array,
    mask: Option<Array>,
}

fn generate_subject(cfg: &PhantomConfig, seed: u64, index: usize, cohort: Cohort) -> Result<Generated> {
    let mut rng = RngStream::new(seed, stream_id(&[label_key("phantom"), index as u64]));
    let age = rng.uniform_range(cfg.age_min, cfg.age_max);
    let sex = rng.index(2) as u8;
    let covariates = Covariates::new(age, sex);
    let healthy = generate_phantom(covariates, cfg.size, &mut rng.derive(&[1]))?;
    let id = format!("sub-{index:04}");
    let (volume, mask, severity) = if cohort == Cohort::Disease {
        let mut lrng = rng.derive(&[2]);
        let severity = lrng.uniform_range(cfg.severity_min, cfg.severity_max);
        let (v, m) = inject_anomaly(&healthy, severity, &mut lrng)?;
        (v, Some(m), Some(severity))
    } else {
        (healthy, None, None)
    };
    Ok(Generated {
        row: ManifestRow {
            path: format!("volumes/{id}.cvol"),
            mask_path: mask.as_ref().map(|_| format!("masks/{id}.cvol")),
            subject_id: id,
            covariates,
            cohort,
            severity,
        },
        volume,
        mask,
    })
}

/// Generates all cohorts under `out_dir`: volumes, lesion masks, the
/// dataset foreground mask (union of training brains) and the manifest.
pub fn generate_cohorts(cfg: &PhantomConfig, seed: u64, out_dir: &Path) -> Result<CohortManifest> {
    cfg.validate()?;
    for sub in ["volumes", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let plan = cfg.plan();
    let subjects: Vec<Generated> = plan
        .par_iter()
        .enumerate()
        .map(|(i, &c)| generate_subject(cfg, seed, i, c))
        .collect::<Result<_>>()?;

    let manifest = CohortManifest {
        root: out_dir.to_path_buf(),
        rows: subjects.iter().map(|s| s.row.clone()).collect(),
    };
    subjects.par_iter().try_for_each(|s| -> Result<()> {
        write_volume(&manifest.resolve(&s.row.path), &s.volume)?;
        if let (Some(m), Some(p)) = (&s.mask, &s.row.mask_path) {
            write_volume(&manifest.resolve(p), m)?;
        }
        Ok(())
    })?;

    let n = cfg.size;
    let mut fg = Array::zeros(&[n, n, n]);
    for s in subjects.iter().filter(|s| s.row.cohort == Cohort::Train) {
        for (f, v) in fg.data_mut().iter_mut().zip(s.volume.data()) {
            if *v > 0.0 {
                *f = 1.0;
            }
        }
    }
    write_volume(&manifest.foreground_path(), &fg)?;
    manifest.validate()?;
    manifest.write()?;
    Ok(manifest)
}
