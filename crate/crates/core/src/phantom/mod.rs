//! Synthetic covariate-dependent phantoms, lesion injection and the
//! volume/manifest file formats.

mod cohorts;
mod generate;
mod manifest;
mod volume_io;

pub use cohorts::{generate_cohorts, PhantomConfig};
pub use generate::{
    apply_blobs, blob_radius, generate_phantom, inject_anomaly, shift_magnitude, ventricle_voxels, Blob,
    SUPPORTED_SIZES,
};
pub use manifest::{CohortManifest, ManifestRow, FOREGROUND_FILE, MANIFEST_FILE};
pub use volume_io::{decode_cvol, encode_cvol, read_volume, write_volume, Dtype};

use serde::{Deserialize, Serialize};

/// Clinical covariates attached to every subject.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    /// Years.
    pub age: f64,
    /// 0 or 1.
    pub sex: u8,
}

impl Covariates {
    pub fn new(age: f64, sex: u8) -> Self {
        Self { age, sex }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    Train,
    Validation,
    TestHealthy,
    Disease,
}

impl Cohort {
    pub const ALL: [Cohort; 4] = [Cohort::Train, Cohort::Validation, Cohort::TestHealthy, Cohort::Disease];

    pub fn as_str(self) -> &'static str {
        match self {
            Cohort::Train => "train",
            Cohort::Validation => "validation",
            Cohort::TestHealthy => "test_healthy",
            Cohort::Disease => "disease",
        }
    }

    pub fn is_healthy(self) -> bool {
        self != Cohort::Disease
    }
}

impl std::fmt::Display for Cohort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Cohort {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        Cohort::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| crate::Error::Input(format!("unknown cohort {s:?}")))
    }
}
