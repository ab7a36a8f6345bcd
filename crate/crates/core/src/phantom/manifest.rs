use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Cohort, Covariates};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
/// The dataset-level foreground mask lives next to the manifest.
pub const FOREGROUND_FILE: &str = "foreground.cvol";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub subject_id: String,
    /// Relative to the manifest directory.
    pub path: String,
    pub covariates: Covariates,
    pub cohort: Cohort,
    pub severity: Option<f64>,
    pub mask_path: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    subject_id: String,
    path: String,
    age: f64,
    sex: u8,
    cohort: Cohort,
    severity: Option<f64>,
    mask_path: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortManifest {
    /// Directory holding `manifest.csv`; row paths resolve against it.
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl CohortManifest {
    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn foreground_path(&self) -> PathBuf {
        self.root.join(FOREGROUND_FILE)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn cohort(&self, cohort: Cohort) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.cohort == cohort)
    }

    pub fn count(&self, cohort: Cohort) -> usize {
        self.cohort(cohort).count()
    }

    pub fn find(&self, subject_id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.subject_id == subject_id)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.rows {
            if !seen.insert(r.subject_id.as_str()) {
                return Err(Error::Input(format!("duplicate subject id {}", r.subject_id)));
            }
            let diseased = r.cohort == Cohort::Disease;
            if diseased != r.mask_path.is_some() || diseased != r.severity.is_some() {
                return Err(Error::Input(format!(
                    "subject {}: lesion mask and severity must be present exactly for the disease cohort",
                    r.subject_id
                )));
            }
            if r.covariates.sex > 1 {
                return Err(Error::Input(format!("subject {}: sex must be 0 or 1", r.subject_id)));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(Record {
                subject_id: r.subject_id.clone(),
                path: r.path.clone(),
                age: r.covariates.age,
                sex: r.covariates.sex,
                cohort: r.cohort,
                severity: r.severity,
                mask_path: r.mask_path.clone(),
            })?;
        }
        if self.rows.is_empty() {
            w.write_record(["subject_id", "path", "age", "sex", "cohort", "severity", "mask_path"])?;
        }
        w.into_inner()
            .map_err(|e| Error::Input(format!("manifest serialisation: {e}")))
    }

    pub fn from_csv(root: &Path, bytes: &[u8]) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(bytes);
        let header = rd.headers()?.clone();
        let expected = ["subject_id", "path", "age", "sex", "cohort", "severity", "mask_path"];
        if header.iter().ne(expected) {
            return Err(Error::Input(format!("unexpected manifest header {:?}", header)));
        }
        let mut rows = Vec::new();
        for rec in rd.deserialize() {
            let r: Record = rec?;
            rows.push(ManifestRow {
                subject_id: r.subject_id,
                path: r.path,
                covariates: Covariates::new(r.age, r.sex),
                cohort: r.cohort,
                severity: r.severity,
                mask_path: r.mask_path.filter(|p| !p.is_empty()),
            });
        }
        let m = CohortManifest {
            root: root.to_path_buf(),
            rows,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self) -> Result<()> {
        let path = self.manifest_path();
        std::fs::write(&path, self.to_csv()?).map_err(|e| Error::io(&path, e))
    }

    /// Reads `<dir>/manifest.csv` (or a direct path to the CSV).
    pub fn read(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let bytes = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_csv(&root, &bytes)
    }
}
