//! Versioned binary container for trained models and calibration tables.
//!
//! Layout (little-endian): magic `CKPT`, version `u32`, kind `u8`, three
//! zero bytes, metadata length `u64`, metadata JSON, array count `u32`, then
//! per array a `u32` name length, the UTF-8 name, a `u64` payload length and
//! the array as a 64-bit CVOL record. A SHA-256 of everything before it
//! closes the file.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{AeConfig, AeModel};
use crate::backbone::{BackboneConfig, CovariateStats, Denoiser};
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::numerics::{Array, ParamSet};
use crate::phantom::{decode_cvol, encode_cvol, Dtype};
use crate::restoration::{CalibrationTable, RestorationConfig};
use crate::scoring::PixelStats;

const MAGIC: &[u8; 4] = b"CKPT";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Ae,
    Ddpm,
    Calibration,
}

impl Kind {
    fn code(self) -> u8 {
        match self {
            Kind::Ae => 0,
            Kind::Ddpm => 1,
            Kind::Calibration => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [Kind::Ae, Kind::Ddpm, Kind::Calibration].into_iter().find(|k| k.code() == c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: Kind,
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Array)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len().saturating_sub(self.pos) < n {
            return Err(Error::format(self.pos as u64, format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::format(self.pos as u64, format!("{what} too large")))
    }
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn new(kind: Kind, meta: &impl Serialize) -> Result<Self> {
        let meta = serde_json::to_value(meta).map_err(|e| Error::config(format!("checkpoint metadata: {e}")))?;
        Ok(Self {
            kind,
            meta,
            arrays: Vec::new(),
        })
    }

    pub fn push(&mut self, name: impl Into<String>, a: Array) {
        self.arrays.push((name.into(), a));
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::config(format!("checkpoint metadata: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&[self.kind.code(), 0, 0, 0]);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            let payload = encode_cvol(a, Dtype::F64);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < DIGEST_LEN + 4 {
            return Err(Error::format(buf.len() as u64, "file too short for a checkpoint"));
        }
        let body_len = buf.len() - DIGEST_LEN;
        if Sha256::digest(&buf[..body_len]).as_slice() != &buf[body_len..] {
            return Err(Error::format(body_len as u64, "checksum mismatch"));
        }
        let mut r = Reader {
            buf: &buf[..body_len],
            pos: 0,
        };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format(0, "bad magic, expected \"CKPT\""));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let head = r.take(4, "kind")?;
        let kind = Kind::from_code(head[0]).ok_or_else(|| Error::format(8, format!("unknown kind {}", head[0])))?;
        if head[1..] != [0, 0, 0] {
            return Err(Error::format(9, "reserved bytes must be zero"));
        }
        let meta_len = r.u64("metadata length")?;
        let meta_at = r.pos as u64;
        let meta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::format(meta_at, format!("metadata: {e}")))?;
        let count = r.u32("array count")?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let n = r.u32("name length")? as usize;
            let at = r.pos as u64;
            let name = std::str::from_utf8(r.take(n, "name")?)
                .map_err(|_| Error::format(at, "array name is not UTF-8"))?
                .to_string();
            let len = r.u64("payload length")?;
            let at = r.pos as u64;
            let a = decode_cvol(r.take(len, "array payload")?).map_err(|e| match e {
                Error::Format { offset, message } => Error::format(at + offset, format!("{name}: {message}")),
                other => other,
            })?;
            arrays.push((name, a));
        }
        if r.pos != body_len {
            return Err(Error::format(r.pos as u64, "trailing bytes before checksum"));
        }
        Ok(Self { kind, meta, arrays })
    }

    /// Writes the file and returns its checksum.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(checksum_of(&bytes))
    }

    /// Reads a file, returning the checkpoint and its checksum.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck = Self::from_bytes(&bytes)?;
        Ok((ck, checksum_of(&bytes)))
    }

    pub fn expect_kind(&self, kind: Kind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::config(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        Ok(())
    }

    pub fn meta_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.meta.clone()).map_err(|e| Error::config(format!("checkpoint metadata: {e}")))
    }

    pub fn array(&self, name: &str) -> Result<&Array> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::config(format!("checkpoint has no array {name:?}")))
    }

    fn params(&self, prefix: &str) -> ParamSet {
        let mut p = ParamSet::new();
        for (name, a) in &self.arrays {
            if let Some(rest) = name.strip_prefix(prefix) {
                p.insert(rest, a.clone());
            }
        }
        p
    }

    fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, a) in params.iter() {
            self.push(format!("{prefix}{name}"), a.clone());
        }
    }
}

/// Checksum recorded by dependent artifacts: the file's trailing digest.
pub fn checksum_of(bytes: &[u8]) -> String {
    hex::encode(&bytes[bytes.len().saturating_sub(DIGEST_LEN)..])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AeMeta {
    config: AeConfig,
    latent_scale: f64,
}

pub fn ae_checkpoint(model: &AeModel) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(
        Kind::Ae,
        &AeMeta {
            config: model.config.clone(),
            latent_scale: model.latent_scale,
        },
    )?;
    ck.push_params("param.", &model.params);
    Ok(ck)
}

/// Rebuilds the autoencoder, requiring its configuration to equal `expected`.
pub fn ae_from_checkpoint(ck: &Checkpoint, expected: &AeConfig) -> Result<AeModel> {
    ck.expect_kind(Kind::Ae)?;
    let meta: AeMeta = ck.meta_as()?;
    if &meta.config != expected {
        return Err(Error::config("autoencoder checkpoint was trained with a different configuration"));
    }
    AeModel::from_params(meta.config, ck.params("param."), meta.latent_scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdpmMeta {
    pub backbone: BackboneConfig,
    pub diffusion: DiffusionConfig,
    pub covariate_stats: Option<CovariateStats>,
    /// Checksum of the autoencoder whose latents the model was trained on.
    pub ae_checksum: String,
}

pub fn ddpm_checkpoint(model: &Denoiser, diffusion: &DiffusionConfig, ae_checksum: &str) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(
        Kind::Ddpm,
        &DdpmMeta {
            backbone: model.config.clone(),
            diffusion: diffusion.clone(),
            covariate_stats: model.covariate_stats,
            ae_checksum: ae_checksum.to_string(),
        },
    )?;
    ck.push_params("param.", &model.params);
    Ok(ck)
}

pub fn ddpm_from_checkpoint(
    ck: &Checkpoint,
    expected: &BackboneConfig,
    diffusion: &DiffusionConfig,
) -> Result<(Denoiser, DdpmMeta)> {
    ck.expect_kind(Kind::Ddpm)?;
    let meta: DdpmMeta = ck.meta_as()?;
    if &meta.backbone != expected || &meta.diffusion != diffusion {
        return Err(Error::config("diffusion checkpoint was trained with a different configuration"));
    }
    let model = Denoiser::from_params(meta.backbone.clone(), ck.params("param."), meta.covariate_stats)?;
    Ok((model, meta))
}

/// Which restoration produced a set of outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RestoreMode {
    Cadd,
    Plain,
}

impl RestoreMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RestoreMode::Cadd => "cadd",
            RestoreMode::Plain => "plain",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationMeta {
    restoration: RestorationConfig,
    model_checksum: String,
    mode: RestoreMode,
    grid: Vec<usize>,
}

pub fn calibration_checkpoint(table: &CalibrationTable, mode: RestoreMode) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(
        Kind::Calibration,
        &CalibrationMeta {
            restoration: table.config.clone(),
            model_checksum: table.model_checksum.clone(),
            mode,
            grid: table.config.grid(),
        },
    )?;
    for (u, t) in table.config.grid().iter().zip(&table.thresholds) {
        ck.push(format!("kl_p95.{u}"), t.clone());
    }
    for (prefix, stats) in [("mae", &table.mae_stats), ("wmae", &table.wmae_stats)] {
        if let Some(s) = stats {
            ck.push(format!("{prefix}.mean"), s.mean.clone());
            ck.push(format!("{prefix}.std"), s.std.clone());
        }
    }
    Ok(ck)
}

pub fn calibration_from_checkpoint(ck: &Checkpoint) -> Result<(CalibrationTable, RestoreMode)> {
    ck.expect_kind(Kind::Calibration)?;
    let meta: CalibrationMeta = ck.meta_as()?;
    if meta.grid != meta.restoration.grid() {
        return Err(Error::Calibration("recorded grid disagrees with its restoration settings".into()));
    }
    let thresholds = meta
        .grid
        .iter()
        .map(|u| ck.array(&format!("kl_p95.{u}")).cloned())
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Calibration(e.to_string()))?;
    let stats = |p: &str| -> Option<PixelStats> {
        Some(PixelStats {
            mean: ck.array(&format!("{p}.mean")).ok()?.clone(),
            std: ck.array(&format!("{p}.std")).ok()?.clone(),
        })
    };
    let table = CalibrationTable {
        config: meta.restoration,
        thresholds,
        model_checksum: meta.model_checksum,
        mae_stats: stats("mae"),
        wmae_stats: stats("wmae"),
    };
    table.validate()?;
    Ok((table, meta.mode))
}
