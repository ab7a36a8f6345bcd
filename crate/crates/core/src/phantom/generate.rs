use super::Covariates;
use crate::error::{Error, Result};
use crate::numerics::{Array, RngStream};

pub const SUPPORTED_SIZES: [usize; 3] = [16, 32, 64];

const AGE_REF: f64 = 45.0;
/// Ventricle radius (normalised units) at the reference age and its growth
/// per year.
const VENTRICLE_R0: f64 = 0.10;
const VENTRICLE_SLOPE: f64 = 0.005;
const VENTRICLE_LEVEL: f64 = 0.12;
const SEX_OFFSET: f64 = 0.04;
const TEXTURE_WAVES: usize = 6;
const TEXTURE_AMPLITUDE: f64 = 0.012;
/// Voxels inside this normalised ellipsoid radius are the "central region".
const CENTRAL_RADIUS: f64 = 0.6;
const VENTRICLE_THRESHOLD: f64 = 0.3;

/// Generates a healthy phantom of shape `[size, size, size]`.
///
/// An ellipsoidal brain of smooth tissue intensity sits on an exactly-zero
/// background. A dark central ventricle grows linearly with age, sex shifts
/// the tissue intensity globally, and a few low-frequency waves drawn from
/// `rng` give every subject its own texture.
pub fn generate_phantom(cov: Covariates, size: usize, rng: &mut RngStream) -> Result<Array> {
    if !SUPPORTED_SIZES.contains(&size) {
        return Err(Error::config(format!(
            "unsupported phantom size {size}; expected one of {SUPPORTED_SIZES:?}"
        )));
    }
    if cov.sex > 1 || !cov.age.is_finite() {
        return Err(Error::Input(format!("invalid covariates {cov:?}")));
    }
    let axes = [0.78, 0.68, 0.62].map(|a| a * (1.0 + 0.03 * rng.uniform_range(-1.0, 1.0)));
    let centre = [0; 3].map(|_| 0.02 * rng.uniform_range(-1.0, 1.0));
    let waves: Vec<([f64; 3], f64)> = (0..TEXTURE_WAVES)
        .map(|_| {
            let dir = [rng.normal(), rng.normal(), rng.normal()];
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
            let freq = rng.uniform_range(1.5, 3.0) * std::f64::consts::PI;
            (dir.map(|d| d / norm * freq), rng.uniform_range(0.0, std::f64::consts::TAU))
        })
        .collect();

    let rv = VENTRICLE_R0 + VENTRICLE_SLOPE * (cov.age - AGE_REF);
    let v_axes = [1.4 * rv, rv, 0.9 * rv];
    let offset = if cov.sex == 1 { SEX_OFFSET } else { -SEX_OFFSET };

    let mut vol = Array::zeros(&[size, size, size]);
    let coord = |i: usize| (i as f64 + 0.5) / size as f64 * 2.0 - 1.0;
    let data = vol.data_mut();
    for i in 0..size {
        for j in 0..size {
            for k in 0..size {
                let p = [coord(i) - centre[0], coord(j) - centre[1], coord(k) - centre[2]];
                let r2: f64 = (0..3).map(|a| (p[a] / axes[a]).powi(2)).sum();
                if r2 > 1.0 {
                    continue;
                }
                let texture: f64 = waves
                    .iter()
                    .map(|(f, phase)| (f[0] * p[0] + f[1] * p[1] + f[2] * p[2] + phase).cos())
                    .sum::<f64>()
                    * TEXTURE_AMPLITUDE;
                let v2: f64 = (0..3).map(|a| (p[a] / v_axes[a]).powi(2)).sum();
                let value = if v2 <= 1.0 {
                    VENTRICLE_LEVEL + 0.3 * texture
                } else {
                    0.55 + 0.15 * r2 + offset + texture
                };
                data[(i * size + j) * size + k] = value.clamp(0.0, 1.0);
            }
        }
    }
    Ok(vol)
}

/// Number of voxels in the central region darker than tissue. This is the
/// ventricle size readout.
pub fn ventricle_voxels(vol: &Array) -> usize {
    let s = vol.shape();
    let mut count = 0;
    for i in 0..s[0] {
        for j in 0..s[1] {
            for k in 0..s[2] {
                let p = [i, j, k]
                    .iter()
                    .zip(s)
                    .map(|(&x, &n)| ((x as f64 + 0.5) / n as f64 * 2.0 - 1.0).powi(2))
                    .sum::<f64>();
                let v = vol.data()[(i * s[1] + j) * s[2] + k];
                if p.sqrt() < CENTRAL_RADIUS && v > 0.0 && v < VENTRICLE_THRESHOLD {
                    count += 1;
                }
            }
        }
    }
    count
}

/// Peak intensity shift of a lesion blob.
pub fn shift_magnitude(severity: f64) -> f64 {
    0.15 + 0.35 * severity
}

/// Blob radius in voxels for a volume whose smallest axis is `size`.
pub fn blob_radius(severity: f64, size: usize) -> f64 {
    (0.08 + 0.12 * severity) * size as f64
}

const MASK_LEVEL: f64 = 0.05;

/// A smooth compact bump `amplitude·(1 − (d/r)²)²` for `d < r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub centre: [f64; 3],
    pub radius: f64,
    pub amplitude: f64,
}

impl Blob {
    fn shift_at(&self, p: [f64; 3]) -> f64 {
        let d2: f64 = (0..3).map(|a| (p[a] - self.centre[a]).powi(2)).sum();
        let q = d2 / (self.radius * self.radius);
        if q >= 1.0 {
            0.0
        } else {
            self.amplitude * (1.0 - q).powi(2)
        }
    }
}

/// Adds the summed blob field where its magnitude exceeds 0.05 and returns
/// the modified volume with that support as a binary mask. Voxels outside
/// the mask are untouched.
pub fn apply_blobs(volume: &Array, blobs: &[Blob]) -> (Array, Array) {
    let s = volume.shape().to_vec();
    let mut out = volume.clone();
    let mut mask = Array::zeros(&s);
    for i in 0..s[0] {
        for j in 0..s[1] {
            for k in 0..s[2] {
                let p = [i as f64, j as f64, k as f64];
                let shift: f64 = blobs.iter().map(|b| b.shift_at(p)).sum();
                if shift.abs() > MASK_LEVEL {
                    let o = (i * s[1] + j) * s[2] + k;
                    out[o] = (out[o] + shift).clamp(0.0, 1.0);
                    mask[o] = 1.0;
                }
            }
        }
    }
    (out, mask)
}

/// Injects 1–3 smooth lesion blobs into the foreground of a 3D volume.
pub fn inject_anomaly(volume: &Array, severity: f64, rng: &mut RngStream) -> Result<(Array, Array)> {
    if !(severity > 0.0 && severity <= 1.0) {
        return Err(Error::Input(format!("severity {severity} outside (0, 1]")));
    }
    if volume.ndim() != 3 {
        return Err(Error::dim(format!("expected a 3D volume, got {:?}", volume.shape())));
    }
    let s = volume.shape().to_vec();
    let size = *s.iter().min().unwrap();
    let radius = blob_radius(severity, size);
    let reach = (radius / 2.0).ceil() as isize;
    let fg = |i: isize, j: isize, k: isize| -> bool {
        i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < s[0]
            && (j as usize) < s[1]
            && (k as usize) < s[2]
            && volume.data()[(i as usize * s[1] + j as usize) * s[2] + k as usize] > 0.0
    };
    let mut interior = Vec::new();
    let mut any = Vec::new();
    for i in 0..s[0] as isize {
        for j in 0..s[1] as isize {
            for k in 0..s[2] as isize {
                if !fg(i, j, k) {
                    continue;
                }
                any.push([i, j, k]);
                let deep = [(reach, 0, 0), (0, reach, 0), (0, 0, reach)]
                    .iter()
                    .all(|&(a, b, c)| fg(i + a, j + b, k + c) && fg(i - a, j - b, k - c));
                if deep {
                    interior.push([i, j, k]);
                }
            }
        }
    }
    let candidates = if interior.is_empty() { &any } else { &interior };
    if candidates.is_empty() {
        return Err(Error::Input("volume has no foreground to place a lesion in".into()));
    }
    let magnitude = shift_magnitude(severity);
    // Opposite-signed blobs can cancel; redraw until the mask is non-empty.
    loop {
        let n_blobs = 1 + rng.index(3);
        let blobs: Vec<Blob> = (0..n_blobs)
            .map(|_| {
                let c = candidates[rng.index(candidates.len())];
                let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                Blob {
                    centre: c.map(|v| v as f64),
                    radius,
                    amplitude: sign * magnitude,
                }
            })
            .collect();
        let (out, mask) = apply_blobs(volume, &blobs);
        if mask.sum() > 0.0 {
            return Ok((out, mask));
        }
    }
}
