//! Voxelwise z-scoring against the healthy validation cohort and the
//! extreme-value subject index.

use crate::error::{Error, Result};
use crate::numerics::Array;

pub const STD_FLOOR: f64 = 1e-6;

/// Per-voxel mean and floored sample standard deviation of a residual map.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelStats {
    pub mean: Array,
    pub std: Array,
}

impl PixelStats {
    pub fn from_maps(maps: &[Array]) -> Result<Self> {
        if maps.len() < 2 {
            return Err(Error::Calibration(format!(
                "pixel statistics need at least 2 maps, got {}",
                maps.len()
            )));
        }
        let shape = maps[0].shape();
        for m in maps {
            m.ensure_shape(shape, "pixel statistics map")?;
        }
        let n = maps.len() as f64;
        let mut mean = Array::zeros(shape);
        for m in maps {
            for (a, v) in mean.data_mut().iter_mut().zip(m.data()) {
                *a += v;
            }
        }
        mean = mean.scale(1.0 / n);
        let mut var = Array::zeros(shape);
        for m in maps {
            for ((a, v), mu) in var.data_mut().iter_mut().zip(m.data()).zip(mean.data()) {
                *a += (v - mu) * (v - mu);
            }
        }
        let std = var.map(|v| (v / (n - 1.0)).sqrt().max(STD_FLOOR));
        Ok(Self { mean, std })
    }
}

/// Signed z-scores on the foreground; background voxels are set to zero and
/// excluded downstream.
pub fn zscore_map(map: &Array, stats: &PixelStats, foreground: &Array) -> Result<Array> {
    map.ensure_same_shape(&stats.mean, "z-score map")?;
    map.ensure_same_shape(foreground, "z-score foreground")?;
    let mut z = Array::zeros(map.shape());
    for i in 0..map.len() {
        if foreground[i] > 0.0 {
            z[i] = (map[i] - stats.mean[i]) / stats.std[i].max(STD_FLOOR);
        }
    }
    Ok(z)
}

/// Mean of the largest `⌈frac·|fg|⌉` foreground z-values.
pub fn evt_index(zmap: &Array, foreground: &Array, frac: f64) -> Result<f64> {
    zmap.ensure_same_shape(foreground, "evt_index")?;
    let mut vals: Vec<f64> = zmap
        .data()
        .iter()
        .zip(foreground.data())
        .filter(|(_, f)| **f > 0.0)
        .map(|(z, _)| *z)
        .collect();
    if vals.is_empty() {
        return Err(Error::config("evt_index: empty foreground"));
    }
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::config(format!("evt_index fraction {frac} outside (0, 1]")));
    }
    let k = ((frac * vals.len() as f64 - 1e-9).ceil() as usize).clamp(1, vals.len());
    let split = vals.len() - k;
    vals.select_nth_unstable_by(split, f64::total_cmp);
    let mut top = vals[split..].to_vec();
    // fixed summation order for reproducibility
    top.sort_by(f64::total_cmp);
    Ok(top.iter().sum::<f64>() / k as f64)
}
