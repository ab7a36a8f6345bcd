//! Voxelwise residuals and whole-volume similarity.

use crate::error::{Error, Result};
use crate::numerics::Array;

pub const SSIM_WINDOW: usize = 7;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMaps {
    pub mae_map: Array,
    /// `mae_map · (1 − SSIM)`.
    pub wmae_map: Array,
    pub mae: f64,
    /// `+∞` for identical inputs.
    pub psnr: f64,
    pub ssim: f64,
}

pub fn residual_maps(x: &Array, xhat: &Array) -> Result<ResidualMaps> {
    x.ensure_same_shape(xhat, "residual_maps")?;
    let mae_map = x.zip_map(xhat, |a, b| (a - b).abs())?;
    let s = ssim(x, xhat)?;
    let wmae_map = mae_map.scale(1.0 - s);
    Ok(ResidualMaps {
        mae: mae_map.mean(),
        psnr: psnr(x, xhat)?,
        ssim: s,
        mae_map,
        wmae_map,
    })
}

/// `−10·log10(MSE)` for data on `[0, 1]`.
pub fn psnr(x: &Array, y: &Array) -> Result<f64> {
    x.ensure_same_shape(y, "psnr")?;
    let mse = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len().max(1) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Summed-volume table with a zero border: `t[i+1][j+1][k+1] = Σ v[..=i][..=j][..=k]`.
fn integral(v: &[f64], n: [usize; 3]) -> Vec<f64> {
    let (a, b, c) = (n[0] + 1, n[1] + 1, n[2] + 1);
    let mut t = vec![0.0; a * b * c];
    for i in 0..n[0] {
        for j in 0..n[1] {
            let mut row = 0.0;
            for k in 0..n[2] {
                row += v[(i * n[1] + j) * n[2] + k];
                let o = ((i + 1) * b + j + 1) * c + k + 1;
                t[o] = row + t[o - c] + t[o - b * c] - t[o - b * c - c];
            }
        }
    }
    t
}

fn box_sum(t: &[f64], n: [usize; 3], at: [usize; 3], w: [usize; 3]) -> f64 {
    let (b, c) = (n[1] + 1, n[2] + 1);
    let idx = |i: usize, j: usize, k: usize| (i * b + j) * c + k;
    let (i0, j0, k0) = (at[0], at[1], at[2]);
    let (i1, j1, k1) = (i0 + w[0], j0 + w[1], k0 + w[2]);
    t[idx(i1, j1, k1)] - t[idx(i0, j1, k1)] - t[idx(i1, j0, k1)] - t[idx(i1, j1, k0)]
        + t[idx(i0, j0, k1)]
        + t[idx(i0, j1, k0)]
        + t[idx(i1, j0, k0)]
        - t[idx(i0, j0, k0)]
}

/// Mean SSIM over every valid `7³` uniform window (smaller axes use the
/// full extent), with population window statistics.
pub fn ssim(x: &Array, y: &Array) -> Result<f64> {
    x.ensure_same_shape(y, "ssim")?;
    if x.ndim() != 3 || x.is_empty() {
        return Err(Error::dim(format!("ssim expects a 3D volume, got {:?}", x.shape())));
    }
    let n = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let w = n.map(|d| d.min(SSIM_WINDOW));
    let xy: Vec<f64> = x.data().iter().zip(y.data()).map(|(a, b)| a * b).collect();
    let xx: Vec<f64> = x.data().iter().map(|a| a * a).collect();
    let yy: Vec<f64> = y.data().iter().map(|a| a * a).collect();
    let tables = [x.data(), y.data(), &xx[..], &yy[..], &xy[..]].map(|v| integral(v, n));
    let inv = 1.0 / (w[0] * w[1] * w[2]) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=n[0] - w[0] {
        for j in 0..=n[1] - w[1] {
            for k in 0..=n[2] - w[2] {
                let s = tables.each_ref().map(|t| box_sum(t, n, [i, j, k], w) * inv);
                let (mx, my) = (s[0], s[1]);
                let vx = s[2] - mx * mx;
                let vy = s[3] - my * my;
                let cxy = s[4] - mx * my;
                total += ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
