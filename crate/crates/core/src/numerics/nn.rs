//! Layer primitives and their backward passes.
//!
//! The slice-level kernels are what the networks call in their hot loops;
//! the `Array` wrappers (`linear`, `layer_norm`, `attention`) validate
//! shapes and are the public, testable surface.

use super::Array;
use crate::error::{Error, Result};

/// `C = op(A)·op(B) + beta·C` on row-major buffers.
///
/// `A` is `[m,k]` (or `[k,m]` when `ta`), `B` is `[k,n]` (or `[n,k]` when
/// `tb`), `C` is `[m,n]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches given
    // the strides derived from (m, k, n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `y[rows,out] = x[rows,in]·Wᵀ + b`.
pub fn linear_rows(x: &[f64], w: &[f64], b: &[f64], rows: usize, inp: usize, out: usize, y: &mut [f64]) {
    for r in 0..rows {
        y[r * out..(r + 1) * out].copy_from_slice(&b[..out]);
    }
    gemm(rows, inp, out, x, false, w, true, y, 1.0);
}

/// Backward of [`linear_rows`]. Weight and bias gradients are accumulated;
/// `dx` (if requested) is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn linear_rows_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    rows: usize,
    inp: usize,
    out: usize,
    dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: &mut [f64],
) {
    // dW[out,in] += dyᵀ·x
    gemm(out, rows, inp, dy, true, x, false, dw, 1.0);
    for r in 0..rows {
        for (g, d) in db.iter_mut().zip(&dy[r * out..(r + 1) * out]) {
            *g += d;
        }
    }
    if let Some(dx) = dx {
        gemm(rows, out, inp, dy, false, w, false, dx, 0.0);
    }
}

/// Fully connected layer over the trailing axis of `x`.
pub fn linear(weights: &Array, bias: &Array, x: &Array) -> Result<Array> {
    if weights.ndim() != 2 {
        return Err(Error::dim(format!(
            "linear weights must be 2D, got {:?}",
            weights.shape()
        )));
    }
    let (out, inp) = (weights.shape()[0], weights.shape()[1]);
    if bias.shape() != [out] {
        return Err(Error::dim(format!(
            "linear bias {:?} does not match weights {:?}",
            bias.shape(),
            weights.shape()
        )));
    }
    if x.last_dim() != inp || x.ndim() == 0 {
        return Err(Error::dim(format!(
            "linear input {:?} does not match weights {:?}",
            x.shape(),
            weights.shape()
        )));
    }
    let rows = x.len() / inp;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out;
    let mut y = Array::zeros(&shape);
    linear_rows(x.data(), weights.data(), bias.data(), rows, inp, out, y.data_mut());
    Ok(y)
}

/// Normalises each length-`l` row to zero mean and unit variance, writing
/// the normalised values to `y` and the reciprocal std to `rstd`.
pub fn layer_norm_rows(x: &[f64], rows: usize, l: usize, eps: f64, y: &mut [f64], rstd: &mut [f64]) {
    for r in 0..rows {
        let row = &x[r * l..(r + 1) * l];
        let mean = row.iter().sum::<f64>() / l as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / l as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for (o, v) in y[r * l..(r + 1) * l].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
}

/// Backward of [`layer_norm_rows`] given its output `xhat` and `rstd`.
pub fn layer_norm_rows_backward(xhat: &[f64], rstd: &[f64], dy: &[f64], rows: usize, l: usize, dx: &mut [f64]) {
    let lf = l as f64;
    for r in 0..rows {
        let xh = &xhat[r * l..(r + 1) * l];
        let g = &dy[r * l..(r + 1) * l];
        let mean_g = g.iter().sum::<f64>() / lf;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / lf;
        for ((d, &gi), &xi) in dx[r * l..(r + 1) * l].iter_mut().zip(g).zip(xh) {
            *d = rstd[r] * (gi - mean_g - xi * mean_gx);
        }
    }
}

/// Layer normalisation over the trailing axis, without affine parameters.
pub fn layer_norm(x: &Array, eps: f64) -> Array {
    let l = x.last_dim().max(1);
    let rows = x.len() / l;
    let mut y = Array::zeros(x.shape());
    let mut rstd = vec![0.0; rows];
    layer_norm_rows(x.data(), rows, l, eps, y.data_mut(), &mut rstd);
    y
}

/// Scaled dot-product attention for one head over `n` tokens of width `hd`.
/// Writes the output to `o` and the attention probabilities to `p` (`n×n`).
pub fn attention_rows(q: &[f64], k: &[f64], v: &[f64], n: usize, hd: usize, o: &mut [f64], p: &mut [f64]) {
    let scale = 1.0 / (hd as f64).sqrt();
    gemm(n, hd, n, q, false, k, true, p, 0.0);
    for i in 0..n {
        let row = &mut p[i * n..(i + 1) * n];
        let mut max = f64::NEG_INFINITY;
        for s in row.iter_mut() {
            *s *= scale;
            max = max.max(*s);
        }
        let mut sum = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for s in row.iter_mut() {
            *s /= sum;
        }
    }
    gemm(n, n, hd, p, false, v, false, o, 0.0);
}

/// Backward of [`attention_rows`]. `dq`, `dk`, `dv` are overwritten.
/// `scratch` must hold `n×n` values.
#[allow(clippy::too_many_arguments)]
pub fn attention_rows_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    p: &[f64],
    d_o: &[f64],
    n: usize,
    hd: usize,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
    scratch: &mut [f64],
) {
    let scale = 1.0 / (hd as f64).sqrt();
    // dV = Pᵀ·dO
    gemm(n, n, hd, p, true, d_o, false, dv, 0.0);
    // dP = dO·Vᵀ
    let ds = &mut scratch[..n * n];
    gemm(n, hd, n, d_o, false, v, true, ds, 0.0);
    for i in 0..n {
        let pr = &p[i * n..(i + 1) * n];
        let dr = &mut ds[i * n..(i + 1) * n];
        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
        for (d, &pi) in dr.iter_mut().zip(pr) {
            *d = pi * (*d - dot) * scale;
        }
    }
    gemm(n, n, hd, ds, false, k, false, dq, 0.0);
    gemm(n, n, hd, ds, true, q, false, dk, 0.0);
}

/// `softmax(Q·Kᵀ/√L_h)·V` for `[n, L_h]` inputs.
pub fn attention(q: &Array, k: &Array, v: &Array) -> Result<Array> {
    q.ensure_same_shape(k, "attention K")?;
    q.ensure_same_shape(v, "attention V")?;
    if q.ndim() != 2 || q.shape()[1] == 0 {
        return Err(Error::dim(format!(
            "attention expects [n, L_h] with L_h >= 1, got {:?}",
            q.shape()
        )));
    }
    let (n, hd) = (q.shape()[0], q.shape()[1]);
    let mut o = Array::zeros(&[n, hd]);
    let mut p = vec![0.0; n * n];
    attention_rows(q.data(), k.data(), v.data(), n, hd, o.data_mut(), &mut p);
    Ok(o)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Swish / SiLU: `x·σ(x)`.
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}
