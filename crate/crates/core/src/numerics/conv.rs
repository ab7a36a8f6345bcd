//! 3D convolution and transposed convolution via im2col + GEMM.
//!
//! Feature maps are channels-first `[C, D1, D2, D3]`. Conv weights are
//! `[C_out, C_in, k, k, k]`; transposed-conv weights are
//! `[C_in, C_out, k, k, k]` (the adjoint layout).

use super::nn::gemm;
use super::Array;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn conv_out(&self, n: usize) -> Result<usize> {
        let span = n + 2 * self.pad;
        if span < self.kernel || (span - self.kernel) % self.stride != 0 {
            return Err(Error::dim(format!(
                "axis of length {n} is incompatible with kernel {} stride {} pad {}",
                self.kernel, self.stride, self.pad
            )));
        }
        Ok((span - self.kernel) / self.stride + 1)
    }

    pub fn transpose_out(&self, m: usize) -> Result<usize> {
        let full = (m.max(1) - 1) * self.stride + self.kernel;
        if m == 0 || full < 2 * self.pad {
            return Err(Error::dim(format!("cannot upsample axis of length {m}")));
        }
        Ok(full - 2 * self.pad)
    }
}

fn dims3(a: &Array, what: &str) -> Result<(usize, [usize; 3])> {
    if a.ndim() != 4 {
        return Err(Error::dim(format!("{what}: expected [C, D1, D2, D3], got {:?}", a.shape())));
    }
    let s = a.shape();
    Ok((s[0], [s[1], s[2], s[3]]))
}

/// Gathers `x[c, big]` patches into `col[(c, a, b, e), small]` where
/// `big = small·stride - pad + offset`.
fn im2col(x: &[f64], c: usize, big: [usize; 3], small: [usize; 3], spec: ConvSpec, col: &mut [f64]) {
    let k = spec.kernel;
    let m = small[0] * small[1] * small[2];
    let mut row = 0;
    for ci in 0..c {
        let xc = &x[ci * big[0] * big[1] * big[2]..];
        for a in 0..k {
            for b in 0..k {
                for e in 0..k {
                    let dst = &mut col[row * m..(row + 1) * m];
                    let mut idx = 0;
                    for o1 in 0..small[0] {
                        let i1 = (o1 * spec.stride + a) as isize - spec.pad as isize;
                        for o2 in 0..small[1] {
                            let i2 = (o2 * spec.stride + b) as isize - spec.pad as isize;
                            let valid12 = i1 >= 0 && (i1 as usize) < big[0] && i2 >= 0 && (i2 as usize) < big[1];
                            for o3 in 0..small[2] {
                                let i3 = (o3 * spec.stride + e) as isize - spec.pad as isize;
                                dst[idx] = if valid12 && i3 >= 0 && (i3 as usize) < big[2] {
                                    xc[(i1 as usize * big[1] + i2 as usize) * big[2] + i3 as usize]
                                } else {
                                    0.0
                                };
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `col` back into `x` (which is zeroed first).
fn col2im(col: &[f64], c: usize, big: [usize; 3], small: [usize; 3], spec: ConvSpec, x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = 0.0);
    let k = spec.kernel;
    let m = small[0] * small[1] * small[2];
    let mut row = 0;
    for ci in 0..c {
        let xc = &mut x[ci * big[0] * big[1] * big[2]..];
        for a in 0..k {
            for b in 0..k {
                for e in 0..k {
                    let src = &col[row * m..(row + 1) * m];
                    let mut idx = 0;
                    for o1 in 0..small[0] {
                        let i1 = (o1 * spec.stride + a) as isize - spec.pad as isize;
                        for o2 in 0..small[1] {
                            let i2 = (o2 * spec.stride + b) as isize - spec.pad as isize;
                            let valid12 = i1 >= 0 && (i1 as usize) < big[0] && i2 >= 0 && (i2 as usize) < big[1];
                            for o3 in 0..small[2] {
                                let i3 = (o3 * spec.stride + e) as isize - spec.pad as isize;
                                if valid12 && i3 >= 0 && (i3 as usize) < big[2] {
                                    xc[(i1 as usize * big[1] + i2 as usize) * big[2] + i3 as usize] += src[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn check_weights(w: &Array, first: usize, spec: ConvSpec, what: &str) -> Result<usize> {
    let s = w.shape();
    if s.len() != 5 || s[0] != first || s[2] != spec.kernel || s[3] != spec.kernel || s[4] != spec.kernel {
        return Err(Error::dim(format!("{what}: weight shape {:?} does not fit", s)));
    }
    Ok(s[1])
}

/// Strided 3D convolution. Returns the output and the im2col buffer needed
/// by [`conv3d_backward`].
pub fn conv3d(x: &Array, w: &Array, b: &Array, spec: ConvSpec) -> Result<(Array, Vec<f64>)> {
    let (cin, in_dims) = dims3(x, "conv3d input")?;
    let cout = w.shape().first().copied().unwrap_or(0);
    if check_weights(w, cout, spec, "conv3d")? != cin || b.shape() != [cout] {
        return Err(Error::dim(format!(
            "conv3d: input {:?} / weight {:?} / bias {:?} mismatch",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let out_dims = [
        spec.conv_out(in_dims[0])?,
        spec.conv_out(in_dims[1])?,
        spec.conv_out(in_dims[2])?,
    ];
    let m: usize = out_dims.iter().product();
    let kk = cin * spec.kernel.pow(3);
    let mut col = vec![0.0; kk * m];
    im2col(x.data(), cin, in_dims, out_dims, spec, &mut col);
    let mut y = Array::zeros(&[cout, out_dims[0], out_dims[1], out_dims[2]]);
    for (co, chunk) in y.data_mut().chunks_mut(m).enumerate() {
        chunk.iter_mut().for_each(|v| *v = b[co]);
    }
    gemm(cout, kk, m, w.data(), false, &col, false, y.data_mut(), 1.0);
    Ok((y, col))
}

/// Gradients of [`conv3d`]: `(dx, dw, db)`; `dx` only when requested.
pub fn conv3d_backward(
    x_shape: &[usize],
    col: &[f64],
    w: &Array,
    dy: &Array,
    spec: ConvSpec,
    need_dx: bool,
) -> (Option<Array>, Array, Array) {
    let cin = x_shape[0];
    let in_dims = [x_shape[1], x_shape[2], x_shape[3]];
    let cout = dy.shape()[0];
    let out_dims = [dy.shape()[1], dy.shape()[2], dy.shape()[3]];
    let m: usize = out_dims.iter().product();
    let kk = cin * spec.kernel.pow(3);
    let mut dw = Array::zeros(w.shape());
    gemm(cout, m, kk, dy.data(), false, col, true, dw.data_mut(), 0.0);
    let db = Array::from_vec(dy.data().chunks(m).map(|c| c.iter().sum()).collect());
    let dx = need_dx.then(|| {
        let mut dcol = vec![0.0; kk * m];
        gemm(kk, cout, m, w.data(), true, dy.data(), false, &mut dcol, 0.0);
        let mut dx = Array::zeros(x_shape);
        col2im(&dcol, cin, in_dims, out_dims, spec, dx.data_mut());
        dx
    });
    (dx, dw, db)
}

/// Transposed 3D convolution (the adjoint of [`conv3d`] plus a bias).
pub fn conv_transpose3d(y: &Array, w: &Array, b: &Array, spec: ConvSpec) -> Result<Array> {
    let (cin, in_dims) = dims3(y, "conv_transpose3d input")?;
    let cout = check_weights(w, cin, spec, "conv_transpose3d")?;
    if b.shape() != [cout] {
        return Err(Error::dim(format!("conv_transpose3d: bias {:?} for {} outputs", b.shape(), cout)));
    }
    let out_dims = [
        spec.transpose_out(in_dims[0])?,
        spec.transpose_out(in_dims[1])?,
        spec.transpose_out(in_dims[2])?,
    ];
    let m: usize = in_dims.iter().product();
    let kk = cout * spec.kernel.pow(3);
    let mut col = vec![0.0; kk * m];
    gemm(kk, cin, m, w.data(), true, y.data(), false, &mut col, 0.0);
    let mut out = Array::zeros(&[cout, out_dims[0], out_dims[1], out_dims[2]]);
    col2im(&col, cout, out_dims, in_dims, spec, out.data_mut());
    let n: usize = out_dims.iter().product();
    for (co, chunk) in out.data_mut().chunks_mut(n).enumerate() {
        chunk.iter_mut().for_each(|v| *v += b[co]);
    }
    Ok(out)
}

/// Gradients of [`conv_transpose3d`]: `(dy, dw, db)`.
pub fn conv_transpose3d_backward(
    y: &Array,
    w: &Array,
    dout: &Array,
    spec: ConvSpec,
    need_dy: bool,
) -> (Option<Array>, Array, Array) {
    let cin = y.shape()[0];
    let in_dims = [y.shape()[1], y.shape()[2], y.shape()[3]];
    let cout = dout.shape()[0];
    let out_dims = [dout.shape()[1], dout.shape()[2], dout.shape()[3]];
    let m: usize = in_dims.iter().product();
    let n: usize = out_dims.iter().product();
    let kk = cout * spec.kernel.pow(3);
    let mut g = vec![0.0; kk * m];
    im2col(dout.data(), cout, out_dims, in_dims, spec, &mut g);
    let mut dw = Array::zeros(w.shape());
    gemm(cin, m, kk, y.data(), false, &g, true, dw.data_mut(), 0.0);
    let db = Array::from_vec(dout.data().chunks(n).map(|c| c.iter().sum()).collect());
    let dy = need_dy.then(|| {
        let mut dy = Array::zeros(y.shape());
        gemm(cin, kk, m, w.data(), false, &g, false, dy.data_mut(), 0.0);
        dy
    });
    (dy, dw, db)
}
