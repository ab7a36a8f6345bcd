//! Forward and backward passes over flat row-major buffers.

use super::{block_kind, silu_vec, sinusoidal_embedding, BlockFilter, BlockKind, Denoiser, Dims, LN_EPS};
use crate::error::Result;
use crate::numerics::nn::{
    attention_rows, attention_rows_backward, layer_norm_rows, layer_norm_rows_backward, linear_rows,
    linear_rows_backward, silu_grad,
};
use crate::numerics::{Array, ParamSet};
use crate::phantom::Covariates;

/// `[N, c·p·p]` patch rows; token `k·s + j` holds slice `k`, spatial patch `j`.
pub(crate) fn extract_patches(z: &[f64], dm: &Dims) -> Vec<f64> {
    let mut out = vec![0.0; dm.n * dm.pdim];
    for_each_patch_entry(dm, |tok, e, zi| out[tok * dm.pdim + e] = z[zi]);
    out
}

pub(crate) fn place_patches(rows: &[f64], dm: &Dims) -> Vec<f64> {
    let mut z = vec![0.0; dm.c * dm.h * dm.w * dm.d];
    for_each_patch_entry(dm, |tok, e, zi| z[zi] = rows[tok * dm.pdim + e]);
    z
}

fn for_each_patch_entry(dm: &Dims, mut f: impl FnMut(usize, usize, usize)) {
    let p = dm.p;
    for k in 0..dm.nd {
        for j in 0..dm.s {
            let (ph, pw) = (j / dm.nw, j % dm.nw);
            let tok = k * dm.s + j;
            for ci in 0..dm.c {
                for a in 0..p {
                    for b in 0..p {
                        let (y, x) = (ph * p + a, pw * p + b);
                        let zi = ((ci * dm.h + y) * dm.w + x) * dm.d + k;
                        f(tok, (ci * p + a) * p + b, zi);
                    }
                }
            }
        }
    }
}

/// `(sinusoid, pre-activation, activation, embedding)` of the timestep MLP.
pub(crate) fn time_mlp(p: &ParamSet, t: usize, l: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let sin = sinusoidal_embedding(t as f64, l);
    let mut u = vec![0.0; l];
    linear_rows(&sin, p["temb.fc1.w"].data(), p["temb.fc1.b"].data(), 1, l, l, &mut u);
    let a = silu_vec(&u);
    let mut out = vec![0.0; l];
    linear_rows(&a, p["temb.fc2.w"].data(), p["temb.fc2.b"].data(), 1, l, l, &mut out);
    (sin, u, a, out)
}

/// `(SiLU(cond), modulation vector of length 8L)`.
pub(crate) fn modulation(p: &ParamSet, cond: &[f64], l: usize) -> (Vec<f64>, Vec<f64>) {
    let sc = silu_vec(cond);
    let mut mods = vec![0.0; 8 * l];
    linear_rows(&sc, p["mod.w"].data(), p["mod.b"].data(), 1, l, 8 * l, &mut mods);
    (sc, mods)
}

/// Shared block modulation plus block `b`'s offset:
/// `[shift1, scale1, gate1, shift2, scale2, gate2]`.
pub(crate) fn block_modulation(p: &ParamSet, mods: &[f64], b: usize, l: usize) -> Vec<f64> {
    let off = p[&format!("blocks.{b}.mod_offset")].data();
    mods[..6 * l].iter().zip(off).map(|(a, o)| a + o).collect()
}

/// Full `[q | k | v]` bias with the key part fixed at zero.
fn qkv_bias(qv: &[f64], l: usize) -> Vec<f64> {
    let mut b = vec![0.0; 3 * l];
    b[..l].copy_from_slice(&qv[..l]);
    b[2 * l..].copy_from_slice(&qv[l..]);
    b
}

fn groups(kind: BlockKind, dm: &Dims) -> (usize, usize) {
    match kind {
        BlockKind::Spatial => (dm.nd, dm.s),
        BlockKind::Depth => (dm.s, dm.nd),
    }
}

fn group_token(kind: BlockKind, dm: &Dims, g: usize, i: usize) -> usize {
    match kind {
        BlockKind::Spatial => g * dm.s + i,
        BlockKind::Depth => i * dm.s + g,
    }
}

pub(crate) struct BlockCache {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    h1: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    a: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    h2: Vec<f64>,
    m_pre: Vec<f64>,
    m_act: Vec<f64>,
    m_out: Vec<f64>,
}

fn modulate(xhat: &[f64], shift: &[f64], scale: &[f64], l: usize) -> Vec<f64> {
    let mut out = vec![0.0; xhat.len()];
    for (orow, xrow) in out.chunks_mut(l).zip(xhat.chunks(l)) {
        for i in 0..l {
            orow[i] = xrow[i] * (1.0 + scale[i]) + shift[i];
        }
    }
    out
}

pub(crate) fn block_forward(p: &ParamSet, dm: &Dims, b: usize, m: &[f64], x_in: &[f64]) -> (Vec<f64>, BlockCache) {
    let (n, l, hid, hd) = (dm.n, dm.l, dm.hidden, dm.hd);
    let pre = format!("blocks.{b}");
    let (shift1, scale1, gate1) = (&m[0..l], &m[l..2 * l], &m[2 * l..3 * l]);
    let (shift2, scale2, gate2) = (&m[3 * l..4 * l], &m[4 * l..5 * l], &m[5 * l..6 * l]);

    let mut xhat1 = vec![0.0; n * l];
    let mut rstd1 = vec![0.0; n];
    layer_norm_rows(x_in, n, l, LN_EPS, &mut xhat1, &mut rstd1);
    let h1 = modulate(&xhat1, shift1, scale1, l);
    let mut qkv = vec![0.0; n * 3 * l];
    let bias = qkv_bias(p[&format!("{pre}.qv.b")].data(), l);
    linear_rows(&h1, p[&format!("{pre}.qkv.w")].data(), &bias, n, l, 3 * l, &mut qkv);

    let kind = block_kind(b);
    let (ng, len) = groups(kind, dm);
    let mut probs = vec![0.0; ng * dm.heads * len * len];
    let mut attn = vec![0.0; n * l];
    let (mut qb, mut kb, mut vb, mut ob) = (vec![0.0; len * hd], vec![0.0; len * hd], vec![0.0; len * hd], vec![0.0; len * hd]);
    for g in 0..ng {
        for h in 0..dm.heads {
            for i in 0..len {
                let row = group_token(kind, dm, g, i) * 3 * l + h * hd;
                qb[i * hd..(i + 1) * hd].copy_from_slice(&qkv[row..row + hd]);
                kb[i * hd..(i + 1) * hd].copy_from_slice(&qkv[row + l..row + l + hd]);
                vb[i * hd..(i + 1) * hd].copy_from_slice(&qkv[row + 2 * l..row + 2 * l + hd]);
            }
            let pp = &mut probs[(g * dm.heads + h) * len * len..(g * dm.heads + h + 1) * len * len];
            attention_rows(&qb, &kb, &vb, len, hd, &mut ob, pp);
            for i in 0..len {
                let row = group_token(kind, dm, g, i) * l + h * hd;
                attn[row..row + hd].copy_from_slice(&ob[i * hd..(i + 1) * hd]);
            }
        }
    }
    let mut a = vec![0.0; n * l];
    linear_rows(&attn, p[&format!("{pre}.attn_out.w")].data(), p[&format!("{pre}.attn_out.b")].data(), n, l, l, &mut a);
    let mut x_mid = x_in.to_vec();
    for (r, row) in x_mid.chunks_mut(l).enumerate() {
        for i in 0..l {
            row[i] += gate1[i] * a[r * l + i];
        }
    }

    let mut xhat2 = vec![0.0; n * l];
    let mut rstd2 = vec![0.0; n];
    layer_norm_rows(&x_mid, n, l, LN_EPS, &mut xhat2, &mut rstd2);
    let h2 = modulate(&xhat2, shift2, scale2, l);
    let mut m_pre = vec![0.0; n * hid];
    linear_rows(&h2, p[&format!("{pre}.mlp.fc1.w")].data(), p[&format!("{pre}.mlp.fc1.b")].data(), n, l, hid, &mut m_pre);
    let m_act = silu_vec(&m_pre);
    let mut m_out = vec![0.0; n * l];
    linear_rows(&m_act, p[&format!("{pre}.mlp.fc2.w")].data(), p[&format!("{pre}.mlp.fc2.b")].data(), n, hid, l, &mut m_out);
    let mut x_out = x_mid;
    for (r, row) in x_out.chunks_mut(l).enumerate() {
        for i in 0..l {
            row[i] += gate2[i] * m_out[r * l + i];
        }
    }
    let cache = BlockCache {
        xhat1,
        rstd1,
        h1,
        qkv,
        probs,
        attn,
        a,
        xhat2,
        rstd2,
        h2,
        m_pre,
        m_act,
        m_out,
    };
    (x_out, cache)
}

/// Accumulates `Σ_rows dy ⊙ x` into `out` (length `l`).
fn col_dot(dy: &[f64], x: &[f64], l: usize, out: &mut [f64]) {
    for (dr, xr) in dy.chunks(l).zip(x.chunks(l)) {
        for i in 0..l {
            out[i] += dr[i] * xr[i];
        }
    }
}

fn col_sum(dy: &[f64], l: usize, out: &mut [f64]) {
    for dr in dy.chunks(l) {
        for i in 0..l {
            out[i] += dr[i];
        }
    }
}

/// Backward through one block. Returns `dx_in`; writes `dL/dm` (length 6L)
/// into `dm_out` and accumulates weight gradients into `g`.
fn block_backward(
    p: &ParamSet,
    dm: &Dims,
    b: usize,
    m: &[f64],
    c: &BlockCache,
    dx_out: &[f64],
    g: &mut ParamSet,
    dm_out: &mut [f64],
) -> Vec<f64> {
    let (n, l, hid, hd) = (dm.n, dm.l, dm.hidden, dm.hd);
    let pre = format!("blocks.{b}");
    let (scale1, gate1) = (&m[l..2 * l], &m[2 * l..3 * l]);
    let (scale2, gate2) = (&m[4 * l..5 * l], &m[5 * l..6 * l]);
    dm_out.fill(0.0);

    // MLP branch
    col_dot(dx_out, &c.m_out, l, &mut dm_out[5 * l..6 * l]);
    let mut d_mout = dx_out.to_vec();
    for row in d_mout.chunks_mut(l) {
        for i in 0..l {
            row[i] *= gate2[i];
        }
    }
    let mut d_mact = vec![0.0; n * hid];
    lin_back(p, g, &format!("{pre}.mlp.fc2"), &c.m_act, &d_mout, n, hid, l, Some(&mut d_mact));
    for (d, &x) in d_mact.iter_mut().zip(&c.m_pre) {
        *d *= silu_grad(x);
    }
    let mut d_h2 = vec![0.0; n * l];
    lin_back(p, g, &format!("{pre}.mlp.fc1"), &c.h2, &d_mact, n, l, hid, Some(&mut d_h2));
    col_dot(&d_h2, &c.xhat2, l, &mut dm_out[4 * l..5 * l]);
    col_sum(&d_h2, l, &mut dm_out[3 * l..4 * l]);
    for row in d_h2.chunks_mut(l) {
        for i in 0..l {
            row[i] *= 1.0 + scale2[i];
        }
    }
    let mut d_xmid = vec![0.0; n * l];
    layer_norm_rows_backward(&c.xhat2, &c.rstd2, &d_h2, n, l, &mut d_xmid);
    for (d, o) in d_xmid.iter_mut().zip(dx_out) {
        *d += o;
    }

    // attention branch
    col_dot(&d_xmid, &c.a, l, &mut dm_out[2 * l..3 * l]);
    let mut d_a = d_xmid.clone();
    for row in d_a.chunks_mut(l) {
        for i in 0..l {
            row[i] *= gate1[i];
        }
    }
    let mut d_attn = vec![0.0; n * l];
    lin_back(p, g, &format!("{pre}.attn_out"), &c.attn, &d_a, n, l, l, Some(&mut d_attn));

    let kind = block_kind(b);
    let (ng, len) = groups(kind, dm);
    let mut d_qkv = vec![0.0; n * 3 * l];
    let mut bufs: Vec<Vec<f64>> = (0..7).map(|_| vec![0.0; len * hd]).collect();
    let mut scratch = vec![0.0; len * len];
    for gi in 0..ng {
        for h in 0..dm.heads {
            for i in 0..len {
                let tok = group_token(kind, dm, gi, i);
                let row = tok * 3 * l + h * hd;
                bufs[0][i * hd..(i + 1) * hd].copy_from_slice(&c.qkv[row..row + hd]);
                bufs[1][i * hd..(i + 1) * hd].copy_from_slice(&c.qkv[row + l..row + l + hd]);
                bufs[2][i * hd..(i + 1) * hd].copy_from_slice(&c.qkv[row + 2 * l..row + 2 * l + hd]);
                let orow = tok * l + h * hd;
                bufs[3][i * hd..(i + 1) * hd].copy_from_slice(&d_attn[orow..orow + hd]);
            }
            let pp = &c.probs[(gi * dm.heads + h) * len * len..(gi * dm.heads + h + 1) * len * len];
            let (inp, out) = bufs.split_at_mut(4);
            let (dq, rest) = out.split_at_mut(1);
            let (dk, dv) = rest.split_at_mut(1);
            attention_rows_backward(
                &inp[0], &inp[1], &inp[2], pp, &inp[3], len, hd, &mut dq[0], &mut dk[0], &mut dv[0], &mut scratch,
            );
            for i in 0..len {
                let row = group_token(kind, dm, gi, i) * 3 * l + h * hd;
                d_qkv[row..row + hd].copy_from_slice(&dq[0][i * hd..(i + 1) * hd]);
                d_qkv[row + l..row + l + hd].copy_from_slice(&dk[0][i * hd..(i + 1) * hd]);
                d_qkv[row + 2 * l..row + 2 * l + hd].copy_from_slice(&dv[0][i * hd..(i + 1) * hd]);
            }
        }
    }
    let mut d_h1 = vec![0.0; n * l];
    let wn = format!("{pre}.qkv.w");
    let mut dw = std::mem::take(g.get_mut(&wn).expect("param")).into_data();
    let mut db = vec![0.0; 3 * l];
    linear_rows_backward(&c.h1, p[&wn].data(), &d_qkv, n, l, 3 * l, Some(&mut d_h1), &mut dw, &mut db);
    put(g, &wn, dw, &[3 * l, l]);
    let gqv = g.slot(&format!("{pre}.qv.b"));
    gqv[..l].copy_from_slice(&db[..l]);
    gqv[l..].copy_from_slice(&db[2 * l..]);
    col_dot(&d_h1, &c.xhat1, l, &mut dm_out[l..2 * l]);
    col_sum(&d_h1, l, &mut dm_out[0..l]);
    for row in d_h1.chunks_mut(l) {
        for i in 0..l {
            row[i] *= 1.0 + scale1[i];
        }
    }
    let mut dx_in = vec![0.0; n * l];
    layer_norm_rows_backward(&c.xhat1, &c.rstd1, &d_h1, n, l, &mut dx_in);
    for (d, m) in dx_in.iter_mut().zip(&d_xmid) {
        *d += m;
    }
    dx_in
}

fn put(g: &mut ParamSet, name: &str, data: Vec<f64>, shape: &[usize]) {
    g.insert(name, Array::new(shape, data).expect("gradient shape"));
}

/// Backward of `linear_rows` for the layer named `pre` (`pre.w`, `pre.b`).
#[allow(clippy::too_many_arguments)]
fn lin_back(
    p: &ParamSet,
    g: &mut ParamSet,
    pre: &str,
    x: &[f64],
    dy: &[f64],
    rows: usize,
    inp: usize,
    out: usize,
    dx: Option<&mut [f64]>,
) {
    let (wn, bn) = (format!("{pre}.w"), format!("{pre}.b"));
    let mut dw = std::mem::take(g.get_mut(&wn).expect("param")).into_data();
    let mut db = std::mem::take(g.get_mut(&bn).expect("param")).into_data();
    linear_rows_backward(x, p[&wn].data(), dy, rows, inp, out, dx, &mut dw, &mut db);
    put(g, &wn, dw, &[out, inp]);
    put(g, &bn, db, &[out]);
}

pub struct ForwardCache {
    patches: Vec<f64>,
    sin: Vec<f64>,
    u_t: Vec<f64>,
    a_t: Vec<f64>,
    cov_in: Option<[f64; 2]>,
    cond: Vec<f64>,
    sc: Vec<f64>,
    mods: Vec<f64>,
    block_mods: Vec<Vec<f64>>,
    blocks: Vec<Option<BlockCache>>,
    xhat_f: Vec<f64>,
    rstd_f: Vec<f64>,
    hf: Vec<f64>,
}

pub(crate) fn forward(
    model: &Denoiser,
    z_t: &Array,
    t: usize,
    cov: Option<&Covariates>,
    filter: BlockFilter,
) -> Result<(Array, ForwardCache)> {
    let cfg = &model.config;
    z_t.ensure_shape(&cfg.latent, "denoiser input")?;
    model.check_t(t)?;
    let p = &model.params;
    let dm = cfg.dims();
    let (n, l) = (dm.n, dm.l);

    let patches = extract_patches(z_t.data(), &dm);
    let mut x = vec![0.0; n * l];
    linear_rows(&patches, p["patch.w"].data(), p["patch.b"].data(), n, dm.pdim, l, &mut x);
    for (v, q) in x.iter_mut().zip(p["pos"].data()) {
        *v += q;
    }

    let (sin, u_t, a_t, mut cond) = time_mlp(p, t, l);
    let cov_in = match (cfg.conditioning, cov) {
        (true, Some(c)) => {
            let stats = model
                .covariate_stats
                .ok_or_else(|| crate::Error::Calibration("covariate statistics are missing".into()))?;
            let xin = stats.standardize(c);
            let mut zc = vec![0.0; l];
            linear_rows(&xin, p["cov.w"].data(), p["cov.b"].data(), 1, 2, l, &mut zc);
            for (a, b) in cond.iter_mut().zip(&zc) {
                *a += b;
            }
            Some(xin)
        }
        _ => None,
    };
    let (sc, mods) = modulation(p, &cond, l);

    let mut blocks = Vec::with_capacity(dm.blocks);
    let mut block_mods = Vec::with_capacity(dm.blocks);
    for b in 0..dm.blocks {
        let m = block_modulation(p, &mods, b, l);
        if filter.runs(block_kind(b)) {
            let (out, cache) = block_forward(p, &dm, b, &m, &x);
            x = out;
            blocks.push(Some(cache));
        } else {
            blocks.push(None);
        }
        block_mods.push(m);
    }

    let mut xhat_f = vec![0.0; n * l];
    let mut rstd_f = vec![0.0; n];
    layer_norm_rows(&x, n, l, LN_EPS, &mut xhat_f, &mut rstd_f);
    let hf = modulate(&xhat_f, &mods[6 * l..7 * l], &mods[7 * l..8 * l], l);
    let mut out = vec![0.0; n * dm.pdim];
    linear_rows(&hf, p["head.w"].data(), p["head.b"].data(), n, l, dm.pdim, &mut out);
    let eps = Array::new(&cfg.latent, place_patches(&out, &dm))?;
    Ok((
        eps,
        ForwardCache {
            patches,
            sin,
            u_t,
            a_t,
            cov_in,
            cond,
            sc,
            mods,
            block_mods,
            blocks,
            xhat_f,
            rstd_f,
            hf,
        },
    ))
}

pub(crate) fn backward(model: &Denoiser, c: &ForwardCache, d_eps: &[f64]) -> ParamSet {
    let p = &model.params;
    let dm = model.config.dims();
    let (n, l) = (dm.n, dm.l);
    let mut g = p.zeros_like();
    let mut d_mods = vec![0.0; 8 * l];

    let d_out = extract_patches(d_eps, &dm);
    let mut d_hf = vec![0.0; n * l];
    lin_back(p, &mut g, "head", &c.hf, &d_out, n, l, dm.pdim, Some(&mut d_hf));
    col_sum(&d_hf, l, &mut d_mods[6 * l..7 * l]);
    col_dot(&d_hf, &c.xhat_f, l, &mut d_mods[7 * l..8 * l]);
    let scale_f = &c.mods[7 * l..8 * l];
    for row in d_hf.chunks_mut(l) {
        for i in 0..l {
            row[i] *= 1.0 + scale_f[i];
        }
    }
    let mut dx = vec![0.0; n * l];
    layer_norm_rows_backward(&c.xhat_f, &c.rstd_f, &d_hf, n, l, &mut dx);

    let mut dm_b = vec![0.0; 6 * l];
    for b in (0..dm.blocks).rev() {
        let Some(bc) = &c.blocks[b] else { continue };
        dx = block_backward(p, &dm, b, &c.block_mods[b], bc, &dx, &mut g, &mut dm_b);
        for (a, v) in g.slot(&format!("blocks.{b}.mod_offset")).iter_mut().zip(&dm_b) {
            *a += v;
        }
        for (a, v) in d_mods[..6 * l].iter_mut().zip(&dm_b) {
            *a += v;
        }
    }

    // embedding
    for (a, v) in g.slot("pos").iter_mut().zip(&dx) {
        *a += v;
    }
    lin_back(p, &mut g, "patch", &c.patches, &dx, n, dm.pdim, l, None);

    // modulation network and conditioning
    let mut d_sc = vec![0.0; l];
    lin_back(p, &mut g, "mod", &c.sc, &d_mods, 1, l, 8 * l, Some(&mut d_sc));
    let d_cond: Vec<f64> = d_sc.iter().zip(&c.cond).map(|(d, &x)| d * silu_grad(x)).collect();
    let mut d_a = vec![0.0; l];
    lin_back(p, &mut g, "temb.fc2", &c.a_t, &d_cond, 1, l, l, Some(&mut d_a));
    let d_u: Vec<f64> = d_a.iter().zip(&c.u_t).map(|(d, &x)| d * silu_grad(x)).collect();
    lin_back(p, &mut g, "temb.fc1", &c.sin, &d_u, 1, l, l, None);
    if let Some(xin) = &c.cov_in {
        lin_back(p, &mut g, "cov", xin, &d_cond, 1, 2, l, None);
    }
    g
}
