//! KL-regularised convolutional autoencoder mapping `[1, N, N, N]` volumes to
//! `[c, N/f, N/f, N/f]` latents, plus an identity-bypass mode in which the
//! latent is the image itself.
//!
//! Encoder: strided `k4 s2 p1` convolutions with SiLU, then 1×1 heads for the
//! mean and log-variance. Decoder: 1×1 input projection, transposed `k4 s2 p1`
//! convolutions with SiLU in between, sigmoid output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::conv::{conv3d, conv3d_backward, conv_transpose3d, conv_transpose3d_backward, ConvSpec};
use crate::numerics::nn::{sigmoid, silu, silu_grad};
use crate::numerics::{label_key, stream_id, Array, ParamSet, RngStream};
use crate::phantom::{read_volume, Cohort, CohortManifest};
use crate::training::{fit, LogRow, TrainConfig};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

const DOWN: ConvSpec = ConvSpec { kernel: 4, stride: 2, pad: 1 };
const POINT: ConvSpec = ConvSpec { kernel: 1, stride: 1, pad: 0 };

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeConfig {
    pub image_size: usize,
    /// Encoder widths; each entry adds one factor-2 downsampling stage.
    pub channels: Vec<usize>,
    pub latent_channels: usize,
    pub kl_weight: f64,
    /// Bypass: latent = image, no parameters.
    pub identity: bool,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: vec![16, 32],
            latent_channels: 3,
            kl_weight: 1e-4,
            identity: false,
        }
    }
}

impl AeConfig {
    pub fn identity(image_size: usize) -> Self {
        Self {
            image_size,
            identity: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::config("image_size must be positive"));
        }
        if self.identity {
            return Ok(());
        }
        let f = 1usize << self.channels.len();
        if self.channels.is_empty() || self.channels.contains(&0) || self.latent_channels == 0 {
            return Err(Error::config("autoencoder widths must be positive and non-empty"));
        }
        if self.image_size % f != 0 {
            return Err(Error::config(format!(
                "image size {} is not divisible by downsample factor {f}",
                self.image_size
            )));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::config("kl_weight must be non-negative"));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let n = self.image_size;
        [n, n, n]
    }

    fn channel_shape(&self) -> [usize; 4] {
        let n = self.image_size;
        [1, n, n, n]
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        if self.identity {
            return self.channel_shape();
        }
        let m = self.image_size >> self.channels.len();
        [self.latent_channels, m, m, m]
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        if self.identity {
            return out;
        }
        let ch = &self.channels;
        let n = ch.len();
        let c_last = ch[n - 1];
        let lc = self.latent_channels;
        for i in 0..n {
            let cin = if i == 0 { 1 } else { ch[i - 1] };
            out.push((format!("enc.{i}.w"), vec![ch[i], cin, 4, 4, 4]));
            out.push((format!("enc.{i}.b"), vec![ch[i]]));
        }
        for head in ["mu", "logvar"] {
            out.push((format!("enc.{head}.w"), vec![lc, c_last, 1, 1, 1]));
            out.push((format!("enc.{head}.b"), vec![lc]));
        }
        out.push(("dec.in.w".into(), vec![c_last, lc, 1, 1, 1]));
        out.push(("dec.in.b".into(), vec![c_last]));
        for j in 0..n {
            let cin = ch[n - 1 - j];
            let cout = if j + 1 == n { 1 } else { ch[n - 2 - j] };
            out.push((format!("dec.{j}.w"), vec![cin, cout, 4, 4, 4]));
            out.push((format!("dec.{j}.b"), vec![cout]));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodeMode {
    Sample,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AeModel {
    pub config: AeConfig,
    pub params: ParamSet,
    /// Multiplier taking mean-encoded latents to unit variance.
    pub latent_scale: f64,
}

struct Cache {
    enc_in: Vec<Array>,
    enc_col: Vec<Vec<f64>>,
    enc_pre: Vec<Array>,
    head_col: Vec<f64>,
    head_in_shape: Vec<usize>,
    mu: Array,
    logvar_raw: Array,
    logvar: Array,
    eps: Option<Array>,
    z: Array,
    dec_in_col: Vec<f64>,
    dec_in_pre: Array,
    dec_in: Vec<Array>,
    dec_pre: Vec<Array>,
    xhat: Array,
}

impl AeModel {
    pub fn init(config: AeConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in config.param_shapes() {
            let numel: usize = shape.iter().product();
            let mut a = Array::zeros(&shape);
            if name.ends_with(".w") && !name.starts_with("enc.logvar") {
                let fan_in = if name.starts_with("dec.") && !name.starts_with("dec.in") {
                    // transposed k4 s2: each output sees cin·2³ taps
                    shape[0] * 8
                } else {
                    numel / shape[0]
                };
                let gain = if name.starts_with("enc.mu") || is_last_decoder(&config, &name) { 1.0 } else { 2.0 };
                let sd = (gain / fan_in as f64).sqrt();
                for v in a.data_mut() {
                    *v = sd * rng.normal();
                }
            }
            if name == "enc.logvar.b" {
                a.data_mut().iter_mut().for_each(|v| *v = -4.0);
            }
            params.insert(name, a);
        }
        Ok(Self {
            config,
            params,
            latent_scale: 1.0,
        })
    }

    pub fn from_params(config: AeConfig, params: ParamSet, latent_scale: f64) -> Result<Self> {
        config.validate()?;
        params.validate(&config.param_shapes())?;
        if !(latent_scale.is_finite() && latent_scale > 0.0) {
            return Err(Error::config(format!("latent scale must be positive, got {latent_scale}")));
        }
        Ok(Self {
            config,
            params,
            latent_scale,
        })
    }

    pub fn identity(image_size: usize) -> Self {
        Self {
            config: AeConfig::identity(image_size),
            params: ParamSet::new(),
            latent_scale: 1.0,
        }
    }

    pub fn encode(&self, x: &Array, mode: EncodeMode, rng: &mut RngStream) -> Result<Array> {
        x.ensure_shape(&self.config.image_shape(), "encode input")?;
        let x = x.clone().reshape(&self.config.channel_shape())?;
        if self.config.identity {
            return Ok(x);
        }
        let eps = match mode {
            EncodeMode::Mean => None,
            EncodeMode::Sample => Some(rng.normal_array(&self.config.latent_shape())),
        };
        Ok(self.forward_encoder(&x, eps)?.z)
    }

    pub fn encode_mean(&self, x: &Array) -> Result<Array> {
        self.encode(x, EncodeMode::Mean, &mut RngStream::new(0, 0))
    }

    pub fn decode(&self, z: &Array) -> Result<Array> {
        z.ensure_shape(&self.config.latent_shape(), "decode input")?;
        let xhat = if self.config.identity {
            z.clone()
        } else {
            self.forward_decoder(z)?.4
        };
        xhat.reshape(&self.config.image_shape())
    }

    /// Scaled mean latent used by the diffusion stage.
    pub fn to_latent(&self, x: &Array) -> Result<Array> {
        Ok(self.encode_mean(x)?.scale(self.latent_scale))
    }

    pub fn from_latent(&self, z: &Array) -> Result<Array> {
        self.decode(&z.scale(1.0 / self.latent_scale))
    }

    fn forward_encoder(&self, x: &Array, eps: Option<Array>) -> Result<Cache> {
        let p = &self.params;
        let n = self.config.channels.len();
        let mut enc_in = Vec::with_capacity(n);
        let mut enc_col = Vec::with_capacity(n);
        let mut enc_pre = Vec::with_capacity(n);
        let mut h = x.clone();
        for i in 0..n {
            let (pre, col) = conv3d(&h, &p[&format!("enc.{i}.w")], &p[&format!("enc.{i}.b")], DOWN)?;
            let next = pre.map(silu);
            enc_in.push(h);
            enc_col.push(col);
            enc_pre.push(pre);
            h = next;
        }
        let (mu, head_col) = conv3d(&h, &p["enc.mu.w"], &p["enc.mu.b"], POINT)?;
        let (logvar_raw, _) = conv3d(&h, &p["enc.logvar.w"], &p["enc.logvar.b"], POINT)?;
        let logvar = logvar_raw.map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        let z = match &eps {
            Some(e) => {
                let mut z = mu.clone();
                for ((zv, lv), ev) in z.data_mut().iter_mut().zip(logvar.data()).zip(e.data()) {
                    *zv += (0.5 * lv).exp() * ev;
                }
                z
            }
            None => mu.clone(),
        };
        Ok(Cache {
            enc_in,
            enc_col,
            enc_pre,
            head_col,
            head_in_shape: h.shape().to_vec(),
            mu,
            logvar_raw,
            logvar,
            eps,
            z,
            dec_in_col: Vec::new(),
            dec_in_pre: Array::zeros(&[0]),
            dec_in: Vec::new(),
            dec_pre: Vec::new(),
            xhat: Array::zeros(&[0]),
        })
    }

    #[allow(clippy::type_complexity)]
    fn forward_decoder(&self, z: &Array) -> Result<(Vec<f64>, Array, Vec<Array>, Vec<Array>, Array)> {
        let p = &self.params;
        let n = self.config.channels.len();
        let (dec_in_pre, dec_in_col) = conv3d(z, &p["dec.in.w"], &p["dec.in.b"], POINT)?;
        let mut h = dec_in_pre.map(silu);
        let mut dec_in = Vec::with_capacity(n);
        let mut dec_pre = Vec::with_capacity(n);
        for j in 0..n {
            let pre = conv_transpose3d(&h, &p[&format!("dec.{j}.w")], &p[&format!("dec.{j}.b")], DOWN)?;
            let next = if j + 1 == n { pre.map(sigmoid) } else { pre.map(silu) };
            dec_in.push(h);
            dec_pre.push(pre);
            h = next;
        }
        Ok((dec_in_col, dec_in_pre, dec_in, dec_pre, h))
    }

    fn forward(&self, x: &Array, eps: Option<Array>) -> Result<Cache> {
        x.ensure_shape(&self.config.image_shape(), "autoencoder input")?;
        let x = x.clone().reshape(&self.config.channel_shape())?;
        let mut c = self.forward_encoder(&x, eps)?;
        let (col, pre, dec_in, dec_pre, xhat) = self.forward_decoder(&c.z)?;
        c.dec_in_col = col;
        c.dec_in_pre = pre;
        c.dec_in = dec_in;
        c.dec_pre = dec_pre;
        c.xhat = xhat;
        Ok(c)
    }

    /// Training loss with the reparameterisation noise `eps` (`None` = mean mode).
    pub fn loss(&self, x: &Array, eps: Option<Array>) -> Result<f64> {
        if self.config.identity {
            return Ok(0.0);
        }
        let c = self.forward(x, eps)?;
        ae_loss(x.data(), c.xhat.data(), &c.mu, &c.logvar, self.config.kl_weight)
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, x: &Array, eps: Option<Array>) -> Result<(f64, ParamSet)> {
        if self.config.identity {
            return Ok((0.0, ParamSet::new()));
        }
        let c = self.forward(x, eps)?;
        let kw = self.config.kl_weight;
        let loss = ae_loss(x.data(), c.xhat.data(), &c.mu, &c.logvar, kw)?;
        let p = &self.params;
        let mut g = p.zeros_like();
        let n = self.config.channels.len();

        let nx = x.len() as f64;
        let mut d = c.xhat.clone();
        for (dv, xv) in d.data_mut().iter_mut().zip(x.data()) {
            *dv = sign(*dv - xv) / nx;
        }
        for (dv, xh) in d.data_mut().iter_mut().zip(c.xhat.data()) {
            *dv *= xh * (1.0 - xh);
        }
        for j in (0..n).rev() {
            let (dh, dw, db) = conv_transpose3d_backward(&c.dec_in[j], &p[&format!("dec.{j}.w")], &d, DOWN, true);
            g.slot(&format!("dec.{j}.w")).copy_from_slice(dw.data());
            g.slot(&format!("dec.{j}.b")).copy_from_slice(db.data());
            let mut dh = dh.expect("requested");
            let pre = if j > 0 { &c.dec_pre[j - 1] } else { &c.dec_in_pre };
            for (dv, pv) in dh.data_mut().iter_mut().zip(pre.data()) {
                *dv *= silu_grad(*pv);
            }
            d = dh;
        }
        let (dz, dw, db) = conv3d_backward(c.z.shape(), &c.dec_in_col, &p["dec.in.w"], &d, POINT, true);
        g.slot("dec.in.w").copy_from_slice(dw.data());
        g.slot("dec.in.b").copy_from_slice(db.data());
        let dz = dz.expect("requested");

        let nz = c.mu.len() as f64;
        let mut dmu = dz.clone();
        let mut dlv = Array::zeros(c.mu.shape());
        for i in 0..dmu.len() {
            let (m, lv) = (c.mu[i], c.logvar[i]);
            dmu[i] += kw * m / nz;
            let mut gl = kw * 0.5 * (lv.exp() - 1.0) / nz;
            if let Some(e) = &c.eps {
                gl += dz[i] * e[i] * 0.5 * (0.5 * lv).exp();
            }
            let raw = c.logvar_raw[i];
            dlv[i] = if raw > LOGVAR_MIN && raw < LOGVAR_MAX { gl } else { 0.0 };
        }
        let (dh_mu, dw, db) = conv3d_backward(&c.head_in_shape, &c.head_col, &p["enc.mu.w"], &dmu, POINT, true);
        g.slot("enc.mu.w").copy_from_slice(dw.data());
        g.slot("enc.mu.b").copy_from_slice(db.data());
        let (dh_lv, dw, db) = conv3d_backward(&c.head_in_shape, &c.head_col, &p["enc.logvar.w"], &dlv, POINT, true);
        g.slot("enc.logvar.w").copy_from_slice(dw.data());
        g.slot("enc.logvar.b").copy_from_slice(db.data());
        let mut dh = dh_mu.expect("requested").add(&dh_lv.expect("requested"))?;

        for i in (0..n).rev() {
            for (dv, pv) in dh.data_mut().iter_mut().zip(c.enc_pre[i].data()) {
                *dv *= silu_grad(*pv);
            }
            let (dx, dw, db) = conv3d_backward(
                c.enc_in[i].shape(),
                &c.enc_col[i],
                &p[&format!("enc.{i}.w")],
                &dh,
                DOWN,
                i > 0,
            );
            g.slot(&format!("enc.{i}.w")).copy_from_slice(dw.data());
            g.slot(&format!("enc.{i}.b")).copy_from_slice(db.data());
            if let Some(dx) = dx {
                dh = dx;
            }
        }
        Ok((loss, g))
    }
}

fn is_last_decoder(cfg: &AeConfig, name: &str) -> bool {
    name == format!("dec.{}.w", cfg.channels.len() - 1)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute reconstruction error plus `kl_weight` times the mean
/// per-element KL of `N(μ, e^logvar)` from the standard normal.
pub fn ae_loss(x: &[f64], xhat: &[f64], mu: &Array, logvar: &Array, kl_weight: f64) -> Result<f64> {
    if x.len() != xhat.len() {
        return Err(Error::dim(format!(
            "ae_loss: {} image elements vs {} reconstructed",
            x.len(),
            xhat.len()
        )));
    }
    mu.ensure_same_shape(logvar, "ae_loss latent")?;
    let rec = x.iter().zip(xhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len().max(1) as f64;
    Ok(rec + kl_weight * kl_term(mu, logvar))
}

/// Mean over elements of `½(μ² + e^logvar − 1 − logvar)`.
pub fn kl_term(mu: &Array, logvar: &Array) -> f64 {
    let s: f64 = mu
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum();
    s / mu.len().max(1) as f64
}

/// Loads every volume of a cohort in manifest order.
pub fn load_cohort(manifest: &CohortManifest, cohort: Cohort) -> Result<Vec<Array>> {
    manifest
        .cohort(cohort)
        .map(|row| read_volume(&manifest.resolve(&row.path)))
        .collect()
}

/// Trains the autoencoder with Adam and early stopping on the validation
/// loss, then fixes the latent scale from the mean-encoded training set.
pub fn train_ae(
    manifest: &CohortManifest,
    config: &AeConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(AeModel, Vec<LogRow>)> {
    config.validate()?;
    let train_x = load_cohort(manifest, Cohort::Train)?;
    let val_x = load_cohort(manifest, Cohort::Validation)?;
    if train_x.is_empty() || val_x.is_empty() {
        return Err(Error::config("autoencoder training needs non-empty train and validation cohorts"));
    }
    if config.identity {
        let mut model = AeModel::identity(config.image_size);
        model.latent_scale = latent_scale(&model, &train_x)?;
        return Ok((model, Vec::new()));
    }
    let mut init_rng = RngStream::new(seed, stream_id(&[label_key("ae-init")]));
    let base = AeModel::init(config.clone(), &mut init_rng)?;
    let shape = config.latent_shape();
    let bs = train.batch_size;
    let outcome = fit(
        base.params.clone(),
        train,
        |params, step| {
            let mut rng = RngStream::new(seed, stream_id(&[label_key("ae-batch"), step as u64]));
            let model = AeModel { params: params.clone(), ..base.clone() };
            let mut total = 0.0;
            let mut grads = params.zeros_like();
            for _ in 0..bs {
                let x = &train_x[rng.index(train_x.len())];
                let eps = rng.normal_array(&shape);
                let (l, g) = model.loss_and_grad(x, Some(eps))?;
                total += l;
                grads.add_assign(&g)?;
            }
            grads.scale_all(1.0 / bs as f64);
            Ok((total / bs as f64, grads))
        },
        |params| {
            let model = AeModel { params: params.clone(), ..base.clone() };
            let mut total = 0.0;
            for x in &val_x {
                total += model.loss(x, None)?;
            }
            Ok(total / val_x.len() as f64)
        },
    )?;
    let mut model = AeModel::from_params(config.clone(), outcome.best, 1.0)?;
    model.latent_scale = latent_scale(&model, &train_x)?;
    Ok((model, outcome.log))
}

/// `1 / std` over all elements of the mean-encoded volumes.
pub fn latent_scale(model: &AeModel, volumes: &[Array]) -> Result<f64> {
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for x in volumes {
        let z = model.encode_mean(x)?;
        for &v in z.data() {
            n += 1;
            sum += v;
            sq += v * v;
        }
    }
    let mean = sum / n.max(1) as f64;
    let var = sq / n.max(1) as f64 - mean * mean;
    if !(var > 0.0) {
        return Err(Error::Degenerate("training latents have zero variance".into()));
    }
    Ok(1.0 / var.sqrt())
}
