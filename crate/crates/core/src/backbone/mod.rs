//! Conditional ε-prediction transformer over latent volumes.
//!
//! A latent `[c, h, w, d]` is cut into `p×p×c` patches over `(h, w)` for each
//! depth index, giving `n_d = d` slices of `s = (h/p)(w/p)` tokens. Blocks
//! alternate between attention within a slice (block 0, 2, …) and attention
//! across slices at a fixed spatial index (block 1, 3, …). Every block is
//! modulated by a shared adaptive-norm network driven by the timestep and
//! covariate embeddings, plus a per-block offset.

mod network;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{linear_rows, silu};
use crate::numerics::{Array, ParamSet, RngStream};
use crate::phantom::Covariates;

pub use network::ForwardCache;

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneArch {
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Token width `L`.
    pub dim: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneArch {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            n_heads: 4,
            dim: 64,
            patch: 2,
            mlp_ratio: 4,
        }
    }
}

/// Architecture plus the settings it inherits from the other stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub arch: BackboneArch,
    /// Latent shape `[c, h, w, d]`.
    pub latent: [usize; 4],
    pub timesteps: usize,
    pub conditioning: bool,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        if a.n_blocks == 0 || a.n_blocks % 2 != 0 {
            return Err(Error::config(format!("n_blocks must be a positive even number, got {}", a.n_blocks)));
        }
        if a.n_heads == 0 || a.dim == 0 || a.dim % a.n_heads != 0 {
            return Err(Error::config(format!("dim {} not divisible by {} heads", a.dim, a.n_heads)));
        }
        if a.dim % 2 != 0 {
            return Err(Error::config("dim must be even for the sinusoidal embedding"));
        }
        if a.patch == 0 || a.mlp_ratio == 0 {
            return Err(Error::config("patch and mlp_ratio must be positive"));
        }
        let [c, h, w, d] = self.latent;
        if c == 0 || d == 0 || h == 0 || w == 0 {
            return Err(Error::config(format!("latent shape {:?} has an empty axis", self.latent)));
        }
        if h % a.patch != 0 || w % a.patch != 0 {
            return Err(Error::config(format!(
                "latent spatial axes {h}×{w} not divisible by patch {}",
                a.patch
            )));
        }
        if self.timesteps == 0 {
            return Err(Error::config("timesteps must be positive"));
        }
        Ok(())
    }

    pub(crate) fn dims(&self) -> Dims {
        let a = &self.arch;
        let [c, h, w, d] = self.latent;
        let (nh, nw) = (h / a.patch, w / a.patch);
        let s = nh * nw;
        Dims {
            c,
            h,
            w,
            d,
            p: a.patch,
            nw,
            s,
            nd: d,
            n: s * d,
            l: a.dim,
            heads: a.n_heads,
            hd: a.dim / a.n_heads,
            pdim: c * a.patch * a.patch,
            hidden: a.dim * a.mlp_ratio,
            blocks: a.n_blocks,
        }
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let dm = self.dims();
        let (l, p, n, hid) = (dm.l, dm.pdim, dm.n, dm.hidden);
        let mut v: Vec<(String, Vec<usize>)> = vec![
            ("patch.w".into(), vec![l, p]),
            ("patch.b".into(), vec![l]),
            ("pos".into(), vec![n, l]),
            ("temb.fc1.w".into(), vec![l, l]),
            ("temb.fc1.b".into(), vec![l]),
            ("temb.fc2.w".into(), vec![l, l]),
            ("temb.fc2.b".into(), vec![l]),
            ("mod.w".into(), vec![8 * l, l]),
            ("mod.b".into(), vec![8 * l]),
            ("head.w".into(), vec![p, l]),
            ("head.b".into(), vec![p]),
        ];
        if self.conditioning {
            v.push(("cov.w".into(), vec![l, 2]));
            v.push(("cov.b".into(), vec![l]));
        }
        for b in 0..dm.blocks {
            let pre = format!("blocks.{b}");
            v.push((format!("{pre}.mod_offset"), vec![6 * l]));
            v.push((format!("{pre}.qkv.w"), vec![3 * l, l]));
            // keys carry no bias: it shifts every score in a row equally
            v.push((format!("{pre}.qv.b"), vec![2 * l]));
            v.push((format!("{pre}.attn_out.w"), vec![l, l]));
            v.push((format!("{pre}.attn_out.b"), vec![l]));
            v.push((format!("{pre}.mlp.fc1.w"), vec![hid, l]));
            v.push((format!("{pre}.mlp.fc1.b"), vec![hid]));
            v.push((format!("{pre}.mlp.fc2.w"), vec![l, hid]));
            v.push((format!("{pre}.mlp.fc2.b"), vec![l]));
        }
        v
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub p: usize,
    pub nw: usize,
    pub s: usize,
    pub nd: usize,
    pub n: usize,
    pub l: usize,
    pub heads: usize,
    pub hd: usize,
    pub pdim: usize,
    pub hidden: usize,
    pub blocks: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Attention among the `s` tokens of one depth slice.
    Spatial,
    /// Attention among the `n_d` tokens sharing a spatial index.
    Depth,
}

pub fn block_kind(b: usize) -> BlockKind {
    if b % 2 == 0 {
        BlockKind::Spatial
    } else {
        BlockKind::Depth
    }
}

/// Which blocks run; skipped blocks act as the identity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BlockFilter {
    #[default]
    All,
    SpatialOnly,
    DepthOnly,
}

impl BlockFilter {
    pub fn runs(self, kind: BlockKind) -> bool {
        match self {
            BlockFilter::All => true,
            BlockFilter::SpatialOnly => kind == BlockKind::Spatial,
            BlockFilter::DepthOnly => kind == BlockKind::Depth,
        }
    }
}

/// Training-cohort age statistics used to standardise covariates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateStats {
    pub age_mean: f64,
    pub age_std: f64,
}

impl CovariateStats {
    /// Mean and population standard deviation of the ages.
    pub fn from_covariates(covs: &[Covariates]) -> Result<Self> {
        if covs.is_empty() {
            return Err(Error::Calibration("no covariates to standardise".into()));
        }
        let n = covs.len() as f64;
        let mean = covs.iter().map(|c| c.age).sum::<f64>() / n;
        let var = covs.iter().map(|c| (c.age - mean).powi(2)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(Error::Degenerate("training ages have zero spread".into()));
        }
        Ok(Self {
            age_mean: mean,
            age_std: var.sqrt(),
        })
    }

    /// `[z-scored age, sex ∈ {−1, +1}]`.
    pub fn standardize(&self, c: &Covariates) -> [f64; 2] {
        let sex = if c.sex == 0 { -1.0 } else { 1.0 };
        [(c.age - self.age_mean) / self.age_std, sex]
    }
}

/// Half sine, half cosine over a geometric frequency ladder with base 10000;
/// entry 0 is `sin(t)`.
pub fn sinusoidal_embedding(t: f64, l: usize) -> Vec<f64> {
    let half = l / 2;
    let mut out = vec![0.0; l];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * f).sin();
        out[half + i] = (t * f).cos();
    }
    out
}

/// Fixed 3-axis sinusoidal table used to initialise the learned positions.
fn positional_init(dm: &Dims) -> Vec<f64> {
    let l = dm.l;
    let nf = l.div_ceil(6).max(1);
    let mut pos = vec![0.0; dm.n * l];
    for k in 0..dm.nd {
        for j in 0..dm.s {
            let coords = [k as f64, (j / dm.nw) as f64, (j % dm.nw) as f64];
            let row = &mut pos[(k * dm.s + j) * l..(k * dm.s + j + 1) * l];
            for (i, v) in row.iter_mut().enumerate() {
                let axis = i % 3;
                let jj = i / 3;
                let f = (-(100f64.ln()) * (jj / 2) as f64 / nf as f64).exp();
                let arg = coords[axis] * f;
                *v = if jj % 2 == 0 { arg.sin() } else { arg.cos() };
            }
        }
    }
    pos
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: BackboneConfig,
    pub params: ParamSet,
    pub covariate_stats: Option<CovariateStats>,
}

impl Denoiser {
    /// Random initialisation. The modulation network, per-block offsets and
    /// output head start at zero, so every block is the identity and the
    /// prediction is identically zero.
    pub fn init(config: BackboneConfig, covariate_stats: Option<CovariateStats>, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let dm = config.dims();
        let mut params = ParamSet::new();
        for (name, shape) in config.param_shapes() {
            let mut a = Array::zeros(&shape);
            let sd = if name == "pos" {
                a.data_mut().copy_from_slice(&positional_init(&dm));
                None
            } else if name.ends_with(".b") || name.starts_with("mod.") || name.starts_with("head.") || name.ends_with("mod_offset") {
                None
            } else if name.starts_with("blocks.") {
                // Xavier normal
                Some((2.0 / (shape[0] + shape[1]) as f64).sqrt())
            } else {
                Some((1.0 / shape[1] as f64).sqrt())
            };
            if let Some(sd) = sd {
                a.data_mut().iter_mut().for_each(|v| *v = sd * rng.normal());
            }
            params.insert(name, a);
        }
        Ok(Self {
            config,
            params,
            covariate_stats,
        })
    }

    pub fn from_params(config: BackboneConfig, params: ParamSet, covariate_stats: Option<CovariateStats>) -> Result<Self> {
        config.validate()?;
        params.validate(&config.param_shapes())?;
        if config.conditioning && covariate_stats.is_none() {
            return Err(Error::Calibration("conditioned backbone is missing covariate statistics".into()));
        }
        Ok(Self {
            config,
            params,
            covariate_stats,
        })
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        self.config.latent
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.config.timesteps {
            return Err(Error::Input(format!("timestep {t} outside 1..={}", self.config.timesteps)));
        }
        Ok(())
    }

    /// Timestep embedding: sinusoid → linear → SiLU → linear.
    pub fn embed_timestep(&self, t: usize) -> Result<Array> {
        self.check_t(t)?;
        let l = self.config.arch.dim;
        let (_, _, _, out) = network::time_mlp(&self.params, t, l);
        Ok(Array::from_vec(out))
    }

    /// Covariate embedding `f_ψ`; zero when conditioning is disabled.
    pub fn embed_covariates(&self, cov: &Covariates) -> Result<Array> {
        let l = self.config.arch.dim;
        if !self.config.conditioning {
            return Ok(Array::zeros(&[l]));
        }
        let stats = self
            .covariate_stats
            .ok_or_else(|| Error::Calibration("covariate statistics are missing".into()))?;
        let x = stats.standardize(cov);
        let mut out = vec![0.0; l];
        linear_rows(&x, self.params["cov.w"].data(), self.params["cov.b"].data(), 1, 2, l, &mut out);
        Ok(Array::from_vec(out))
    }

    /// `t_emb + z_c`, with `z_c = 0` when no covariates are supplied.
    pub fn condition(&self, t: usize, cov: Option<&Covariates>) -> Result<Array> {
        let mut c = self.embed_timestep(t)?;
        if let Some(cov) = cov {
            let zc = self.embed_covariates(cov)?;
            c = c.add(&zc)?;
        }
        Ok(c)
    }

    /// Patch embedding plus positions, as `[n_d, s, L]`.
    pub fn tokenize(&self, z: &Array) -> Result<Array> {
        z.ensure_shape(&self.config.latent, "tokenize input")?;
        let dm = self.config.dims();
        let patches = network::extract_patches(z.data(), &dm);
        let mut x = vec![0.0; dm.n * dm.l];
        linear_rows(&patches, self.params["patch.w"].data(), self.params["patch.b"].data(), dm.n, dm.pdim, dm.l, &mut x);
        for (v, p) in x.iter_mut().zip(self.params["pos"].data()) {
            *v += p;
        }
        Array::new(&[dm.nd, dm.s, dm.l], x)
    }

    /// Output head per token, placed back at each token's patch.
    pub fn detokenize(&self, tokens: &Array) -> Result<Array> {
        let dm = self.config.dims();
        tokens.ensure_shape(&[dm.nd, dm.s, dm.l], "detokenize input")?;
        let mut out = vec![0.0; dm.n * dm.pdim];
        linear_rows(tokens.data(), self.params["head.w"].data(), self.params["head.b"].data(), dm.n, dm.l, dm.pdim, &mut out);
        Array::new(&self.config.latent, network::place_patches(&out, &dm))
    }

    /// Applies block `b` to `[n_d, s, L]` tokens under condition `cond`.
    pub fn apply_block(&self, b: usize, cond: &Array, tokens: &Array) -> Result<Array> {
        let dm = self.config.dims();
        if b >= dm.blocks {
            return Err(Error::config(format!("block {b} out of range (have {})", dm.blocks)));
        }
        cond.ensure_shape(&[dm.l], "condition")?;
        tokens.ensure_shape(&[dm.nd, dm.s, dm.l], "block input")?;
        let mods = network::modulation(&self.params, cond.data(), dm.l).1;
        let m = network::block_modulation(&self.params, &mods, b, dm.l);
        let (out, _) = network::block_forward(&self.params, &dm, b, &m, tokens.data());
        Array::new(tokens.shape(), out)
    }

    /// `ε̂ = ε_θ(z_t, t, covariates)`.
    pub fn denoise_eps(&self, z_t: &Array, t: usize, cov: Option<&Covariates>) -> Result<Array> {
        self.denoise_eps_filtered(z_t, t, cov, BlockFilter::All)
    }

    pub fn denoise_eps_filtered(&self, z_t: &Array, t: usize, cov: Option<&Covariates>, filter: BlockFilter) -> Result<Array> {
        Ok(network::forward(self, z_t, t, cov, filter)?.0)
    }

    /// Forward pass keeping every intermediate needed by [`Denoiser::backward`].
    pub fn forward_cached(&self, z_t: &Array, t: usize, cov: Option<&Covariates>) -> Result<(Array, ForwardCache)> {
        network::forward(self, z_t, t, cov, BlockFilter::All)
    }

    /// Parameter gradients given `dL/dε̂`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Array) -> Result<ParamSet> {
        d_out.ensure_shape(&self.config.latent, "backward seed")?;
        Ok(network::backward(self, cache, d_out.data()))
    }

    /// Noise-prediction loss for one example and its gradient.
    pub fn loss_and_grad(&self, z_t: &Array, t: usize, cov: Option<&Covariates>, eps: &Array) -> Result<(f64, ParamSet)> {
        let (pred, cache) = self.forward_cached(z_t, t, cov)?;
        let loss = crate::diffusion::ddpm_loss(eps, &pred)?;
        let d = crate::diffusion::ddpm_loss_grad(eps, &pred)?;
        Ok((loss, self.backward(&cache, &d)?))
    }
}

/// SiLU applied elementwise; shared by the network helpers.
pub(crate) fn silu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| silu(v)).collect()
}
