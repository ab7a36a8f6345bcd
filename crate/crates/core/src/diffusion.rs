//! DDPM machinery: linear noise schedule, closed-form forward noising,
//! Gaussian posterior, ε-parameterised reverse step, training loss and the
//! per-element KL map between posterior and model reverse step.
//!
//! Timesteps are 1-based (`1..=T`); `ᾱ_0 = 1` by convention. The model
//! reverse variance is fixed to the posterior variance `β̃_t`, so the KL
//! between the two Gaussians reduces to a squared mean gap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Array, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Number of diffusion steps `T`.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 0.0015,
            beta_end: 0.0195,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_variances: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β schedule including both endpoints.
    pub fn build(cfg: &DiffusionConfig) -> Result<Self> {
        let (b0, b1) = (cfg.beta_start, cfg.beta_end);
        if !(b0 > 0.0 && b0 < 1.0 && b1 > 0.0 && b1 < 1.0) {
            return Err(Error::config(format!("beta endpoints ({b0}, {b1}) must lie in (0, 1)")));
        }
        if cfg.steps < 2 {
            return Err(Error::config("diffusion needs at least 2 steps"));
        }
        let t = cfg.steps;
        let betas: Vec<f64> = (0..t)
            .map(|i| {
                let f = i as f64 / (t - 1) as f64;
                b0 * (1.0 - f) + b1 * f
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_variances = (0..t)
            .map(|i| {
                if i == 0 {
                    betas[0]
                } else {
                    (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i]) * betas[i]
                }
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            posterior_variances,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Input(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `β̃_t`, with `β̃_1 = β_1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variances[t - 1]
    }
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn forward_sample(s: &NoiseSchedule, z0: &Array, t: usize, eps: &Array) -> Result<Array> {
    s.check_t(t)?;
    let (a, b) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
    z0.zip_map(eps, |z, e| a * z + b * e)
}

/// Mean and variance of `q(z_{t−1} | z_t, z0)`.
pub fn posterior_params(s: &NoiseSchedule, z_t: &Array, z0: &Array, t: usize) -> Result<(Array, f64)> {
    s.check_t(t)?;
    let ab = s.alpha_bar(t);
    let ab_prev = s.alpha_bar(t - 1);
    let c0 = ab_prev.sqrt() * s.beta(t) / (1.0 - ab);
    let ct = s.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let mean = z0.zip_map(z_t, |a, b| c0 * a + ct * b)?;
    Ok((mean, s.posterior_variance(t)))
}

/// `μ_θ = (z_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t`.
pub fn model_mean(s: &NoiseSchedule, z_t: &Array, t: usize, eps_hat: &Array) -> Result<Array> {
    s.check_t(t)?;
    let inv = 1.0 / s.alpha(t).sqrt();
    let c = s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt();
    z_t.zip_map(eps_hat, |z, e| inv * (z - c * e))
}

/// One ancestral step `z_{t−1} = μ_θ + √β̃_t·η`; noiseless at `t = 1`.
pub fn reverse_step(s: &NoiseSchedule, z_t: &Array, t: usize, eps_hat: &Array, rng: &mut RngStream) -> Result<Array> {
    let mut mean = model_mean(s, z_t, t, eps_hat)?;
    if t > 1 {
        let sd = s.posterior_variance(t).sqrt();
        for v in mean.data_mut() {
            *v += sd * rng.normal();
        }
    }
    Ok(mean)
}

/// Mean squared error over all elements.
pub fn ddpm_loss(eps: &Array, eps_hat: &Array) -> Result<f64> {
    eps.ensure_same_shape(eps_hat, "ddpm_loss")?;
    let n = eps.len().max(1) as f64;
    Ok(eps.data().iter().zip(eps_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// Gradient of [`ddpm_loss`] with respect to `eps_hat`.
pub fn ddpm_loss_grad(eps: &Array, eps_hat: &Array) -> Result<Array> {
    let n = eps.len().max(1) as f64;
    eps_hat.zip_map(eps, |h, e| 2.0 * (h - e) / n)
}

/// Per-element KL between `N(μ̃, β̃)` and `N(μ_θ, β̃)`: `(μ̃ − μ_θ)²/(2β̃)`.
pub fn kl_map(mu_tilde: &Array, mu_theta: &Array, var: f64) -> Result<Array> {
    if !(var > 0.0) {
        return Err(Error::Input(format!("KL variance must be positive, got {var}")));
    }
    mu_tilde.zip_map(mu_theta, |a, b| (a - b) * (a - b) / (2.0 * var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn thousand_step_schedule() -> NoiseSchedule {
        NoiseSchedule::build(&DiffusionConfig { steps: 1000, beta_start: 0.0015, beta_end: 0.0195 }).unwrap()
    }

    #[test]
    fn endpoints_exact() {
        let s = thousand_step_schedule();
        assert_eq!(s.beta(1), 0.0015);
        assert_eq!(s.beta(1000), 0.0195);
        assert_eq!(s.alpha_bar(1), 1.0 - 0.0015);
        // direct product oracle
        let prod: f64 = (1..=1000).map(|t| 1.0 - s.beta(t)).product();
        assert!(s.alpha_bar(1000) < 0.01);
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-15);
    }

    #[test]
    fn schedule_monotone_and_consistent() {
        let s = thousand_step_schedule();
        for t in 2..=1000 {
            assert!(s.beta(t) > s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
        }
        assert_eq!(s.posterior_variance(1), s.beta(1));
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            DiffusionConfig { steps: 1, ..Default::default() },
            DiffusionConfig { beta_start: 0.0, ..Default::default() },
            DiffusionConfig { beta_end: 1.0, ..Default::default() },
        ] {
            assert!(matches!(NoiseSchedule::build(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn forward_branches() {
        let s = thousand_step_schedule();
        let mut rng = RngStream::new(1, 1);
        let z0 = rng.normal_array(&[2, 3]);
        let eps = rng.normal_array(&[2, 3]);
        let t = 400;
        let noiseless = forward_sample(&s, &z0, t, &Array::zeros(&[2, 3])).unwrap();
        assert_eq!(noiseless, z0.scale(s.alpha_bar(t).sqrt()));
        let pure = forward_sample(&s, &Array::zeros(&[2, 3]), t, &eps).unwrap();
        assert_eq!(pure, eps.scale((1.0 - s.alpha_bar(t)).sqrt()));
        assert!(forward_sample(&s, &z0, 0, &eps).is_err());
        assert!(forward_sample(&s, &z0, 1001, &eps).is_err());
    }

    #[test]
    fn posterior_at_t1_is_z0() {
        let s = thousand_step_schedule();
        let mut rng = RngStream::new(2, 1);
        let z0 = rng.normal_array(&[5]);
        let z1 = rng.normal_array(&[5]);
        let (mu, var) = posterior_params(&s, &z1, &z0, 1).unwrap();
        assert!(mu.max_abs_diff(&z0) < 1e-12);
        assert_eq!(var, s.beta(1));
    }

    #[test]
    fn posterior_of_noiseless_forward() {
        let s = thousand_step_schedule();
        let z0 = RngStream::new(3, 1).normal_array(&[6]);
        for t in [2, 17, 500, 1000] {
            let zt = z0.scale(s.alpha_bar(t).sqrt());
            let (mu, _) = posterior_params(&s, &zt, &z0, t).unwrap();
            assert!(mu.max_abs_diff(&z0.scale(s.alpha_bar(t - 1).sqrt())) < 1e-12);
        }
    }

    #[test]
    fn oracle_noise_recovers_posterior_mean() {
        let s = thousand_step_schedule();
        let mut rng = RngStream::new(4, 1);
        let z0 = rng.normal_array(&[3, 4, 4, 4]);
        for t in [1, 2, 250, 999, 1000] {
            let eps = rng.normal_array(z0.shape());
            let zt = forward_sample(&s, &z0, t, &eps).unwrap();
            let (mu, var) = posterior_params(&s, &zt, &z0, t).unwrap();
            let mt = model_mean(&s, &zt, t, &eps).unwrap();
            assert!(mu.max_abs_diff(&mt) < 1e-10, "t={t}");
            let kl = kl_map(&mu, &mt, var).unwrap();
            assert!(kl.data().iter().all(|&v| (0.0..=1e-18).contains(&v)), "t={t}");
        }
    }

    #[test]
    fn noiseless_oracle_chain_recovers_z0() {
        let s = thousand_step_schedule();
        let mut rng = RngStream::new(14, 1);
        let z0 = rng.normal_array(&[2, 4, 4, 4]);
        let eps = rng.normal_array(z0.shape());
        let mut z = forward_sample(&s, &z0, 1000, &eps).unwrap();
        for t in (1..=1000).rev() {
            let (a, b) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
            let oracle = z.zip_map(&z0, |zt, z0| (zt - a * z0) / b).unwrap();
            z = model_mean(&s, &z, t, &oracle).unwrap();
        }
        assert!(z.max_abs_diff(&z0) < 1e-8);
    }

    #[test]
    fn model_mean_branches() {
        let s = thousand_step_schedule();
        let mut rng = RngStream::new(5, 1);
        let zt = rng.normal_array(&[4]);
        let e = rng.normal_array(&[4]);
        let m = model_mean(&s, &zt, 10, &Array::zeros(&[4])).unwrap();
        assert!(m.max_abs_diff(&zt.scale(1.0 / s.alpha(10).sqrt())) < 1e-15);
        let a = 2.5;
        let scaled = model_mean(&s, &zt.scale(a), 10, &e.scale(a)).unwrap();
        assert!(scaled.max_abs_diff(&model_mean(&s, &zt, 10, &e).unwrap().scale(a)) < 1e-12);
    }

    #[test]
    fn reverse_step_final_is_deterministic() {
        let s = thousand_step_schedule();
        let mut rng = RngStream::new(6, 1);
        let zt = rng.normal_array(&[4]);
        let e = rng.normal_array(&[4]);
        let out = reverse_step(&s, &zt, 1, &e, &mut RngStream::new(9, 9)).unwrap();
        assert_eq!(out, model_mean(&s, &zt, 1, &e).unwrap());
        let a = reverse_step(&s, &zt, 50, &e, &mut RngStream::new(9, 9)).unwrap();
        let b = reverse_step(&s, &zt, 50, &e, &mut RngStream::new(9, 9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_examples() {
        let mut rng = RngStream::new(7, 1);
        let e = rng.normal_array(&[10]);
        assert_eq!(ddpm_loss(&e, &e).unwrap(), 0.0);
        assert_eq!(ddpm_loss(&Array::zeros(&[7]), &Array::full(&[7], 1.0)).unwrap(), 1.0);
        let h = rng.normal_array(&[10]);
        let mut acc = 0.0;
        for i in 0..10 {
            acc += (e[i] - h[i]).powi(2);
        }
        assert!((ddpm_loss(&e, &h).unwrap() - acc / 10.0).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        let a = Array::full(&[3], 2.0);
        assert_eq!(kl_map(&a, &a, 0.3).unwrap().data(), &[0.0; 3]);
        let b = Array::full(&[3], 1.0);
        assert_eq!(kl_map(&a, &b, 0.5).unwrap().data(), &[1.0; 3]);
        let c = Array::full(&[3], 0.0);
        let k1 = kl_map(&a, &b, 0.7).unwrap();
        let k2 = kl_map(&a, &c, 0.7).unwrap();
        for i in 0..3 {
            assert!((k2[i] - 4.0 * k1[i]).abs() < 1e-15);
        }
    }

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n)
    }

    #[test]
    fn forward_monte_carlo_moments() {
        let s = thousand_step_schedule();
        let z0 = Array::from_vec(vec![0.8]);
        let mut rng = RngStream::new(11, 1);
        for t in [1, 500, 1000] {
            let draws: Vec<f64> = (0..200_000)
                .map(|_| forward_sample(&s, &z0, t, &Array::from_vec(vec![rng.normal()])).unwrap()[0])
                .collect();
            let (m, v) = moments(&draws);
            let (em, ev) = (s.alpha_bar(t).sqrt() * 0.8, 1.0 - s.alpha_bar(t));
            // near-zero means are compared on the scale of the marginal sd
            assert!((m - em).abs() < 0.01 * em.abs().max(ev.sqrt()), "t={t} mean {m} vs {em}");
            assert!((v - ev).abs() < 0.01 * ev, "t={t} var {v} vs {ev}");
        }
    }

    #[test]
    fn stepwise_noising_matches_closed_form() {
        let s = NoiseSchedule::build(&DiffusionConfig::default()).unwrap();
        let mut rng = RngStream::new(12, 1);
        let (z0, t, n) = (1.3, 40, 10_000);
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let mut z = z0;
                for k in 1..=t {
                    z = s.alpha(k).sqrt() * z + s.beta(k).sqrt() * rng.normal();
                }
                z
            })
            .collect();
        let (m, v) = moments(&draws);
        let (em, ev) = (s.alpha_bar(t).sqrt() * z0, 1.0 - s.alpha_bar(t));
        let nf = n as f64;
        assert!((m - em).abs() < 3.0 * (ev / nf).sqrt());
        assert!((v - ev).abs() < 3.0 * ev * (2.0 / nf).sqrt());
    }

    #[test]
    fn reverse_step_variance() {
        let s = thousand_step_schedule();
        let zt = Array::from_vec(vec![0.4]);
        let e = Array::from_vec(vec![-0.2]);
        let t = 600;
        let mut rng = RngStream::new(13, 1);
        let draws: Vec<f64> = (0..10_000).map(|_| reverse_step(&s, &zt, t, &e, &mut rng).unwrap()[0]).collect();
        let (_, v) = moments(&draws);
        assert!((v / s.posterior_variance(t) - 1.0).abs() < 0.05);
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(seed in 0u64..1000, var in 1e-6f64..2.0) {
            let mut rng = RngStream::new(seed, 3);
            let a = rng.normal_array(&[16]);
            let b = rng.normal_array(&[16]);
            prop_assert!(kl_map(&a, &b, var).unwrap().data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn posterior_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, t in 1usize..1000) {
            let s = thousand_step_schedule();
            let mut rng = RngStream::new(seed, 4);
            let z0 = rng.normal_array(&[8]);
            let zt = rng.normal_array(&[8]);
            let (m, _) = posterior_params(&s, &zt, &z0, t).unwrap();
            let (ma, _) = posterior_params(&s, &zt.scale(a), &z0.scale(a), t).unwrap();
            prop_assert!(ma.max_abs_diff(&m.scale(a)) < 1e-12);
        }
    }
}
