use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for every parameter array plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn first_moment(&self) -> &ParamSet {
        &self.m
    }

    pub fn second_moment(&self) -> &ParamSet {
        &self.v
    }
}

/// One bias-corrected Adam update, in place.
///
/// All gradients are checked before any parameter is touched, so a
/// non-finite gradient leaves both `params` and `state` unchanged.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState, lr: f64) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::dim(format!("no gradient for parameter {name}")))?;
        g.ensure_same_shape(p, name)?;
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.slot(name);
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
        }
        let v = state.v.slot(name);
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
        }
        let m = state.m[name].data();
        let v = state.v[name].data();
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            *pi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Array, RngStream};
    use proptest::prelude::*;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Array::from_vec(vec![v]));
        p
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = single(0.7);
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &single(0.0), &mut st, 0.1).unwrap();
        assert_eq!(p["w"][0], 0.7);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(0.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &single(1.0), &mut st, 0.1).unwrap();
        // m̂ = v̂ = 1, so Δ = -0.1 / (1 + 1e-8)
        assert!((p["w"][0] + 0.1).abs() < 1e-8);
    }

    /// Scalar Adam recurrence written out independently of `adam_step`.
    fn oracle_deltas(grads: &[f64], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        grads
            .iter()
            .enumerate()
            .map(|(i, g)| {
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let t = (i + 1) as i32;
                -lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps)
            })
            .collect()
    }

    #[test]
    fn alternating_gradient_shrinks_updates() {
        let grads: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let expected = oracle_deltas(&grads, 0.1);
        let mut p = single(0.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        let mut prev = 0.0;
        for (i, g) in grads.iter().enumerate() {
            adam_step(&mut p, &single(*g), &mut st, 0.1).unwrap();
            let delta = p["w"][0] - prev;
            assert!((delta - expected[i]).abs() < 1e-15);
            // first-moment cancellation keeps every later step below the
            // constant-gradient step size lr
            if i > 0 {
                assert!(delta.abs() < 0.1 * 0.5, "step {i}: {delta}");
            }
            prev = p["w"][0];
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single(1.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        let err = adam_step(&mut p, &single(f64::NAN), &mut st, 0.1).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(st.step, 0);
        assert_eq!(p["w"][0], 1.0);
    }

    proptest! {
        // With empty moment accumulators a zero gradient leaves the
        // parameters untouched, whatever the hyperparameters or step count.
        #[test]
        fn zero_gradients_never_move_parameters(
            seed in 0u64..500,
            step in 0u64..10_000,
            beta1 in 0.0f64..0.999,
            beta2 in 0.0f64..0.9999,
            lr in 1e-6f64..1.0,
        ) {
            let mut rng = RngStream::new(seed, 9);
            let mut p = ParamSet::new();
            p.insert("a", rng.normal_array(&[3, 2]));
            let mut st = AdamState::new(&p, AdamConfig { beta1, beta2, eps: 1e-8 });
            st.step = step;
            let before = p.clone();
            let zeros = p.zeros_like();
            adam_step(&mut p, &zeros, &mut st, lr).unwrap();
            prop_assert_eq!(before, p);
            prop_assert_eq!(st.step, step + 1);
        }
    }
}
