//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{MilError, Result};
use crate::model::{Gradients, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(MilError::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ModelParams) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor> = params.tensors().iter().map(Tensor::zeros_like).collect();
        Ok(Self {
            config,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.second_moment
    }

    /// Applies one update. Non-finite or misaligned gradients are rejected
    /// before anything is modified.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
        if !grads.matches(params) || self.first_moment.len() != params.tensors().len() {
            return Err(MilError::Shape("gradients do not match parameters".into()));
        }
        if !grads.is_finite() {
            return Err(MilError::Numeric("non-finite gradient rejected by Adam".into()));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ArchConfig};

    /// Scalar Adam written out longhand.
    fn scalar_adam(mut w: f64, grads: &[f64], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        let mut out = Vec::new();
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powf(t));
            let vh = v / (1.0 - b2.powf(t));
            w -= lr * mh / (vh.sqrt() + eps);
            out.push(w);
        }
        out
    }

    fn one_param_setup(w: f64, lr: f64) -> (ModelParams, AdamState) {
        let cfg = ArchConfig::tiny();
        let mut params = init_params(&cfg, 0).unwrap();
        let mut flat = vec![0.0; params.num_params()];
        flat[0] = w;
        params.set_flat(&flat).unwrap();
        let cfg = AdamConfig { lr, ..AdamConfig::default() };
        let state = AdamState::new(cfg, &params).unwrap();
        (params, state)
    }

    fn grad_with_first(params: &ModelParams, g0: f64) -> Gradients {
        let mut g = Gradients::zeros_like(params);
        g.tensors_mut()[0].data_mut()[0] = g0;
        g
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let cfg = ArchConfig::tiny();
        let mut params = init_params(&cfg, 1).unwrap();
        let before = params.clone();
        let mut state = AdamState::new(AdamConfig::default(), &params).unwrap();
        state.step(&mut params, &Gradients::zeros_like(&before)).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_hand_value() {
        let (mut params, mut state) = one_param_setup(0.0, 1e-3);
        let g = grad_with_first(&params, 1.0);
        state.step(&mut params, &g).unwrap();
        // -lr * 1 / (1 + 1e-8)
        let w = params.flat()[0];
        assert!((w - (-0.000_999_999_990_000_000_1)).abs() < 1e-18, "{w}");
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let (mut params, mut state) = one_param_setup(0.37, 1e-4);
        let seq = [0.8, -2.5];
        let want = scalar_adam(0.37, &seq, 1e-4);
        for (g, w) in seq.iter().zip(want) {
            let grads = grad_with_first(&params, *g);
            state.step(&mut params, &grads).unwrap();
            assert!((params.flat()[0] - w).abs() < 1e-12);
        }
        assert_eq!(state.step_count(), 2);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_update() {
        let (mut params, mut state) = one_param_setup(0.5, 1e-3);
        let before = (params.clone(), state.clone());
        let grads = grad_with_first(&params, f64::NAN);
        let err = state.step(&mut params, &grads);
        assert!(matches!(err, Err(MilError::Numeric(_))));
        assert_eq!((params, state), before);
    }

    #[test]
    fn invalid_settings_rejected() {
        let params = init_params(&ArchConfig::tiny(), 0).unwrap();
        let bad = AdamConfig { lr: 0.0, ..AdamConfig::default() };
        assert!(AdamState::new(bad, &params).is_err());
    }
}
