//! AdamW with decoupled weight decay and bias correction.

use super::array::Element;
use super::store::ParamStore;
use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(CoreError::invalid("learning_rate must be positive"));
        }
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return Err(CoreError::invalid("betas must satisfy 0 < beta1 < beta2 < 1"));
        }
        if self.weight_decay < 0.0 || !(self.epsilon > 0.0) {
            return Err(CoreError::invalid("weight_decay >= 0 and epsilon > 0 required"));
        }
        Ok(())
    }
}

/// One AdamW update over every parameter in the store.
///
/// Decay is decoupled: `p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)`,
/// both terms taken at the pre-step parameter value. Gradients are cleared and
/// the step counter incremented afterwards. Errors if any parameter has no
/// gradient, listing the offenders.
pub fn adamw_step<T: Element>(store: &mut ParamStore<T>, config: &OptimizerConfig) -> Result<()> {
    config.validate()?;
    let missing = store.missing_grads();
    if !missing.is_empty() {
        return Err(CoreError::MissingGradients(missing));
    }

    let t = store.step() + 1;
    let bias1 = 1.0 - config.beta1.powi(t as i32);
    let bias2 = 1.0 - config.beta2.powi(t as i32);

    let lr = T::from_f64(config.learning_rate);
    let b1 = T::from_f64(config.beta1);
    let b2 = T::from_f64(config.beta2);
    let one_m_b1 = T::from_f64(1.0 - config.beta1);
    let one_m_b2 = T::from_f64(1.0 - config.beta2);
    let eps = T::from_f64(config.epsilon);
    let inv_bias1 = T::from_f64(1.0 / bias1);
    let inv_bias2 = T::from_f64(1.0 / bias2);
    let decay = T::from_f64(1.0 - config.learning_rate * config.weight_decay);

    for entry in store.entries.values_mut() {
        let grad = entry.grad.take().expect("checked above");
        let g = grad.data();
        let m = entry.m.data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = b1 * *mi + one_m_b1 * gi;
        }
        let v = entry.v.data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = b2 * *vi + one_m_b2 * gi * gi;
        }
        let p = entry.value.data_mut();
        for i in 0..p.len() {
            let m_hat = entry.m.data()[i] * inv_bias1;
            let v_hat = entry.v.data()[i] * inv_bias2;
            p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
        if !entry.value.all_finite() {
            return Err(CoreError::NonFinite {
                op: "adamw_step".into(),
            });
        }
    }
    store.bump_step();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::DenseArray;

    fn scalar_store<T: Element>(w: T) -> ParamStore<T> {
        let mut s = ParamStore::new();
        s.insert("w", DenseArray::from_vec(&[1], vec![w]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut store = scalar_store(1.5f32);
        store
            .accumulate_grad("w", &DenseArray::zeros(&[1]))
            .unwrap();
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        adamw_step(&mut store, &cfg).unwrap();
        assert_eq!(store.get("w").unwrap().data()[0], 1.5);
        assert_eq!(store.step(), 1);
    }

    #[test]
    fn first_step_matches_hand_computed_update() {
        // w=1, g=1, defaults. m_hat = v_hat = 1 after bias correction, so the
        // Adam term is lr / (1 + eps) and decay contributes lr * wd * w.
        let mut store = scalar_store(1.0f64);
        store
            .accumulate_grad("w", &DenseArray::from_vec(&[1], vec![1.0]).unwrap())
            .unwrap();
        let cfg = OptimizerConfig::default();
        adamw_step(&mut store, &cfg).unwrap();
        let expected = 1.0 * (1.0 - 1e-4 * 0.05) - 1e-4 * (1.0 / (1.0 + 1e-8));
        let got = store.get("w").unwrap().data()[0];
        assert!((got - expected).abs() < 1e-8, "got {got}, expected {expected}");
    }

    #[test]
    fn zero_grad_applies_pure_decoupled_decay() {
        let mut store = scalar_store(2.0f32);
        store
            .accumulate_grad("w", &DenseArray::zeros(&[1]))
            .unwrap();
        let cfg = OptimizerConfig::default();
        adamw_step(&mut store, &cfg).unwrap();
        let expected = 2.0f32 * (1.0 - (1e-4 * 0.05) as f32);
        assert_eq!(store.get("w").unwrap().data()[0], expected);
    }

    #[test]
    fn missing_gradient_is_reported_by_name() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a", DenseArray::zeros(&[1])).unwrap();
        store.insert("b", DenseArray::zeros(&[1])).unwrap();
        store
            .accumulate_grad("a", &DenseArray::zeros(&[1]))
            .unwrap();
        match adamw_step(&mut store, &OptimizerConfig::default()) {
            Err(CoreError::MissingGradients(names)) => assert_eq!(names, vec!["b"]),
            other => panic!("expected MissingGradients, got {other:?}"),
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = OptimizerConfig {
            beta1: 0.9999,
            beta2: 0.9,
            ..OptimizerConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn grads_cleared_and_step_advances() {
        let mut store = scalar_store(1.0f32);
        store
            .accumulate_grad("w", &DenseArray::from_vec(&[1], vec![0.5]).unwrap())
            .unwrap();
        adamw_step(&mut store, &OptimizerConfig::default()).unwrap();
        assert!(store.grad("w").unwrap().is_none());
        assert_eq!(store.step(), 1);
        // A second step without fresh gradients must fail.
        assert!(adamw_step(&mut store, &OptimizerConfig::default()).is_err());
    }
}
