//! AdamW with linear warmup.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::models::params::{GradMap, ParamStore, ParamValue};
use crate::scalar::Scalar;
use crate::tensor::{global_norm, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    pub warmup_steps: u64,
    /// Clip the global gradient norm to this value. Off by default.
    pub clip_grad_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            epsilon: 1e-8,
            warmup_steps: 50,
            clip_grad_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("betas must lie in [0, 1)"));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(invalid(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        Ok(())
    }
}

/// `lr · min(1, (step + 1) / warmup)`.
pub fn lr_at(step: u64, config: &OptimizerConfig) -> f64 {
    if config.warmup_steps == 0 {
        return config.learning_rate;
    }
    let frac = ((step + 1) as f64 / config.warmup_steps as f64).min(1.0);
    config.learning_rate * frac
}

#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    /// Completed optimizer steps.
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for OptimizerState<T> {
    fn default() -> Self {
        Self {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// Global L2 norm of a gradient map in key order.
pub fn grad_norm<T: Scalar>(grads: &GradMap<T>) -> f64 {
    let ts: Vec<&Tensor<T>> = grads.values().collect();
    global_norm(&ts).as_f64()
}

/// One AdamW update over every trainable parameter of `stores`, at the
/// learning rate given by the warmup schedule for the current step.
/// Frozen parameters are skipped entirely; a trainable parameter with no
/// gradient entry is treated as having a zero gradient.
pub fn adamw_step<T: Scalar>(
    stores: &mut [&mut ParamStore<T>],
    grads: &GradMap<T>,
    state: &mut OptimizerState<T>,
    config: &OptimizerConfig,
) -> Result<()> {
    let lr = lr_at(state.step, config);
    adamw_step_at(stores, grads, state, config, lr)
}

/// As [`adamw_step`] with an explicit learning rate.
pub fn adamw_step_at<T: Scalar>(
    stores: &mut [&mut ParamStore<T>],
    grads: &GradMap<T>,
    state: &mut OptimizerState<T>,
    config: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    config.validate()?;
    let clip = match config.clip_grad_norm {
        Some(max) => {
            let n = grad_norm(grads);
            if n > max && n > 0.0 {
                max / n
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let t = state.step + 1;
    let bc1 = 1.0 - config.beta1.powi(t as i32);
    let bc2 = 1.0 - config.beta2.powi(t as i32);
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    let (one, eps) = (T::one(), T::lit(config.epsilon));
    let (lr_t, clip_t) = (T::lit(lr), T::lit(clip));
    let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
    for store in stores.iter_mut() {
        for p in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let ParamValue::Dense(theta) = &mut p.value else {
                return Err(invalid(format!("trainable parameter {:?} is quantized", p.name)));
            };
            let zero;
            let g = match grads.get(&p.name) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(theta.shape());
                    &zero
                }
            };
            if g.shape() != theta.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    lhs: theta.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let m = state
                .m
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(theta.shape()));
            let v = state
                .v
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(theta.shape()));
            let wd = if p.decay { T::lit(config.weight_decay) } else { T::zero() };
            let it = theta
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((th, &gi), (mi, vi)) in it {
                let gi = gi * clip_t;
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *th -= lr_t * (mhat / (vhat.sqrt() + eps) + wd * *th);
            }
        }
    }
    state.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_schedule() {
        let c = OptimizerConfig::default();
        assert!((lr_at(0, &c) - 4e-6).abs() < 1e-18);
        assert_eq!(lr_at(49, &c), 2e-4);
        assert_eq!(lr_at(700, &c), 2e-4);
    }

    fn single(value: f64, decay: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64(&[1], &[value]), decay).unwrap();
        s
    }

    #[test]
    fn hand_evaluated_update() {
        let mut s = single(1.0, true);
        let mut g = GradMap::new();
        g.insert("w".into(), Tensor::from_f64(&[1], &[1.0]));
        let mut st = OptimizerState::default();
        adamw_step_at(&mut [&mut s], &g, &mut st, &OptimizerConfig::default(), 2e-4).unwrap();
        let expected = 1.0 - 2e-4 / (1.0 + 1e-8) - 2e-6;
        let got = s.tensor("w").unwrap().data()[0];
        assert!((got - expected).abs() < 1e-15, "{got}");
        assert!((got - 0.999798).abs() < 1e-9);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_grad_no_decay_is_fixed_point_and_frozen_skipped() {
        let mut s = single(0.5, false);
        s.insert("frozen", Tensor::from_f64(&[1], &[3.0]), true).unwrap();
        s.get_mut("frozen").unwrap().trainable = false;
        let mut g = GradMap::new();
        g.insert("w".into(), Tensor::zeros(&[1]));
        g.insert("frozen".into(), Tensor::ones(&[1]));
        let mut st = OptimizerState::default();
        for _ in 0..5 {
            adamw_step(&mut [&mut s], &g, &mut st, &OptimizerConfig::default()).unwrap();
        }
        assert_eq!(s.tensor("w").unwrap().data()[0], 0.5);
        assert_eq!(s.tensor("frozen").unwrap().data()[0], 3.0);
        assert!(!st.m.contains_key("frozen"));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = single(1.0, true);
        let mut g = GradMap::new();
        g.insert("w".into(), Tensor::zeros(&[2]));
        let mut st = OptimizerState::default();
        assert!(adamw_step(&mut [&mut s], &g, &mut st, &OptimizerConfig::default()).is_err());
    }
}
