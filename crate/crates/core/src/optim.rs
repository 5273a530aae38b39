//! Adam with bias correction and a cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::ModelWeights;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Cosine decay from `lr0` to `lr_min` over `total_steps`.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub lr0: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(lr0: f64, lr_min: f64, total_steps: u64) -> Self {
        LrSchedule {
            lr0,
            lr_min,
            total_steps,
        }
    }

    /// Learning rate applied at (0-based) step `t`.
    pub fn at(&self, t: u64) -> f64 {
        if self.total_steps <= 1 {
            return self.lr0;
        }
        let progress = t.min(self.total_steps - 1) as f64 / (self.total_steps - 1) as f64;
        self.lr_min + 0.5 * (self.lr0 - self.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// First/second moment accumulators, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct OptimState {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(weights: &ModelWeights<f32>) -> Self {
        let m = weights
            .iter()
            .map(|(k, t)| (k.clone(), vec![0.0; t.numel()]))
            .collect();
        let v = weights
            .iter()
            .map(|(k, t)| (k.clone(), vec![0.0; t.numel()]))
            .collect();
        OptimState { m, v, step: 0 }
    }
}

/// One bias-corrected update; parameters without a gradient entry decay
/// their moments as if the gradient were zero. Deterministic given inputs.
pub fn adam_step(
    weights: &mut ModelWeights<f32>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut OptimState,
    schedule: &LrSchedule,
) -> Result<()> {
    let lr = schedule.at(state.step);
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);

    let keys: Vec<String> = weights.keys().cloned().collect();
    for key in keys {
        let param = weights.get(&key)?.clone();
        if let Some(g) = grads.get(&key) {
            if g.shape() != param.shape() {
                return Err(Error::shape(format!(
                    "gradient for `{key}` has shape {:?}, parameter is {:?}",
                    g.shape(),
                    param.shape()
                )));
            }
        }
        let m = state.m.get_mut(&key).expect("state built from weights");
        let v = state.v.get_mut(&key).expect("state built from weights");
        let gd = grads.get(&key).map(|g| g.data());
        let mut new = Vec::with_capacity(param.numel());
        for (i, &p) in param.data().iter().enumerate() {
            let g = gd.map_or(0.0, |g| g[i] as f64);
            let mi = BETA1 * m[i] as f64 + (1.0 - BETA1) * g;
            let vi = BETA2 * v[i] as f64 + (1.0 - BETA2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            new.push((p as f64 - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32);
        }
        weights.set(&key, Tensor::new(new, param.shape())?)?;
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_model, ModelConfig};

    fn tiny_weights() -> ModelWeights<f32> {
        let mut w = ModelWeights::default();
        w.insert("a", Tensor::full(&[3], 1.0f32));
        w.insert("b", Tensor::full(&[2], -0.5f32));
        w
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = tiny_weights();
        let mut state = OptimState::new(&w);
        let sched = LrSchedule::new(1e-3, 1e-3, 1);
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::full(&[3], 1.0f32));
        adam_step(&mut w, &grads, &mut state, &sched).unwrap();
        for &v in w.get("a").unwrap().data() {
            // bias-corrected m_hat = v_hat = 1 at t=1, so delta ~ -lr
            assert!((v - (1.0 - 1e-3)).abs() < 1e-8, "got {v}");
        }
        // untouched parameter stays put
        for &v in w.get("b").unwrap().data() {
            assert_eq!(v, -0.5);
        }
    }

    #[test]
    fn zero_gradient_leaves_weights_unchanged() {
        let mut w = tiny_weights();
        let before: Vec<f32> = w.get("a").unwrap().data().to_vec();
        let mut state = OptimState::new(&w);
        let sched = LrSchedule::new(1e-3, 1e-7, 10);
        let grads = BTreeMap::new();
        adam_step(&mut w, &grads, &mut state, &sched).unwrap();
        assert_eq!(w.get("a").unwrap().data(), &before[..]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut w = tiny_weights();
        let mut state = OptimState::new(&w);
        let sched = LrSchedule::new(1e-3, 1e-7, 10);
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::full(&[4], 1.0f32));
        assert!(adam_step(&mut w, &grads, &mut state, &sched).is_err());
    }

    #[test]
    fn deterministic_across_runs() {
        let cfg = ModelConfig {
            base_channels: 4,
            blocks_per_level: [1, 1, 1],
            state_dim: 2,
            seed: 3,
            ..ModelConfig::default()
        };
        let run = || {
            let mut w = build_model::<f32>(&cfg).unwrap();
            let mut state = OptimState::new(&w);
            let sched = LrSchedule::new(1e-4, 1e-7, 5);
            for step in 0..5u64 {
                let mut grads = BTreeMap::new();
                for (k, t) in build_model::<f32>(&cfg).unwrap().iter() {
                    // synthetic deterministic pseudo-gradients
                    let g = Tensor::from_fn(t.shape(), |i| ((i as f32) + step as f32).sin() * 1e-2);
                    grads.insert(k.clone(), g);
                }
                adam_step(&mut w, &grads, &mut state, &sched).unwrap();
            }
            let mut hash = Vec::new();
            for (_, t) in w.iter() {
                hash.extend(t.data().iter().map(|v| v.to_bits()));
            }
            hash
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::new(1e-4, 1e-7, 100);
        assert!((s.at(0) - 1e-4).abs() < 1e-12);
        assert!((s.at(99) - 1e-7).abs() < 1e-12);
        assert!(s.at(50) < 1e-4 && s.at(50) > 1e-7);
    }
}
