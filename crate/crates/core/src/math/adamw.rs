//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 0.002,
            weight_decay: 0.0001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state: one first/second moment buffer per parameter plus the
/// shared step counter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let m = params.ids().map(|id| vec![0.0; params.data(id).len()]).collect();
        let v = params.ids().map(|id| vec![0.0; params.data(id).len()]).collect();
        AdamW { config, m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. `grads` must align with the store
    /// (one slice per parameter id, matching length). Decay multiplies the
    /// parameter directly; it never enters the moment buffers.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adamw: expected {} gradient buffers, got {}",
                self.m.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != self.m[i].len() {
                return Err(Error::contract(format!(
                    "adamw: gradient shape mismatch for param {i}: {} vs {}",
                    g.len(),
                    self.m[i].len()
                )));
            }
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::numerical("adamw", format!("non-finite gradient for param {i}")));
            }
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, id) in (0..grads.len()).map(|i| (i, ParamId(i))) {
            let p = params.data_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                let g = grads[i][k];
                p[k] -= c.learning_rate * c.weight_decay * p[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

/// Global-norm gradient clipping; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.add("w", 1, 1, vec![value]);
        p
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params_unchanged() {
        let mut params = single_param(3.5);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &params);
        opt.step(&mut params, &[vec![0.0]]).unwrap();
        assert_eq!(params.data(ParamId(0)), &[3.5]);
    }

    #[test]
    fn single_step_matches_hand_execution() {
        // g=1, p=0, lr=0.1, wd=0: m_hat=1, v_hat=1 => p = -0.1/(1+eps)
        let mut params = single_param(0.0);
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let mut opt = AdamW::new(cfg, &params);
        opt.step(&mut params, &[vec![1.0]]).unwrap();
        let p = params.data(ParamId(0))[0];
        assert!((p + 0.1).abs() < 1e-8, "p = {p}");
    }

    #[test]
    fn pure_decay_is_decoupled() {
        // wd=0.01, g=0, lr=0.1, p=1 => p = 1 - 0.1 * 0.01 = 0.999
        let mut params = single_param(1.0);
        let cfg = AdamWConfig { learning_rate: 0.1, weight_decay: 0.01, ..Default::default() };
        let mut opt = AdamW::new(cfg, &params);
        opt.step(&mut params, &[vec![0.0]]).unwrap();
        let p = params.data(ParamId(0))[0];
        assert!((p - 0.999).abs() < 1e-15, "p = {p}");
    }

    #[test]
    fn step_counter_increases_and_shapes_checked() {
        let mut params = single_param(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &params);
        assert_eq!(opt.step_count(), 0);
        opt.step(&mut params, &[vec![0.5]]).unwrap();
        assert_eq!(opt.step_count(), 1);
        assert!(matches!(opt.step(&mut params, &[vec![0.5, 0.5]]), Err(Error::Contract(_))));
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut g = vec![vec![3.0, 4.0]];
        let n = clip_global_norm(&mut g, 10.0);
        assert_eq!(n, 5.0);
        assert_eq!(g[0], vec![3.0, 4.0]);
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-12 && (g[0][1] - 0.8).abs() < 1e-12);
    }
}
