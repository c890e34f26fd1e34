//! Adam with per-array learning rates and cosine decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradtape::{Gradients, ParamId, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new<P: ParamSet + ?Sized>(params: &P, config: AdamConfig) -> Self {
        let lens: Vec<usize> = params.leaf_specs().iter().map(|s| s.len).collect();
        Adam {
            config,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update; `lr(id)` gives the learning rate of every array. Arrays
    /// without a gradient are treated as having a zero gradient.
    pub fn step<P: ParamSet + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &Gradients,
        lr: impl Fn(ParamId) -> f64,
    ) -> Result<()> {
        if grads.num_leaves() != self.m.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.m.len()],
                actual: vec![grads.num_leaves()],
            });
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..self.m.len() {
            let id = ParamId(i);
            let rate = lr(id);
            let g = grads.get(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.leaf_mut(id);
            for k in 0..p.len() {
                let gk = g.map_or(0.0, |g| g[k]);
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                if m[k] != 0.0 {
                    p[k] -= rate * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` at iteration 0 to `base * floor` at `total`.
pub fn cosine_lr(base: f64, iter: usize, total: usize, floor: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let x = (iter as f64 / total as f64).min(1.0);
    base * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone)]
    struct One(Vec<f64>);

    impl ParamSet for One {
        fn num_leaves(&self) -> usize {
            1
        }
        fn leaf_name(&self, _: ParamId) -> &str {
            "x"
        }
        fn leaf(&self, _: ParamId) -> &[f64] {
            &self.0
        }
        fn leaf_mut(&mut self, _: ParamId) -> &mut [f64] {
            &mut self.0
        }
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = One(vec![3.0, -2.0]);
        let mut opt = Adam::new(&p, AdamConfig::default());
        for it in 0..500 {
            let mut g = Gradients::zeros_like(&p);
            let x = p.0.clone();
            g.slot_mut(ParamId(0)).copy_from_slice(&[2.0 * x[0], 2.0 * x[1]]);
            opt.step(&mut p, &g, |_| cosine_lr(0.1, it, 500, 0.01)).unwrap();
        }
        assert!(p.0.iter().all(|x| x.abs() < 1e-2), "{:?}", p.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = One(vec![1.0]);
        let mut opt = Adam::new(&p, AdamConfig::default());
        let mut g = Gradients::zeros_like(&p);
        g.slot_mut(ParamId(0))[0] = 123.0;
        opt.step(&mut p, &g, |_| 0.01).unwrap();
        assert!((p.0[0] - 0.99).abs() < 1e-12);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10, 0.1), 1.0);
        assert!((cosine_lr(1.0, 10, 10, 0.1) - 0.1).abs() < 1e-12);
        assert!((cosine_lr(1.0, 5, 10, 0.0) - 0.5).abs() < 1e-12);
    }
}
