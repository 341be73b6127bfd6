//! Adam.

use alloc::vec::Vec;

use crate::math;
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |p: &crate::params::Param| Tensor::zeros(p.value.shape());
        Adam {
            config,
            step: 0,
            m: store.iter().map(|(_, p)| zeros(p)).collect(),
            v: store.iter().map(|(_, p)| zeros(p)).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from `grads` and mirrors them into `store`'s grad buffers.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c = self.config;
        let scale = match c.clip_norm {
            Some(max) => {
                let n = grads.global_norm();
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let p = store.get_mut(id);
            let Some(g) = grads.get(id) else {
                p.grad.data_mut().iter_mut().for_each(|v| *v = 0.0);
                continue;
            };
            p.grad = g.clone();
            if !p.trainable {
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k] * scale;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *w -= c.lr * mh / (math::sqrt(vh) + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(1.0), true).unwrap();
        let mut adam = Adam::new(
            &store,
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
        );
        let grads = {
            let mut g = Graph::new(&store);
            let x = g.param(w);
            let y = g.mul(x, x).unwrap();
            g.backward(y).unwrap()
        };
        adam.step(&mut store, &grads);
        assert!((store.value(w).item() - 0.9).abs() < 1e-6);
        assert_eq!(store.get(w).grad.item(), 2.0);
    }

    #[test]
    fn minimises_quadratic() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(3.0), true).unwrap();
        let mut adam = Adam::new(
            &store,
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
        );
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&store);
                let x = g.param(w);
                let y = g.mul(x, x).unwrap();
                g.backward(y).unwrap()
            };
            adam.step(&mut store, &grads);
        }
        assert!(store.value(w).item().abs() < 0.05);
    }
}
