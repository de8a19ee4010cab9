use alloc::vec::Vec;
use num_traits::Float;

use super::params::{Grads, ParamStore};

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub clip_norm: Option<f32>,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = params.params.iter().map(|p| alloc::vec![0.0; p.value.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0), step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &Grads, lr: f32) {
        self.step += 1;
        let scale = match self.clip_norm {
            Some(c) => {
                let norm = grads.global_norm() as f32;
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = self.step as i32;
        let bc1 = 1.0 - Float::powi(self.beta1, t);
        let bc2 = 1.0 - Float::powi(self.beta2, t);
        let step_size = lr / bc1;
        for (i, p) in params.params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.values[i]);
            for j in 0..p.value.len() {
                let gj = g[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p.value[j] -= step_size * m[j] / (Float::sqrt(v[j] / bc2) + self.eps);
            }
        }
    }
}

/// SGD with heavy-ball momentum and decoupled-from-nothing L2 weight decay
/// (decay is added to the gradient, as in the classic recipe).
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    pub velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f32, weight_decay: f32) -> Self {
        Self { momentum, weight_decay, velocity: params.params.iter().map(|p| alloc::vec![0.0; p.value.len()]).collect() }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &Grads, lr: f32) {
        for (i, p) in params.params.iter_mut().enumerate() {
            let (vel, g) = (&mut self.velocity[i], &grads.values[i]);
            for j in 0..p.value.len() {
                let gj = g[j] + self.weight_decay * p.value[j];
                vel[j] = self.momentum * vel[j] + gj;
                p.value[j] -= lr * vel[j];
            }
        }
    }
}

/// Exponential moving average of parameters with the usual warm-up
/// `decay_t = min(decay, (1 + t) / (10 + t))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema {
    pub decay: f32,
}

impl Ema {
    pub fn effective_decay(&self, step: u64) -> f32 {
        let warm = (1.0 + step as f32) / (10.0 + step as f32);
        self.decay.min(warm)
    }

    pub fn update(&self, shadow: &mut ParamStore, params: &ParamStore, step: u64) {
        let d = self.effective_decay(step);
        for (s, p) in shadow.params.iter_mut().zip(&params.params) {
            for (a, &b) in s.value.iter_mut().zip(&p.value) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", &[2], alloc::vec![3.0, -2.0]);
        let mut adam = Adam::new(&store);
        adam.clip_norm = None;
        for _ in 0..2000 {
            let mut g = store.zero_grads();
            for (gj, &x) in g.get_mut(id).iter_mut().zip(store.get(id)) {
                *gj = 2.0 * (x - 1.0);
            }
            adam.update(&mut store, &g, 0.01);
        }
        assert!(store.get(id).iter().all(|&x| (x - 1.0).abs() < 1e-2));
    }

    #[test]
    fn ema_tracks_parameters() {
        let mut p = ParamStore::new();
        p.add("x", &[1], alloc::vec![1.0]);
        let mut shadow = p.clone();
        p.params[0].value[0] = 2.0;
        let ema = Ema { decay: 0.9 };
        for step in 0..500 {
            ema.update(&mut shadow, &p, step);
        }
        assert!((shadow.params[0].value[0] - 2.0).abs() < 1e-4);
    }
}
