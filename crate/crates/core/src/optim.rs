//! First-order optimizers over flat parameter slices.

use alloc::vec;
use alloc::vec::Vec;

use crate::Real;

/// A model whose trainable tensors can be visited as flat slices in a fixed order.
///
/// The same type doubles as its own gradient container, so `param_slices`
/// of a gradient lines up with `param_slices_mut` of the model.
pub trait Parameters<T> {
    fn param_slices(&self) -> Vec<&[T]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [T]>;

    fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }
}

/// Scale factor that brings the global gradient norm down to `max_norm`.
pub fn clip_scale<T: Real>(grads: &[&[T]], max_norm: Option<f64>) -> T {
    let Some(max_norm) = max_norm else {
        return T::one();
    };
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| {
            let v = v.as_f64();
            v * v
        })
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        T::of(max_norm / norm)
    } else {
        T::one()
    }
}

/// SGD with (heavy-ball) momentum: `v = μ·v + g; p -= lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, clip_norm: Option<f64>) -> Self {
        Self { momentum, clip_norm, velocity: Vec::new() }
    }

    pub fn plain() -> Self {
        Self::new(0.0, None)
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn step(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>, lr: f64) {
        assert_eq!(params.len(), grads.len());
        if self.velocity.is_empty() && self.momentum != 0.0 {
            self.velocity = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
        }
        let scale = clip_scale(&grads, self.clip_norm);
        let lr = T::of(lr);
        let mu = T::of(self.momentum);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if self.momentum == 0.0 {
                for (pv, &gv) in p.iter_mut().zip(g) {
                    *pv -= lr * (gv * scale);
                }
            } else {
                let v = &mut self.velocity[i];
                for ((pv, &gv), vv) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vv = mu * *vv + gv * scale;
                    *pv -= lr * *vv;
                }
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl<T: Real> Adam<T> {
    pub fn step(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>, lr: f64) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let c1 = T::of(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::of(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::of(lr);
        let eps = T::of(self.eps);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
