//! Adam with bias correction, plus global-norm clipping.

use crate::error::{dim_err, Result};
use crate::tensor::{Gradients, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First and second moments, shaped like the parameters.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update. Parameters without a gradient are left alone.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.iter() {
            let i = id.index();
            let p = store.get_mut(id);
            if p.shape() != g.shape() || self.m[i].shape() != g.shape() {
                return Err(dim_err!("gradient {:?} vs parameter {:?}", g.shape(), p.shape()));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let n = grads.global_norm();
    if max_norm > 0.0 && n > max_norm {
        grads.scale(max_norm / n);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn quad_step(store: &ParamStore, target: f64) -> Gradients {
        let mut g = Graph::new(store);
        let id = store.id("w").unwrap();
        let w = g.param(id);
        let c = g.constant(Tensor::scalar(-target));
        let diff = g.add(w, c).unwrap();
        let sq = g.mul(diff, diff).unwrap();
        g.backward(sq).unwrap()
    }

    #[test]
    fn converges_on_a_convex_quadratic() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(0.0));
        let mut adam = AdamState::new(&store, 0.01);
        for _ in 0..1000 {
            let g = quad_step(&store, 3.0);
            adam.update(&mut store, &g).unwrap();
        }
        let w = store.get(store.id("w").unwrap()).data()[0];
        assert!((w - 3.0).abs() < 1e-3, "{w}");
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.5));
        let mut adam = AdamState::new(&store, 0.0);
        for _ in 0..10 {
            let g = quad_step(&store, 3.0);
            adam.update(&mut store, &g).unwrap();
        }
        assert_eq!(store.get(store.id("w").unwrap()).data()[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(0.0));
        let mut adam = AdamState::new(&store, 0.1);
        let g = quad_step(&store, 3.0);
        adam.update(&mut store, &g).unwrap();
        let w = store.get(store.id("w").unwrap()).data()[0];
        assert!((w - 0.1).abs() < 1e-9);
        assert_eq!(adam.m[0].shape(), store.get(store.id("w").unwrap()).shape());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(0.0));
        let mut g = quad_step(&store, 100.0);
        let before = clip_global_norm(&mut g, 5.0);
        assert!((before - 200.0).abs() < 1e-9);
        assert!((g.global_norm() - 5.0).abs() < 1e-9);
        let mut small = quad_step(&store, 1.0);
        clip_global_norm(&mut small, 5.0);
        assert!((small.global_norm() - 2.0).abs() < 1e-12);
    }
}
