//! First-order optimizers over a [`ParamStore`].

use std::collections::BTreeMap;

use super::{Gradients, ParamStore, Tensor};

pub trait Optimizer {
    fn step(&mut self, params: &mut ParamStore, grads: &Gradients);
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        let lr = self.lr;
        params.update(grads, |_, p, g| {
            for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
                *v -= lr * d;
            }
        });
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.update(grads, |name, p, g| {
            let m = ms
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = vs
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for (((w, &d), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * d;
                *vi = b2 * *vi + (1.0 - b2) * d * d;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Kind};

    fn quadratic(store: &ParamStore) -> (f64, Gradients) {
        // (x - 3)^2 + (y + 1)^2
        let mut g = Graph::new();
        let p = g.param("p", store.get("p").unwrap().clone());
        let target = g.constant(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap());
        let d = g.sub(p, target).unwrap();
        let sq = g.mul(d, d).unwrap();
        let loss = g.sum(sq).unwrap();
        (g.value(loss).data()[0], g.backward(loss).unwrap())
    }

    #[test]
    fn first_adam_step_moves_each_coordinate_by_lr() {
        let mut store = ParamStore::new();
        store.insert("p", Kind::Param, Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let (_, grads) = quadratic(&store);
        let mut opt = Adam::new(0.1);
        opt.step(&mut store, &grads);
        let p = store.get("p").unwrap().data();
        // the bias-corrected ratio m/sqrt(v) is sign(g) on the first step
        assert!((p[0] - 0.1).abs() < 1e-6, "{p:?}");
        assert!((p[1] + 0.1).abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn adam_ignores_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("p", Kind::Param, Tensor::new(vec![2], vec![3.0, -1.0]).unwrap());
        let (_, grads) = quadratic(&store);
        assert_eq!(grads.get("p").unwrap().data(), &[0.0, 0.0]);
        let mut opt = Adam::new(0.1);
        opt.step(&mut store, &grads);
        assert_eq!(store.get("p").unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut store = ParamStore::new();
        store.insert("p", Kind::Param, Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let (_, grads) = quadratic(&store);
            opt.step(&mut store, &grads);
        }
        let p = store.get("p").unwrap().data();
        assert!((p[0] - 3.0).abs() < 1e-3 && (p[1] + 1.0).abs() < 1e-3, "{p:?}");
    }

    #[test]
    fn sgd_step_matches_hand_computation() {
        let mut store = ParamStore::new();
        store.insert("p", Kind::Param, Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let (loss, grads) = quadratic(&store);
        assert_eq!(loss, 4.0 + 4.0);
        assert_eq!(grads.get("p").unwrap().data(), &[-4.0, 4.0]);
        Sgd { lr: 0.25 }.step(&mut store, &grads);
        assert_eq!(store.get("p").unwrap().data(), &[2.0, 0.0]);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut store = ParamStore::new();
        store.insert("p", Kind::Buffer, Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let (_, grads) = quadratic(&store);
        Sgd { lr: 1.0 }.step(&mut store, &grads);
        assert_eq!(store.get("p").unwrap().data(), &[0.0, 0.0]);
    }
}
