//! Reverse-mode automatic differentiation over the tensor kernels.

mod check;
mod graph;
mod params;

pub use check::{
    error_floor, grad_check, relative_error, GradCheckOptions, GradCheckReport, DEFAULT_EPS, RELATIVE_ERROR_FLOOR,
};
pub use graph::{bce_mean, grouped_aggregate, Graph, Var};
pub use params::{ParamEntry, ParamGrads, ParamStore};

use crate::tensor::Scalar;

/// Plain stochastic gradient descent: `p ← p − lr·∇p` on unfrozen entries.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }

    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let lr = T::from_f64_lossy(self.lr);
        for name in store.trainable_names() {
            let grad = store.grad(&name).unwrap().clone();
            let value = store.value_mut(&name).unwrap();
            for (v, &g) in value.data_mut().iter_mut().zip(grad.data()) {
                *v -= lr * g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sum_gives_ones() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::<f64>::from_fn([2, 3], |i| i as f64));
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let loss = g.sum(x);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("x").unwrap(), &Tensor::ones([2, 3]));
    }

    #[test]
    fn half_square_gives_identity() {
        let mut store = ParamStore::new();
        let x0 = Tensor::<f64>::from_fn([4], |i| i as f64 - 1.5);
        store.insert("x", x0.clone());
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("x").unwrap(), &x0);
    }

    #[test]
    fn fan_out_accumulates_and_disconnected_is_zero() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::<f64>::ones([2]));
        store.insert("unused", Tensor::<f64>::ones([3]));
        let mut g = Graph::new();
        let a1 = g.param(&store, "a").unwrap();
        let a2 = g.param(&store, "a").unwrap();
        let _u = g.param(&store, "unused").unwrap();
        let s = g.add(a1, a2).unwrap();
        let loss = g.sum(s);
        let grads = g.gradients(loss).unwrap();
        assert_eq!(grads["a"], Tensor::full([2], 2.0));
        // recorded before the loss, never reached from it
        assert_eq!(grads["unused"], Tensor::zeros([3]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::<f32>::ones([2]));
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        assert!(matches!(g.gradients(x), Err(crate::Error::NonScalarLoss(_))));
    }

    #[test]
    fn frozen_params_are_constants() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::<f32>::ones([2]));
        store.set_frozen("x", true).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let loss = g.sum(x);
        assert!(g.gradients(loss).unwrap().is_empty());
    }

    #[test]
    fn sgd_skips_frozen() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::<f32>::ones([1]));
        store.insert("b", Tensor::<f32>::ones([1]));
        store.set_frozen("b", true).unwrap();
        let mut grads = ParamGrads::new();
        grads.insert("a".to_string(), Tensor::full([1], 2.0));
        grads.insert("b".to_string(), Tensor::full([1], 2.0));
        store.accumulate(&grads).unwrap();
        Sgd::new(0.5).step(&mut store);
        assert_eq!(store.get("a").unwrap().data(), &[0.0]);
        assert_eq!(store.get("b").unwrap().data(), &[1.0]);
    }
}
