use crate::error::{Error, Result};
use crate::graph::{GradBuffer, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Bias-corrected Adam moments for one parameter store.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar = f64> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store
            .iter()
            .map(|(_, _, t)| Tensor::new(t.shape().to_vec(), vec![T::zero(); t.len()]).expect("shape"))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
        }
    }

    /// One update with learning rate `lr` on every trainable parameter.
    ///
    /// ```text
    /// m ← β₁m + (1−β₁)g      v ← β₂v + (1−β₂)g²
    /// θ ← θ − lr · m̂ / (√v̂ + ε),   m̂ = m/(1−β₁ᵗ), v̂ = v/(1−β₂ᵗ)
    /// ```
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradBuffer<T>, lr: f64) -> Result<()> {
        if store.is_frozen() {
            return Ok(());
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - T::lit(self.beta1.powi(t));
        let c2 = T::one() - T::lit(self.beta2.powi(t));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let g = grads.get(id).data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let theta = store.get_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let upd = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                if !upd.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite Adam update in parameter `{}`",
                        store.name(id)
                    )));
                }
                theta[j] -= upd;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x)).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = scalar_store(0.5);
        let mut adam = AdamState::new(&store);
        let mut grads = GradBuffer::for_store(&store);
        let id = store.id_of("x").unwrap();
        grads.get_mut(id).data_mut()[0] = 1.0;
        adam.step(&mut store, &grads, 1e-3).unwrap();
        let delta = store.get(id).data()[0] - 0.5;
        // m̂ = 1, v̂ = 1 → Δ = −α / (1 + ε)
        assert!((delta + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut store = scalar_store(0.5);
        let id = store.id_of("x").unwrap();
        let mut adam = AdamState::new(&store);
        let mut grads = GradBuffer::for_store(&store);
        grads.get_mut(id).data_mut()[0] = 2.0;
        adam.step(&mut store, &grads, 1e-3).unwrap();
        let before = store.get(id).data()[0];
        let m1 = adam.m[0].data()[0];
        grads.zero();
        adam.step(&mut store, &grads, 0.0).unwrap();
        assert_eq!(store.get(id).data()[0], before);
        assert!((adam.m[0].data()[0] - 0.9 * m1).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameters_untouched() {
        let mut store = scalar_store(0.5);
        let id = store.id_of("x").unwrap();
        store.set_trainable(id, false);
        let mut adam = AdamState::new(&store);
        let mut grads = GradBuffer::for_store(&store);
        grads.get_mut(id).data_mut()[0] = 1.0;
        adam.step(&mut store, &grads, 1e-3).unwrap();
        assert_eq!(store.get(id).data()[0], 0.5);
    }

    #[test]
    fn quadratic_loss_decreases() {
        let mut store = scalar_store(3.0);
        let id = store.id_of("x").unwrap();
        let mut adam = AdamState::new(&store);
        let mut grads = GradBuffer::for_store(&store);
        let mut prev = f64::INFINITY;
        for _ in 0..20 {
            let x = store.get(id).data()[0];
            let loss = x * x;
            assert!(loss < prev);
            prev = loss;
            grads.get_mut(id).data_mut()[0] = 2.0 * x;
            adam.step(&mut store, &grads, 0.05).unwrap();
        }
    }
}
