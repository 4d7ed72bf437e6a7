use crate::error::{Error, Result};

use super::{ParamStore, Real};

/// Adam with decoupled weight decay.
///
/// Each update first shrinks every parameter by `1 - lr * weight_decay`,
/// then applies the bias-corrected Adam step. Gradients are left in place.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &[T] {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &[T] {
        &self.second[index]
    }

    /// Applies one update to every parameter of `store`.
    ///
    /// Every registered parameter must carry a gradient; call sites that
    /// leave a parameter out of the graph should not register it.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        if let Some(id) = store.ids().find(|&id| store.get(id).grad().is_none()) {
            return Err(Error::Contract(format!("parameter {} has no gradient", store.name(id))));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let bc1 = T::of(1.0 - self.beta1.powi(t));
        let bc2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        let decay = T::of(1.0 - self.lr * self.weight_decay);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let tensor = store.get_mut(id);
            let grad = tensor.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((p, &g), m), v) in tensor
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store_with_grad(value: f64, grad: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[1], vec![value]).unwrap());
        store.get_mut(id).accumulate_grad(&[grad]);
        store
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let mut store = store_with_grad(0.7, 0.0);
        let mut opt = AdamW::new(&store, 0.1, 0.0);
        opt.step(&mut store).unwrap();
        assert_eq!(store.get(store.find("w").unwrap()).data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; m_hat = 1, v_hat = 1 => step = lr / (1 + eps).
        let mut store = store_with_grad(0.0, 1.0);
        let mut opt = AdamW::new(&store, 0.1, 0.0);
        opt.step(&mut store).unwrap();
        let w = store.get(store.find("w").unwrap()).data()[0];
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((w - expected).abs() < 1e-12, "{w} vs {expected}");
        assert_eq!(opt.step_count(), 1);
        assert!((opt.first_moment(0)[0] - 0.1).abs() < 1e-15);
        assert!((opt.second_moment(0)[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_is_multiplicative() {
        let mut store = store_with_grad(2.0, 0.0);
        let mut opt = AdamW::new(&store, 0.1, 0.01);
        opt.step(&mut store).unwrap();
        let w = store.get(store.find("w").unwrap()).data()[0];
        assert_eq!(w, 2.0 * (1.0 - 0.1 * 0.01));
    }

    #[test]
    fn grads_survive_the_update() {
        let mut store = store_with_grad(1.0, 0.5);
        let mut opt = AdamW::new(&store, 0.01, 0.0);
        opt.step(&mut store).unwrap();
        opt.step(&mut store).unwrap();
        assert_eq!(store.get(store.find("w").unwrap()).grad(), Some(&[0.5][..]));
        assert_eq!(opt.step_count(), 2);
    }

    #[test]
    fn missing_grad_is_a_contract_error() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::zeros(&[3]));
        let mut opt = AdamW::new(&store, 0.1, 0.0);
        assert!(matches!(opt.step(&mut store), Err(Error::Contract(_))));
        assert_eq!(opt.step_count(), 0);
    }
}
