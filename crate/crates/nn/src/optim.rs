use std::collections::BTreeMap;

use crate::error::NnError;
use crate::graph::Matrix;
use crate::params::ParamStore;

pub const RMSPROP_ALPHA: f64 = 0.99;
pub const RMSPROP_EPS: f64 = 1e-8;

/// RMSprop without momentum and with decoupled weight decay:
///
/// ```text
/// acc <- alpha * acc + (1 - alpha) * g^2
/// p   <- p - lr * g / (sqrt(acc) + eps) - weight_decay * p
/// ```
///
/// The optimizer table's Beta1 has no role in this variant.
#[derive(Clone, Debug)]
pub struct RmsProp {
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub eps: f64,
    accum: BTreeMap<String, Matrix>,
}

impl RmsProp {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            alpha: RMSPROP_ALPHA,
            eps: RMSPROP_EPS,
            accum: BTreeMap::new(),
        }
    }

    pub fn accumulators(&self) -> &BTreeMap<String, Matrix> {
        &self.accum
    }

    pub fn set_accumulators(&mut self, accum: BTreeMap<String, Matrix>) {
        self.accum = accum;
    }

    /// Applies one update from the gradients currently held by `store`.
    /// Nothing is modified if any gradient entry is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), NnError> {
        let mut bad = Vec::new();
        let mut count = 0;
        for id in store.ids() {
            let n = store.grad(id).iter().filter(|v| !v.is_finite()).count();
            if n > 0 {
                bad.push(store.name(id).to_string());
                count += n;
            }
        }
        if !bad.is_empty() {
            return Err(NnError::NonFinite { params: bad, count });
        }

        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let grad = store.grad(id).clone();
            let acc = self
                .accum
                .entry(name)
                .or_insert_with(|| Matrix::zeros(grad.raw_dim()));
            let (alpha, lr, eps, wd) = (self.alpha, self.lr, self.eps, self.weight_decay);
            let value = store.get_mut(id);
            ndarray::Zip::from(value)
                .and(acc)
                .and(&grad)
                .for_each(|p, a, &g| {
                    *a = alpha * *a + (1.0 - alpha) * g * g;
                    *p -= lr * g / (a.sqrt() + eps) + wd * *p;
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut store = ParamStore::new();
        let p = store.add("p", array![[0.3, -1.2]]);
        let mut opt = RmsProp::new(1e-4, 0.0);
        opt.step(&mut store).unwrap();
        assert_eq!(store.get(p), &array![[0.3, -1.2]]);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let mut store = ParamStore::new();
        let p = store.add("p", array![[0.0]]);
        store.zero_grad();
        store.accumulate_raw(p, &array![[1.0]]);
        let mut opt = RmsProp::new(1e-4, 0.0);
        opt.step(&mut store).unwrap();
        let expected = -1e-4 * 1.0 / (0.01f64.sqrt() + 1e-8);
        approx::assert_relative_eq!(store.get(p)[[0, 0]], expected, max_relative = 1e-12);
    }

    #[test]
    fn decay_only_shrinks_by_weight_decay() {
        let mut store = ParamStore::new();
        let p = store.add("p", array![[1.0]]);
        let mut opt = RmsProp::new(1e-4, 1e-5);
        opt.step(&mut store).unwrap();
        approx::assert_relative_eq!(store.get(p)[[0, 0]], 1.0 - 1e-5, max_relative = 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut store = ParamStore::new();
        let p = store.add("p", array![[1.0, 2.0]]);
        store.accumulate_raw(p, &array![[f64::NAN, 1.0]]);
        let mut opt = RmsProp::new(1e-4, 1e-5);
        let err = opt.step(&mut store).unwrap_err();
        assert!(matches!(err, NnError::NonFinite { count: 1, .. }));
        assert_eq!(store.get(p), &array![[1.0, 2.0]]);
    }
}
