use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, GradMap, ParamId, ParamStore, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Plain (non-Nesterov) momentum SGD with L2 weight decay folded into the gradient:
/// `v <- momentum * v + g + wd * p`, `p <- p - lr * v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd<T> {
    velocity: BTreeMap<ParamId, DenseArray<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new() -> Self {
        Self {
            velocity: BTreeMap::new(),
        }
    }

    /// One update over every trainable parameter in `store`. Parameters in
    /// `decay_exempt` receive no weight decay.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &GradMap<T>,
        config: SgdConfig,
        decay_exempt: &BTreeSet<ParamId>,
    ) -> Result<()> {
        if config.lr.is_nan() || config.lr <= 0.0 {
            return Err(Error::Optimizer(format!("learning rate must be positive, got {}", config.lr)));
        }
        if !(0.0..1.0).contains(&config.momentum) {
            return Err(Error::Optimizer(format!("momentum must lie in [0, 1), got {}", config.momentum)));
        }
        for handle in store.iter() {
            if handle.trainable && grads.get(handle.id).is_none() {
                return Err(Error::MissingGradient(handle.id.0));
            }
        }
        grads.validate(store)?;

        let lr = T::lit(config.lr);
        let momentum = T::lit(config.momentum);
        for handle in store.iter_mut().filter(|h| h.trainable) {
            let grad = grads.get(handle.id).expect("checked above");
            let decay = if decay_exempt.contains(&handle.id) {
                T::zero()
            } else {
                T::lit(config.weight_decay)
            };
            let velocity = self
                .velocity
                .entry(handle.id)
                .or_insert_with(|| DenseArray::zeros(grad.shape()));
            let params = handle.array.values_mut();
            for ((v, &g), p) in velocity.values_mut().iter_mut().zip(grad.values()).zip(params.iter_mut()) {
                *v = momentum * *v + g + decay * *p;
                *p -= lr * *v;
            }
        }
        Ok(())
    }

    /// Copies the momentum state of `from` onto `to` (used when a parameter
    /// is duplicated mid-training).
    pub fn clone_state(&mut self, from: ParamId, to: ParamId) {
        if let Some(v) = self.velocity.get(&from).cloned() {
            self.velocity.insert(to, v);
        }
    }

    pub fn forget(&mut self, id: ParamId) {
        self.velocity.remove(&id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(value: f64, grad: f64) -> (ParamStore<f64>, ParamId, GradMap<f64>) {
        let mut store = ParamStore::new();
        let id = store.insert(DenseArray::from_f64(&[1], &[value]).unwrap(), true);
        let mut grads = GradMap::new();
        grads.accumulate(id, DenseArray::from_f64(&[1], &[grad]).unwrap()).unwrap();
        (store, id, grads)
    }

    #[test]
    fn vanilla_step_subtracts_gradient() {
        let (mut store, id, grads) = setup(3.0, 0.25);
        let cfg = SgdConfig { lr: 1.0, momentum: 0.0, weight_decay: 0.0 };
        Sgd::new().step(&mut store, &grads, cfg, &BTreeSet::new()).unwrap();
        assert_eq!(store.array(id).values(), &[2.75]);
    }

    #[test]
    fn exempt_parameters_skip_weight_decay() {
        let (mut a, id_a, grads_a) = setup(2.0, 0.5);
        let (mut b, _, grads_b) = setup(2.0, 0.5);
        let exempt: BTreeSet<_> = [id_a].into();
        Sgd::new()
            .step(&mut a, &grads_a, SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.3 }, &exempt)
            .unwrap();
        Sgd::new()
            .step(&mut b, &grads_b, SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 }, &BTreeSet::new())
            .unwrap();
        assert_eq!(a.array(id_a).values()[0].to_bits(), b.iter().next().unwrap().array.values()[0].to_bits());
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        // v1 = g, v2 = 0.9 g + g, so the total movement is lr * (g + 1.9 g).
        let (mut store, id, grads) = setup(0.0, 1.0);
        let cfg = SgdConfig { lr: 0.5, momentum: 0.9, weight_decay: 0.0 };
        let mut opt = Sgd::new();
        opt.step(&mut store, &grads, cfg, &BTreeSet::new()).unwrap();
        opt.step(&mut store, &grads, cfg, &BTreeSet::new()).unwrap();
        assert!((store.array(id).values()[0] + 0.5 * 2.9).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = ParamStore::<f32>::new();
        store.insert(DenseArray::zeros(&[2]), true);
        let err = Sgd::new()
            .step(&mut store, &GradMap::new(), SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 }, &BTreeSet::new())
            .unwrap_err();
        assert!(matches!(err, Error::MissingGradient(0)));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let (mut store, _, grads) = setup(0.0, 1.0);
        let mut opt = Sgd::new();
        assert!(opt
            .step(&mut store, &grads, SgdConfig { lr: 0.0, momentum: 0.0, weight_decay: 0.0 }, &BTreeSet::new())
            .is_err());
        assert!(opt
            .step(&mut store, &grads, SgdConfig { lr: 0.1, momentum: 1.0, weight_decay: 0.0 }, &BTreeSet::new())
            .is_err());
    }
}
