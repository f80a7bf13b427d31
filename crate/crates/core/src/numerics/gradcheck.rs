use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{GradMap, ParamId, ParamStore, Scalar};

/// Anything with parameters and a deterministic scalar loss.
pub trait Differentiable<T: Scalar> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    fn loss_and_grad(&self) -> Result<(T, GradMap<T>)>;
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Entries sampled per parameter array; arrays smaller than this are checked in full.
    pub entries_per_param: usize,
    /// Floor for the relative-error denominator so that near-zero gradients
    /// are compared absolutely.
    pub denominator_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            entries_per_param: 16,
            denominator_floor: 1e-6,
            seed: 0,
        }
    }
}

/// Compares analytic gradients against central differences on sampled
/// entries of `ids` and returns the largest relative error seen.
pub fn finite_diff_check<T: Scalar, M: Differentiable<T>>(
    model: &mut M,
    ids: &[ParamId],
    config: GradCheckConfig,
) -> Result<f64> {
    let (_, analytic) = model.loss_and_grad()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let eps = T::lit(config.epsilon);
    let mut worst = 0.0f64;

    for &id in ids {
        let len = model.params().array(id).len();
        let grad = analytic
            .get(id)
            .ok_or(Error::MissingGradient(id.0))?
            .clone();
        let picks: Vec<usize> = if len <= config.entries_per_param {
            (0..len).collect()
        } else {
            sample(&mut rng, len, config.entries_per_param).into_vec()
        };
        for idx in picks {
            let original = model.params().array(id).values()[idx];
            model.params_mut().array_mut(id).values_mut()[idx] = original + eps;
            let (plus, _) = model.loss_and_grad()?;
            model.params_mut().array_mut(id).values_mut()[idx] = original - eps;
            let (minus, _) = model.loss_and_grad()?;
            model.params_mut().array_mut(id).values_mut()[idx] = original;

            let numeric = (plus.as_f64() - minus.as_f64()) / (2.0 * config.epsilon);
            let exact = grad.values()[idx].as_f64();
            if !numeric.is_finite() || !exact.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient check of parameter {} entry {idx}",
                    id.0
                )));
            }
            let denom = exact.abs().max(numeric.abs()).max(config.denominator_floor);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::CORRUPT_RELU_BACKWARD;
    use crate::numerics::{loss_and_grad, DenseArray, OpKind, Tape};
    use rand::Rng;

    /// `0.5 * |W x - y|^2` for a fixed batch, with analytic gradient `(Wx - y) x^T`.
    struct LinearQuadratic {
        store: ParamStore<f64>,
        w: ParamId,
        x: Vec<[f64; 3]>,
        y: Vec<[f64; 2]>,
    }

    impl Differentiable<f64> for LinearQuadratic {
        fn params(&self) -> &ParamStore<f64> {
            &self.store
        }
        fn params_mut(&mut self) -> &mut ParamStore<f64> {
            &mut self.store
        }
        fn loss_and_grad(&self) -> Result<(f64, GradMap<f64>)> {
            let w = self.store.array(self.w).values();
            let mut loss = 0.0;
            let mut g = vec![0.0; 6];
            for (x, y) in self.x.iter().zip(&self.y) {
                for o in 0..2 {
                    let r = (0..3).map(|i| w[o * 3 + i] * x[i]).sum::<f64>() - y[o];
                    loss += 0.5 * r * r;
                    for i in 0..3 {
                        g[o * 3 + i] += r * x[i];
                    }
                }
            }
            let mut map = GradMap::new();
            map.accumulate(self.w, DenseArray::new(vec![2, 3], g)?)?;
            Ok((loss, map))
        }
    }

    struct Mlp {
        store: ParamStore<f64>,
        layers: Vec<(ParamId, ParamId)>,
        x: DenseArray<f64>,
        labels: Vec<usize>,
    }

    impl Mlp {
        fn random(seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = [4usize, 6, 5, 3];
            let mut store = ParamStore::new();
            let mut layers = Vec::new();
            for pair in dims.windows(2) {
                let w = DenseArray::from_fn(&[pair[1], pair[0]], |_| rng.gen_range(-1.0..1.0));
                let b = DenseArray::from_fn(&[pair[1]], |_| rng.gen_range(-0.5..0.5));
                layers.push((store.insert(w, true), store.insert(b, true)));
            }
            let x = DenseArray::from_fn(&[5, 4], |_| rng.gen_range(-1.0..1.0));
            let labels = (0..5).map(|_| rng.gen_range(0..3)).collect();
            Self { store, layers, x, labels }
        }
    }

    impl Differentiable<f64> for Mlp {
        fn params(&self) -> &ParamStore<f64> {
            &self.store
        }
        fn params_mut(&mut self) -> &mut ParamStore<f64> {
            &mut self.store
        }
        fn loss_and_grad(&self) -> Result<(f64, GradMap<f64>)> {
            let mut tape = Tape::new();
            let mut h = tape.leaf(self.x.clone());
            for (k, &(w, b)) in self.layers.iter().enumerate() {
                let wv = tape.param(w, self.store.array(w).clone());
                let bv = tape.param(b, self.store.array(b).clone());
                h = tape.layer_forward("fc", OpKind::Affine, h, Some(wv), Some(bv))?;
                if k + 1 < self.layers.len() {
                    h = tape.layer_forward("relu", OpKind::Relu, h, None, None)?;
                }
            }
            loss_and_grad(&tape, h, &self.labels)
        }
    }

    fn all_ids(store: &ParamStore<f64>) -> Vec<ParamId> {
        store.iter().map(|h| h.id).collect()
    }

    #[test]
    fn quadratic_loss_is_exact_to_rounding() {
        let mut store = ParamStore::new();
        let w = store.insert(DenseArray::from_f64(&[2, 3], &[0.3, -0.2, 0.5, 1.1, 0.7, -0.4]).unwrap(), true);
        let mut model = LinearQuadratic {
            store,
            w,
            x: vec![[1.0, 2.0, -1.0], [0.5, -0.3, 0.8]],
            y: vec![[0.1, 0.2], [-1.0, 0.4]],
        };
        let err = finite_diff_check(&mut model, &[w], GradCheckConfig { epsilon: 1e-4, ..Default::default() }).unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn mlp_cross_entropy_matches_central_differences() {
        for seed in 0..5 {
            let mut model = Mlp::random(seed);
            let ids = all_ids(&model.store);
            let err = finite_diff_check(&mut model, &ids, GradCheckConfig::default()).unwrap();
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn corrupted_backward_rule_is_detected() {
        let mut model = Mlp::random(11);
        let ids = all_ids(&model.store);
        CORRUPT_RELU_BACKWARD.with(|c| c.set(true));
        let err = finite_diff_check(&mut model, &ids, GradCheckConfig::default());
        CORRUPT_RELU_BACKWARD.with(|c| c.set(false));
        let err = err.unwrap();
        assert!(err > 1e-2, "mutation went unnoticed: {err}");
    }
}
