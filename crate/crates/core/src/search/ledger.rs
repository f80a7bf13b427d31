use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, Scalar};
use crate::weightgen::{LayerId, SharingPlan, SlotId, TemplateAllocation};

/// Per-(layer, slot) gradients summed over the batches of an epoch: the
/// gradient w.r.t. the composed SuperWeight along that layer's path, and the
/// layer's own contribution to the gradient of its coefficient set.
///
/// Sums are kept in 64-bit regardless of the model precision.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientLedger {
    superweights: BTreeMap<(LayerId, SlotId), Vec<f64>>,
    coefficients: BTreeMap<(LayerId, SlotId), Vec<f64>>,
    batches: usize,
}

fn add_into<T: Scalar>(acc: &mut [f64], g: &DenseArray<T>, layer: LayerId, slot: SlotId, what: &str) -> Result<()> {
    if g.len() != acc.len() {
        return Err(Error::Shape {
            layer: format!("{what} gradient of layer {layer} slot {slot}"),
            expected: vec![acc.len()],
            actual: g.shape().to_vec(),
        });
    }
    for (a, &v) in acc.iter_mut().zip(g.values()) {
        *a += v.as_f64();
    }
    Ok(())
}

fn merge_map(
    dst: &mut BTreeMap<(LayerId, SlotId), Vec<f64>>,
    src: &BTreeMap<(LayerId, SlotId), Vec<f64>>,
) -> Result<()> {
    for (&(layer, slot), values) in src {
        let acc = dst
            .get_mut(&(layer, slot))
            .ok_or(Error::Unregistered { layer: layer.0, slot: slot.0 })?;
        if acc.len() != values.len() {
            return Err(Error::Shape {
                layer: format!("ledger entry for layer {layer} slot {slot}"),
                expected: vec![acc.len()],
                actual: vec![values.len()],
            });
        }
        for (a, b) in acc.iter_mut().zip(values) {
            *a += b;
        }
    }
    Ok(())
}

impl GradientLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers every tiled (layer, slot) pair of `plan` with zeroed sums.
    pub fn for_plan(plan: &SharingPlan, alloc: &TemplateAllocation) -> Self {
        let mut ledger = Self::new();
        for layer in &plan.layers {
            for slot in plan.layer_slots(layer.layer_id) {
                let s = plan.slot(slot).expect("tiled slots exist");
                ledger.register(layer.layer_id, slot, s.shape.numel(), alloc.templates_for(s.bank_id));
            }
        }
        ledger
    }

    pub fn register(&mut self, layer: LayerId, slot: SlotId, slot_len: usize, templates: usize) {
        self.superweights.insert((layer, slot), vec![0.0; slot_len]);
        self.coefficients.insert((layer, slot), vec![0.0; templates]);
    }

    /// Adds one batch. Either map may omit pairs; every present pair must be
    /// registered with matching length.
    pub fn record_batch<T: Scalar>(
        &mut self,
        superweight_grads: &BTreeMap<(LayerId, SlotId), DenseArray<T>>,
        coefficient_grads: &BTreeMap<(LayerId, SlotId), DenseArray<T>>,
    ) -> Result<()> {
        for (&(layer, slot), g) in superweight_grads {
            let acc = self
                .superweights
                .get_mut(&(layer, slot))
                .ok_or(Error::Unregistered { layer: layer.0, slot: slot.0 })?;
            add_into(acc, g, layer, slot, "SuperWeight")?;
        }
        for (&(layer, slot), g) in coefficient_grads {
            let acc = self
                .coefficients
                .get_mut(&(layer, slot))
                .ok_or(Error::Unregistered { layer: layer.0, slot: slot.0 })?;
            add_into(acc, g, layer, slot, "coefficient")?;
        }
        self.batches += 1;
        Ok(())
    }

    /// Adds another ledger's sums (for example from a separate data shard).
    pub fn merge(&mut self, other: &GradientLedger) -> Result<()> {
        merge_map(&mut self.superweights, &other.superweights)?;
        merge_map(&mut self.coefficients, &other.coefficients)?;
        self.batches += other.batches;
        Ok(())
    }

    /// Zeroes every sum, keeping registrations.
    pub fn reset(&mut self) {
        for v in self.superweights.values_mut().chain(self.coefficients.values_mut()) {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        self.batches = 0;
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    pub fn superweight_grad(&self, layer: LayerId, slot: SlotId) -> Option<&[f64]> {
        self.superweights.get(&(layer, slot)).map(Vec::as_slice)
    }

    pub fn coefficient_grad(&self, layer: LayerId, slot: SlotId) -> Option<&[f64]> {
        self.coefficients.get(&(layer, slot)).map(Vec::as_slice)
    }

    /// Multiplies one layer's accumulated SuperWeight gradients by `factor`.
    pub fn scale_layer(&mut self, layer: LayerId, factor: f64) {
        for ((l, _), v) in self.superweights.iter_mut() {
            if *l == layer {
                v.iter_mut().for_each(|x| *x *= factor);
            }
        }
    }
}
