use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, Scalar};
use crate::weightgen::{BankId, CoeffId, LayerId, SharingPlan, SlotId, TilingPlan, WeightShape};

/// `theta = sum_i alpha_i * T_i`.
pub fn compose_superweight<T: Scalar>(templates: &[&DenseArray<T>], alpha: &DenseArray<T>) -> Result<DenseArray<T>> {
    if templates.len() != alpha.len() || templates.is_empty() {
        return Err(Error::CoefficientLength {
            expected: templates.len(),
            actual: alpha.len(),
        });
    }
    let a = alpha.values();
    let mut out = templates[0].clone();
    out.scale(a[0]);
    for (t, &w) in templates.iter().zip(a).skip(1) {
        out.axpy(w, t)?;
    }
    Ok(out)
}

fn layer_dims(shape: &WeightShape) -> Vec<usize> {
    shape.dims().to_vec()
}

/// Concatenates a layer's slot arrays into its weight tensor
/// `(out_ch, in_ch, kh, kw)` following the tiling.
pub fn assemble_layer<'a, T: Scalar>(
    tiling: &TilingPlan,
    layer: LayerId,
    shape: WeightShape,
    slot_array: impl Fn(SlotId) -> Option<&'a DenseArray<T>>,
) -> Result<DenseArray<T>> {
    let placements = tiling.placements(layer).ok_or(Error::UnknownLayer(layer.0))?;
    let k = shape.kh * shape.kw;
    let mut weights = DenseArray::zeros(&layer_dims(&shape));
    let dst = weights.values_mut();
    for p in placements {
        let src = slot_array(p.slot_id).ok_or(Error::MissingSlot {
            layer: layer.0,
            slot: p.slot_id.0,
        })?;
        let ss = src.shape();
        if ss.len() != 4 || ss[2] * ss[3] != k || p.out_offset + ss[0] > shape.out_ch || p.in_offset + ss[1] > shape.in_ch {
            return Err(Error::Shape {
                layer: format!("slot {} of layer {}", p.slot_id, layer),
                expected: vec![shape.out_ch - p.out_offset.min(shape.out_ch), shape.in_ch - p.in_offset.min(shape.in_ch), shape.kh, shape.kw],
                actual: ss.to_vec(),
            });
        }
        let row = ss[1] * k;
        for r in 0..ss[0] {
            let d0 = ((p.out_offset + r) * shape.in_ch + p.in_offset) * k;
            dst[d0..d0 + row].copy_from_slice(&src.values()[r * row..(r + 1) * row]);
        }
    }
    Ok(weights)
}

/// Inverse of [`assemble_layer`]: cuts a full layer array (weights or their
/// gradient) into per-slot arrays.
pub fn slice_layer<T: Scalar>(
    plan: &SharingPlan,
    layer: LayerId,
    full: &DenseArray<T>,
) -> Result<BTreeMap<SlotId, DenseArray<T>>> {
    let spec = plan.layer(layer).ok_or(Error::UnknownLayer(layer.0))?;
    let shape = spec.shape;
    if full.shape() != layer_dims(&shape).as_slice() && full.len() != shape.numel() {
        return Err(Error::Shape {
            layer: format!("layer {layer}"),
            expected: layer_dims(&shape),
            actual: full.shape().to_vec(),
        });
    }
    let k = shape.kh * shape.kw;
    let mut out = BTreeMap::new();
    for p in plan.placements(layer).ok_or(Error::UnknownLayer(layer.0))? {
        let slot = plan.slot(p.slot_id).ok_or(Error::UnknownSlot {
            layer: layer.0,
            slot: p.slot_id.0,
        })?;
        let row = slot.shape.in_ch * k;
        let mut vals = Vec::with_capacity(slot.shape.numel());
        for r in 0..slot.shape.out_ch {
            let s0 = ((p.out_offset + r) * shape.in_ch + p.in_offset) * k;
            vals.extend_from_slice(&full.values()[s0..s0 + row]);
        }
        out.insert(p.slot_id, DenseArray::new(slot.shape.dims().to_vec(), vals)?);
    }
    Ok(out)
}

/// Gradients of the loss w.r.t. templates and coefficients, obtained from the
/// per-(layer, slot) gradients w.r.t. the composed SuperWeights.
#[derive(Debug, Clone)]
pub struct CompositionGrads<T> {
    pub templates: BTreeMap<BankId, Vec<DenseArray<T>>>,
    pub coefficients: BTreeMap<CoeffId, DenseArray<T>>,
    /// Each layer's own contribution to its coefficient set's gradient, before
    /// summing over the layers that share the set.
    pub per_layer_coefficients: BTreeMap<(LayerId, SlotId), DenseArray<T>>,
}

/// Chain rule through `theta = sum_i alpha_i T_i`:
/// `dL/dalpha_i = <dL/dtheta, T_i>` summed over the layers sharing the
/// coefficient set, and `dL/dT_i = sum alpha_i dL/dtheta` over every use of
/// the bank.
pub fn grads_to_templates_and_coeffs<T: Scalar>(
    plan: &SharingPlan,
    banks: &BTreeMap<BankId, Vec<&DenseArray<T>>>,
    alphas: &BTreeMap<CoeffId, &DenseArray<T>>,
    slot_grads: &BTreeMap<(LayerId, SlotId), DenseArray<T>>,
) -> Result<CompositionGrads<T>> {
    let assignment = plan.assignment();
    let mut out = CompositionGrads {
        templates: BTreeMap::new(),
        coefficients: BTreeMap::new(),
        per_layer_coefficients: BTreeMap::new(),
    };
    for (&(layer, slot), dtheta) in slot_grads {
        let unknown = Error::UnknownSlot { layer: layer.0, slot: slot.0 };
        let coeff = *assignment.get(&(layer, slot)).ok_or(unknown)?;
        let bank = plan.bank_of(slot).ok_or(Error::UnknownSlot { layer: layer.0, slot: slot.0 })?;
        let templates = banks.get(&bank).ok_or(Error::UnknownSlot { layer: layer.0, slot: slot.0 })?;
        let alpha = alphas.get(&coeff).ok_or(Error::UnknownSlot { layer: layer.0, slot: slot.0 })?;
        if alpha.len() != templates.len() {
            return Err(Error::CoefficientLength {
                expected: templates.len(),
                actual: alpha.len(),
            });
        }

        let mut contribution = Vec::with_capacity(templates.len());
        for t in templates {
            contribution.push(dtheta.dot(t)?);
        }
        let contribution = DenseArray::new(vec![templates.len()], contribution)?;
        match out.coefficients.get_mut(&coeff) {
            Some(acc) => acc.add_assign(&contribution)?,
            None => {
                out.coefficients.insert(coeff, contribution.clone());
            }
        }
        out.per_layer_coefficients.insert((layer, slot), contribution);

        let bank_grads = out
            .templates
            .entry(bank)
            .or_insert_with(|| templates.iter().map(|t| DenseArray::zeros(t.shape())).collect());
        for (g, &a) in bank_grads.iter_mut().zip(alpha.values()) {
            g.axpy(a, dtheta)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weightgen::{LayerKind, LayerSpec, MemberId};
    use proptest::prelude::*;

    fn arr(shape: &[usize], v: &[f64]) -> DenseArray<f64> {
        DenseArray::from_f64(shape, v).unwrap()
    }

    #[test]
    fn one_hot_recovers_template_bitwise() {
        let t0 = arr(&[1, 3, 1, 1], &[0.1, -0.7, 3.3]);
        let t1 = arr(&[1, 3, 1, 1], &[1.9, 0.2, -5.0]);
        let composed = compose_superweight(&[&t0, &t1], &arr(&[2], &[0.0, 1.0])).unwrap();
        assert_eq!(composed, t1);
        let composed = compose_superweight(&[&t0, &t1], &arr(&[2], &[1.0, 0.0])).unwrap();
        assert_eq!(composed, t0);
        let mean = compose_superweight(&[&t0, &t1], &arr(&[2], &[0.5, 0.5])).unwrap();
        for (m, e) in mean.values().iter().zip([1.0, -0.25, -0.85]) {
            assert!((m - e).abs() < 1e-15);
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let t0 = arr(&[1, 1, 1, 1], &[1.0]);
        assert!(matches!(
            compose_superweight(&[&t0], &arr(&[2], &[1.0, 1.0])),
            Err(Error::CoefficientLength { expected: 1, actual: 2 })
        ));
    }

    proptest! {
        #[test]
        fn composition_is_linear_in_alpha(
            t in proptest::collection::vec(-3.0f64..3.0, 12),
            a in proptest::collection::vec(-2.0f64..2.0, 3),
            b in proptest::collection::vec(-2.0f64..2.0, 3),
        ) {
            let templates: Vec<DenseArray<f64>> = t.chunks(4).map(|c| arr(&[2, 2, 1, 1], c)).collect();
            let refs: Vec<&DenseArray<f64>> = templates.iter().collect();
            let ca = compose_superweight(&refs, &arr(&[3], &a)).unwrap();
            let cb = compose_superweight(&refs, &arr(&[3], &b)).unwrap();
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let cs = compose_superweight(&refs, &arr(&[3], &sum)).unwrap();
            for ((x, y), z) in ca.values().iter().zip(cb.values()).zip(cs.values()) {
                prop_assert!((x + y - z).abs() <= 1e-6 * z.abs().max(1.0));
            }
        }
    }

    fn two_layer_plan() -> SharingPlan {
        let layers = [(0, 4, 4), (1, 8, 6)].map(|(i, o, n)| LayerSpec {
            layer_id: LayerId(i),
            member_id: MemberId(0),
            kind: LayerKind::Affine,
            shape: WeightShape::affine(o, n),
        });
        SharingPlan::from_groups(&layers, &[vec![LayerId(0), LayerId(1)]]).unwrap()
    }

    #[test]
    fn slicing_assembled_layer_recovers_slots() {
        let plan = two_layer_plan();
        let slots: BTreeMap<SlotId, DenseArray<f64>> = plan
            .slots
            .iter()
            .map(|s| {
                let base = 100.0 * (s.slot_id.0 + 1) as f64;
                (s.slot_id, DenseArray::from_fn(&s.shape.dims(), |i| base + i as f64))
            })
            .collect();
        let layer = LayerId(1);
        let tiling = &plan.cluster_of(layer).unwrap().tiling;
        let w = assemble_layer(tiling, layer, plan.layer(layer).unwrap().shape, |s| slots.get(&s)).unwrap();
        let back = slice_layer(&plan, layer, &w).unwrap();
        assert_eq!(back.len(), 3);
        for (id, arr) in back {
            assert_eq!(arr, slots[&id]);
        }
    }

    #[test]
    fn sentinel_slot_fills_exactly_its_cells() {
        let plan = two_layer_plan();
        let layer = LayerId(1);
        let tiling = &plan.cluster_of(layer).unwrap().tiling;
        for target in &plan.slots {
            let slots: BTreeMap<SlotId, DenseArray<f64>> = plan
                .slots
                .iter()
                .map(|s| {
                    let v = if s.slot_id == target.slot_id { 7.5 } else { 0.0 };
                    (s.slot_id, DenseArray::filled(&s.shape.dims(), v))
                })
                .collect();
            let w = assemble_layer(tiling, layer, plan.layer(layer).unwrap().shape, |s| slots.get(&s)).unwrap();
            let hits = w.values().iter().filter(|&&v| v == 7.5).count();
            assert_eq!(hits, target.shape.numel());
        }
    }

    #[test]
    fn missing_slot_is_an_error() {
        let plan = two_layer_plan();
        let layer = LayerId(1);
        let tiling = &plan.cluster_of(layer).unwrap().tiling;
        let err = assemble_layer::<f64>(tiling, layer, plan.layer(layer).unwrap().shape, |_| None).unwrap_err();
        assert!(matches!(err, Error::MissingSlot { layer: 1, .. }));
    }

    #[test]
    fn scalar_chain_rule_for_single_template() {
        let layers = [LayerSpec {
            layer_id: LayerId(0),
            member_id: MemberId(0),
            kind: LayerKind::Affine,
            shape: WeightShape::affine(1, 2),
        }];
        let plan = SharingPlan::from_groups(&layers, &[vec![LayerId(0)]]).unwrap();
        let t = arr(&[1, 2, 1, 1], &[2.0, -1.0]);
        let alpha = arr(&[1], &[3.0]);
        let banks = BTreeMap::from([(BankId(0), vec![&t])]);
        let alphas = BTreeMap::from([(CoeffId(0), &alpha)]);
        let dtheta = arr(&[1, 2, 1, 1], &[0.5, 0.25]);
        let grads = BTreeMap::from([((LayerId(0), SlotId(0)), dtheta.clone())]);
        let out = grads_to_templates_and_coeffs(&plan, &banks, &alphas, &grads).unwrap();
        assert_eq!(out.templates[&BankId(0)][0].values(), &[1.5, 0.75]);
        assert_eq!(out.coefficients[&CoeffId(0)].values(), &[0.75]);
    }

    #[test]
    fn opposite_layer_gradients_cancel_on_shared_coefficients() {
        let layers = [0, 1].map(|i| LayerSpec {
            layer_id: LayerId(i),
            member_id: MemberId(0),
            kind: LayerKind::Affine,
            shape: WeightShape::affine(2, 2),
        });
        let plan = SharingPlan::from_groups(&layers, &[vec![LayerId(0), LayerId(1)]]).unwrap();
        let t = arr(&[2, 2, 1, 1], &[1.0, 2.0, 3.0, 4.0]);
        let alpha = arr(&[1], &[1.0]);
        let banks = BTreeMap::from([(BankId(0), vec![&t])]);
        let alphas = BTreeMap::from([(CoeffId(0), &alpha)]);
        let g = arr(&[2, 2, 1, 1], &[0.1, -0.2, 0.3, 0.4]);
        let grads = BTreeMap::from([
            ((LayerId(0), SlotId(0)), g.clone()),
            ((LayerId(1), SlotId(0)), g.map(|v| -v)),
        ]);
        let out = grads_to_templates_and_coeffs(&plan, &banks, &alphas, &grads).unwrap();
        assert_eq!(out.coefficients[&CoeffId(0)].values(), &[0.0]);
        let a = out.per_layer_coefficients[&(LayerId(0), SlotId(0))].values()[0];
        let b = out.per_layer_coefficients[&(LayerId(1), SlotId(0))].values()[0];
        assert!(a != 0.0 && a == -b);
    }

    #[test]
    fn unknown_slot_is_an_error() {
        let plan = two_layer_plan();
        let grads = BTreeMap::from([((LayerId(0), SlotId(2)), arr(&[1, 1, 1, 1], &[1.0]))]);
        let err = grads_to_templates_and_coeffs::<f64>(&plan, &BTreeMap::new(), &BTreeMap::new(), &grads).unwrap_err();
        assert!(matches!(err, Error::UnknownSlot { layer: 0, slot: 2 }));
    }
}
