use crate::error::{Error, Result};
use crate::search::GradientLedger;
use crate::weightgen::{LayerId, SharingPlan, SlotId};

/// Norms below this make a similarity degenerate; it is then reported as 0.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Cosine similarity, or 0 when either vector is (numerically) zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na2: f64 = a.iter().map(|x| x * x).sum();
    let nb2: f64 = b.iter().map(|x| x * x).sum();
    if na2.sqrt() < DEGENERATE_NORM || nb2.sqrt() < DEGENERATE_NORM {
        return 0.0;
    }
    // A single square root keeps cos(a, a) exactly 1.
    (dot / (na2 * nb2).sqrt()).clamp(-1.0, 1.0)
}

fn gather(ledger: &GradientLedger, layer: LayerId, slots: &[SlotId]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for &slot in slots {
        let g = ledger
            .superweight_grad(layer, slot)
            .ok_or(Error::Unregistered { layer: layer.0, slot: slot.0 })?;
        out.extend_from_slice(g);
    }
    Ok(out)
}

/// Similarity of two layers over the SuperWeights they share: the cosine of
/// their accumulated SuperWeight gradients, concatenated over the shared
/// slots in ascending slot id order.
pub fn superweight_similarity(ledger: &GradientLedger, a: LayerId, b: LayerId, plan: &SharingPlan) -> Result<f64> {
    let shared = plan.shared_slots(a, b);
    if shared.is_empty() {
        return Err(Error::NoSharedSlot(a.0, b.0));
    }
    Ok(cosine(&gather(ledger, a, &shared)?, &gather(ledger, b, &shared)?))
}

/// Similarity of two layers' contributions to the gradient of the
/// coefficient set they share for `slot`.
pub fn coefficient_similarity(
    ledger: &GradientLedger,
    a: LayerId,
    b: LayerId,
    slot: SlotId,
    plan: &SharingPlan,
) -> Result<f64> {
    let not_sharing = || Error::NotSharingCoefficients {
        layer_a: a.0,
        layer_b: b.0,
        slot: slot.0,
    };
    match (plan.coeff_for(a, slot), plan.coeff_for(b, slot)) {
        (Some(x), Some(y)) if x == y => {}
        _ => return Err(not_sharing()),
    }
    let ga = ledger.coefficient_grad(a, slot).ok_or(Error::Unregistered { layer: a.0, slot: slot.0 })?;
    let gb = ledger.coefficient_grad(b, slot).ok_or(Error::Unregistered { layer: b.0, slot: slot.0 })?;
    Ok(cosine(ga, gb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DenseArray;
    use crate::weightgen::{allocate_templates, LayerKind, LayerSpec, MemberId, WeightShape};
    use std::collections::BTreeMap;

    #[test]
    fn cosine_reference_values() {
        assert_eq!(cosine(&[1.0, 2.0], &[1.0, 2.0]), 1.0);
        assert_eq!(cosine(&[1.0, 2.0], &[-1.0, -2.0]), -1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 1e-13], &[1.0, 1.0]), 0.0);
    }

    fn setup() -> (SharingPlan, GradientLedger) {
        let layers = [(0, 2, 2), (1, 2, 2), (2, 3, 2)].map(|(i, o, n)| LayerSpec {
            layer_id: LayerId(i),
            member_id: MemberId(0),
            kind: LayerKind::Affine,
            shape: WeightShape::affine(o, n),
        });
        let plan = SharingPlan::from_groups(&layers, &[vec![LayerId(0), LayerId(1)], vec![LayerId(2)]]).unwrap();
        let alloc = allocate_templates(100, &plan, 0).unwrap();
        (plan.clone(), GradientLedger::for_plan(&plan, &alloc))
    }

    fn record(ledger: &mut GradientLedger, layer: u32, sw: &[f64], coeff: &[f64]) {
        let key = (LayerId(layer), SlotId(0));
        let sw = BTreeMap::from([(key, DenseArray::<f64>::from_f64(&[sw.len()], sw).unwrap())]);
        let co = BTreeMap::from([(key, DenseArray::from_f64(&[coeff.len()], coeff).unwrap())]);
        ledger.record_batch(&sw, &co).unwrap();
    }

    #[test]
    fn superweight_similarity_cases() {
        let (plan, mut ledger) = setup();
        let n = ledger.coefficient_grad(LayerId(0), SlotId(0)).unwrap().len();
        record(&mut ledger, 0, &[1.0, 0.0, 0.0, 0.0], &vec![1.0; n]);
        record(&mut ledger, 1, &[0.0, 1.0, 0.0, 0.0], &vec![1.0; n]);
        let s = superweight_similarity(&ledger, LayerId(0), LayerId(1), &plan).unwrap();
        assert_eq!(s, 0.0);
        assert_eq!(s, superweight_similarity(&ledger, LayerId(1), LayerId(0), &plan).unwrap());
        assert!(matches!(
            superweight_similarity(&ledger, LayerId(0), LayerId(2), &plan),
            Err(Error::NoSharedSlot(0, 2))
        ));
        assert_eq!(coefficient_similarity(&ledger, LayerId(0), LayerId(1), SlotId(0), &plan).unwrap(), 1.0);
        assert!(matches!(
            coefficient_similarity(&ledger, LayerId(0), LayerId(2), SlotId(0), &plan),
            Err(Error::NotSharingCoefficients { .. })
        ));
    }
}
