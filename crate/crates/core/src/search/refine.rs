use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::search::{coefficient_similarity, group_by_queue, superweight_similarity, GradientLedger, LayerGroups, SimilarityQueue};
use crate::weightgen::{CoeffId, CoefficientSetSpec, LayerId, SharingPlan, SlotId};

/// One similarity evaluation, as exported for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub layer_i: LayerId,
    pub layer_j: LayerId,
    pub slots: Vec<SlotId>,
    pub psi: f64,
}

/// SuperWeight similarity of every pair of layers sharing a slot.
pub fn superweight_similarities(plan: &SharingPlan, ledger: &GradientLedger) -> Result<Vec<SimilarityRecord>> {
    plan.sharing_pairs()
        .into_iter()
        .map(|(a, b)| {
            Ok(SimilarityRecord {
                layer_i: a,
                layer_j: b,
                slots: plan.shared_slots(a, b),
                psi: superweight_similarity(ledger, a, b, plan)?,
            })
        })
        .collect()
}

/// Runs the queue grouping at threshold `tau`; layers that share nothing with
/// any other layer become singletons.
pub fn cluster_by_similarity(plan: &SharingPlan, records: &[SimilarityRecord], tau: f64) -> LayerGroups {
    let queue: SimilarityQueue = records.iter().map(|r| (r.psi, r.layer_i, r.layer_j)).collect();
    group_by_queue(queue, tau)
        .with_singletons(plan.layers.iter().map(|l| l.layer_id))
        .canonical()
}

/// A coefficient set handed to a subset of its former owners. The new set
/// starts as an exact copy of `from`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoefficientSplit {
    pub from: CoeffId,
    pub to: CoeffId,
    pub slot: SlotId,
    pub layers: BTreeSet<LayerId>,
}

#[derive(Debug, Clone)]
pub struct Refinement {
    pub plan: SharingPlan,
    pub splits: Vec<CoefficientSplit>,
    pub similarities: Vec<SimilarityRecord>,
}

/// Splits every coefficient set according to `group_owners`. The group
/// holding the set's lowest layer id keeps the original set.
fn split_sets(
    plan: &SharingPlan,
    mut group_owners: impl FnMut(&CoefficientSetSpec) -> Result<(LayerGroups, Vec<SimilarityRecord>)>,
) -> Result<Refinement> {
    let mut next = plan.next_coeff_id().0;
    let mut sets = Vec::new();
    let mut splits = Vec::new();
    let mut similarities = Vec::new();
    for set in &plan.coefficient_sets {
        let (groups, records) = group_owners(set)?;
        similarities.extend(records);
        for (i, group) in groups.canonical().groups().iter().enumerate() {
            let coeff_id = if i == 0 {
                set.coeff_id
            } else {
                let id = CoeffId(next);
                next += 1;
                splits.push(CoefficientSplit {
                    from: set.coeff_id,
                    to: id,
                    slot: set.slot_id,
                    layers: group.clone(),
                });
                id
            };
            sets.push(CoefficientSetSpec {
                coeff_id,
                slot_id: set.slot_id,
                owner_layers: group.clone(),
            });
        }
    }
    let mut refined = plan.clone();
    sets.sort_by_key(|s| s.coeff_id);
    refined.coefficient_sets = sets;
    refined.validate()?;
    Ok(Refinement {
        plan: refined,
        splits,
        similarities,
    })
}

/// Coefficient refinement: per shared coefficient set, groups its owner
/// layers by the similarity of their coefficient gradients at threshold
/// `beta` and gives each group its own copy of the coefficients.
pub fn refine_coefficients(plan: &SharingPlan, ledger: &GradientLedger, beta: f64) -> Result<Refinement> {
    split_sets(plan, |set| {
        let owners: Vec<LayerId> = set.owner_layers.iter().copied().collect();
        let mut records = Vec::new();
        for (i, &a) in owners.iter().enumerate() {
            for &b in &owners[i + 1..] {
                records.push(SimilarityRecord {
                    layer_i: a,
                    layer_j: b,
                    slots: vec![set.slot_id],
                    psi: coefficient_similarity(ledger, a, b, set.slot_id, plan)?,
                });
            }
        }
        let queue: SimilarityQueue = records.iter().map(|r| (r.psi, r.layer_i, r.layer_j)).collect();
        let groups = group_by_queue(queue, beta).with_singletons(owners.iter().copied());
        Ok((groups, records))
    })
}

/// Gives every (layer, slot) pair its own coefficient set.
pub fn decouple_coefficients(plan: &SharingPlan) -> Result<Refinement> {
    split_sets(plan, |set| {
        let groups = LayerGroups::new(set.owner_layers.iter().map(|&l| BTreeSet::from([l])).collect())?;
        Ok((groups, Vec::new()))
    })
}
