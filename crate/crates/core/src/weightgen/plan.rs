use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::weightgen::tiling::{plan_tiling, split_tileable, Placement, SuperWeightSlot, TilingPlan};
use crate::weightgen::{validate_layers, BankId, CoeffId, LayerId, LayerSpec, SlotId};

/// Group of layers allowed to share template banks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub cluster_id: u32,
    pub layers: Vec<LayerId>,
    pub slots: Vec<SlotId>,
    pub tiling: TilingPlan,
}

/// One mixing vector over a slot's bank, used by `owner_layers`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoefficientSetSpec {
    pub coeff_id: CoeffId,
    pub slot_id: SlotId,
    pub owner_layers: BTreeSet<LayerId>,
}

/// Where every layer's weights come from: clusters, their slots and tilings,
/// and which coefficient set each (layer, slot) pair mixes with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingPlan {
    pub layers: Vec<LayerSpec>,
    pub clusters: Vec<Cluster>,
    pub slots: Vec<SuperWeightSlot>,
    pub coefficient_sets: Vec<CoefficientSetSpec>,
}

impl SharingPlan {
    /// Builds a hard-sharing plan (one coefficient set per slot) whose
    /// clusters refine `groups`: each group is split by kernel shape and into
    /// nested chains before tiling.
    pub fn from_groups(layers: &[LayerSpec], groups: &[Vec<LayerId>]) -> Result<Self> {
        validate_layers(layers)?;
        let by_id: BTreeMap<LayerId, LayerSpec> = layers.iter().map(|l| (l.layer_id, *l)).collect();
        let mut seen = BTreeSet::new();
        for group in groups {
            if group.is_empty() {
                return Err(Error::InvalidGrouping("empty group".to_owned()));
            }
            for id in group {
                if !by_id.contains_key(id) {
                    return Err(Error::UnknownLayer(id.0));
                }
                if !seen.insert(*id) {
                    return Err(Error::InvalidGrouping(format!("layer {id} appears in two groups")));
                }
            }
        }
        if seen.len() != by_id.len() {
            let missing: Vec<_> = by_id.keys().filter(|id| !seen.contains(id)).map(|id| id.0).collect();
            return Err(Error::InvalidGrouping(format!("layers {missing:?} are in no group")));
        }

        let mut chains: Vec<Vec<LayerSpec>> = Vec::new();
        for group in groups {
            let specs: Vec<LayerSpec> = group.iter().map(|id| by_id[id]).collect();
            chains.extend(split_tileable(&specs));
        }
        chains.sort_by_key(|chain| chain.iter().map(|l| l.layer_id).min());

        let mut clusters = Vec::new();
        let mut slots: Vec<SuperWeightSlot> = Vec::new();
        for (cid, chain) in chains.iter().enumerate() {
            let (tiling, new_slots) = plan_tiling(chain, slots.len() as u32)?;
            let mut member_ids: Vec<LayerId> = chain.iter().map(|l| l.layer_id).collect();
            member_ids.sort();
            clusters.push(Cluster {
                cluster_id: cid as u32,
                layers: member_ids,
                slots: new_slots.iter().map(|s| s.slot_id).collect(),
                tiling,
            });
            slots.extend(new_slots);
        }

        let mut plan = Self {
            layers: layers.to_vec(),
            clusters,
            slots,
            coefficient_sets: Vec::new(),
        };
        plan.coefficient_sets = plan
            .slots
            .iter()
            .map(|s| CoefficientSetSpec {
                coeff_id: CoeffId(s.slot_id.0),
                slot_id: s.slot_id,
                owner_layers: plan.slot_users(s.slot_id).into_iter().collect(),
            })
            .collect();
        plan.validate()?;
        Ok(plan)
    }

    pub fn layer(&self, id: LayerId) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.layer_id == id)
    }

    pub fn slot(&self, id: SlotId) -> Option<&SuperWeightSlot> {
        self.slots.iter().find(|s| s.slot_id == id)
    }

    pub fn bank_of(&self, slot: SlotId) -> Option<BankId> {
        self.slot(slot).map(|s| s.bank_id)
    }

    pub fn cluster_of(&self, layer: LayerId) -> Option<&Cluster> {
        self.clusters.iter().find(|c| c.layers.contains(&layer))
    }

    pub fn placements(&self, layer: LayerId) -> Option<&[Placement]> {
        self.cluster_of(layer).and_then(|c| c.tiling.placements(layer))
    }

    /// Slots tiling `layer`, in ascending slot id order.
    pub fn layer_slots(&self, layer: LayerId) -> Vec<SlotId> {
        let mut ids: Vec<SlotId> = self
            .placements(layer)
            .map(|ps| ps.iter().map(|p| p.slot_id).collect())
            .unwrap_or_default();
        ids.sort();
        ids
    }

    /// Layers whose tiling includes `slot`, ascending.
    pub fn slot_users(&self, slot: SlotId) -> Vec<LayerId> {
        self.clusters
            .iter()
            .flat_map(|c| c.layers.iter().filter(move |l| c.tiling.uses_slot(**l, slot)).copied())
            .collect()
    }

    /// Slots used by both layers (empty when they are in different clusters).
    pub fn shared_slots(&self, a: LayerId, b: LayerId) -> Vec<SlotId> {
        let sb: BTreeSet<SlotId> = self.layer_slots(b).into_iter().collect();
        self.layer_slots(a).into_iter().filter(|s| sb.contains(s)).collect()
    }

    /// Every unordered pair `(a, b)` with `a < b` sharing at least one slot.
    pub fn sharing_pairs(&self) -> Vec<(LayerId, LayerId)> {
        let mut pairs = Vec::new();
        for cluster in &self.clusters {
            for (i, &a) in cluster.layers.iter().enumerate() {
                for &b in &cluster.layers[i + 1..] {
                    if !self.shared_slots(a, b).is_empty() {
                        pairs.push((a.min(b), a.max(b)));
                    }
                }
            }
        }
        pairs.sort();
        pairs
    }

    pub fn coeff_for(&self, layer: LayerId, slot: SlotId) -> Option<CoeffId> {
        self.coefficient_sets
            .iter()
            .find(|c| c.slot_id == slot && c.owner_layers.contains(&layer))
            .map(|c| c.coeff_id)
    }

    pub fn coefficient_set(&self, id: CoeffId) -> Option<&CoefficientSetSpec> {
        self.coefficient_sets.iter().find(|c| c.coeff_id == id)
    }

    pub fn sets_for_slot(&self, slot: SlotId) -> Vec<&CoefficientSetSpec> {
        self.coefficient_sets.iter().filter(|c| c.slot_id == slot).collect()
    }

    /// (layer, slot) to coefficient set, for every tiled pair.
    pub fn assignment(&self) -> BTreeMap<(LayerId, SlotId), CoeffId> {
        let mut map = BTreeMap::new();
        for set in &self.coefficient_sets {
            for &layer in &set.owner_layers {
                map.insert((layer, set.slot_id), set.coeff_id);
            }
        }
        map
    }

    pub fn next_coeff_id(&self) -> CoeffId {
        CoeffId(self.coefficient_sets.iter().map(|c| c.coeff_id.0 + 1).max().unwrap_or(0))
    }

    /// Groups of layers forming each cluster.
    pub fn cluster_groups(&self) -> Vec<Vec<LayerId>> {
        self.clusters.iter().map(|c| c.layers.clone()).collect()
    }

    /// Checks the structural invariants: clusters partition the layers,
    /// tilings cover each grid exactly, and each tiled (layer, slot) pair has
    /// exactly one coefficient set drawn from the layer's cluster.
    pub fn validate(&self) -> Result<()> {
        let mut owner: BTreeMap<LayerId, usize> = BTreeMap::new();
        for (ci, cluster) in self.clusters.iter().enumerate() {
            for &l in &cluster.layers {
                if owner.insert(l, ci).is_some() {
                    return Err(Error::InvalidGrouping(format!("layer {l} is in two clusters")));
                }
            }
        }
        for layer in &self.layers {
            let ci = *owner
                .get(&layer.layer_id)
                .ok_or(Error::UnknownLayer(layer.layer_id.0))?;
            let cluster = &self.clusters[ci];
            let placements = cluster
                .tiling
                .placements(layer.layer_id)
                .ok_or(Error::UnknownLayer(layer.layer_id.0))?;
            let (o, i) = layer.shape.grid();
            let mut cover = vec![0u8; o * i];
            for p in placements {
                let slot = self.slot(p.slot_id).ok_or(Error::UnknownSlot {
                    layer: layer.layer_id.0,
                    slot: p.slot_id.0,
                })?;
                if !cluster.slots.contains(&p.slot_id) || slot.shape.kernel() != layer.shape.kernel() {
                    return Err(Error::InvalidGrouping(format!(
                        "slot {} is not a valid slot for layer {}",
                        p.slot_id, layer.layer_id
                    )));
                }
                for r in 0..slot.shape.out_ch {
                    for c in 0..slot.shape.in_ch {
                        let (rr, cc) = (p.out_offset + r, p.in_offset + c);
                        if rr >= o || cc >= i {
                            return Err(Error::InvalidGrouping(format!(
                                "slot {} overflows layer {}",
                                p.slot_id, layer.layer_id
                            )));
                        }
                        cover[rr * i + cc] += 1;
                    }
                }
                let sets: Vec<_> = self
                    .coefficient_sets
                    .iter()
                    .filter(|c| c.slot_id == p.slot_id && c.owner_layers.contains(&layer.layer_id))
                    .collect();
                if sets.len() != 1 {
                    return Err(Error::InvalidGrouping(format!(
                        "layer {} slot {} has {} coefficient sets",
                        layer.layer_id,
                        p.slot_id,
                        sets.len()
                    )));
                }
            }
            if cover.iter().any(|&c| c != 1) {
                return Err(Error::InvalidGrouping(format!(
                    "tiling of layer {} is not an exact cover",
                    layer.layer_id
                )));
            }
        }
        let mut ids = BTreeSet::new();
        for set in &self.coefficient_sets {
            if set.owner_layers.is_empty() || !ids.insert(set.coeff_id) {
                return Err(Error::InvalidGrouping(format!(
                    "coefficient set {} is empty or duplicated",
                    set.coeff_id
                )));
            }
            for &l in &set.owner_layers {
                let layer_cluster = owner.get(&l).ok_or(Error::UnknownLayer(l.0))?;
                if !self.clusters[*layer_cluster].tiling.uses_slot(l, set.slot_id) {
                    return Err(Error::InvalidGrouping(format!(
                        "coefficient set {} names layer {l}, which does not use slot {}",
                        set.coeff_id, set.slot_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Canonical text form; identical plans serialize identically.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}
