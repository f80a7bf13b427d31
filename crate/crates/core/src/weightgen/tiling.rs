//! Placement of SuperWeight slots inside layer weight grids.
//!
//! Layers of a cluster are visited from smallest to largest. The smallest
//! layer is covered by a single slot. Every following layer reuses all slots
//! created so far and only adds the weights it is missing: one slot when it
//! grows along a single channel dimension, two when it grows along both (the
//! input-channel extension first, then a full-width output-channel strip).
//! Grids therefore nest, and every layer's grid is partitioned exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::weightgen::{BankId, LayerId, LayerSpec, SlotId, WeightShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperWeightSlot {
    pub slot_id: SlotId,
    pub shape: WeightShape,
    pub bank_id: BankId,
    /// Layer whose growth created this slot.
    pub created_for: LayerId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub slot_id: SlotId,
    pub out_offset: usize,
    pub in_offset: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingPlan {
    pub layers: BTreeMap<LayerId, Vec<Placement>>,
}

impl TilingPlan {
    pub fn placements(&self, layer: LayerId) -> Option<&[Placement]> {
        self.layers.get(&layer).map(Vec::as_slice)
    }

    pub fn uses_slot(&self, layer: LayerId, slot: SlotId) -> bool {
        self.placements(layer)
            .is_some_and(|ps| ps.iter().any(|p| p.slot_id == slot))
    }
}

/// Orders layers for plan construction: by weight count, ties by layer id.
pub fn smallest_first(layers: &[LayerSpec]) -> Vec<LayerSpec> {
    let mut sorted = layers.to_vec();
    sorted.sort_by_key(|l| (l.shape.numel(), l.layer_id));
    sorted
}

/// Builds the tiling of one cluster. New slots receive consecutive ids
/// starting at `first_slot`; each slot is backed by the bank of the same id.
pub fn plan_tiling(layers: &[LayerSpec], first_slot: u32) -> Result<(TilingPlan, Vec<SuperWeightSlot>)> {
    let first = layers.first().ok_or(Error::EmptyCluster)?;
    let kernel = first.shape.kernel();
    for layer in layers {
        if layer.shape.kernel() != kernel {
            return Err(Error::KernelMismatch {
                first: kernel,
                second: layer.shape.kernel(),
            });
        }
    }
    let (kh, kw) = kernel;

    let mut plan = TilingPlan::default();
    let mut slots: Vec<SuperWeightSlot> = Vec::new();
    let mut current: Vec<Placement> = Vec::new();
    let mut covered: Option<(usize, usize)> = None;

    let add_slot = |slots: &mut Vec<SuperWeightSlot>, out_ch, in_ch, layer: LayerId| {
        let id = first_slot + slots.len() as u32;
        slots.push(SuperWeightSlot {
            slot_id: SlotId(id),
            shape: WeightShape::new(out_ch, in_ch, kh, kw),
            bank_id: BankId(id),
            created_for: layer,
        });
        SlotId(id)
    };

    for layer in smallest_first(layers) {
        let (out_ch, in_ch) = layer.shape.grid();
        match covered {
            None => {
                let slot_id = add_slot(&mut slots, out_ch, in_ch, layer.layer_id);
                current.push(Placement { slot_id, out_offset: 0, in_offset: 0 });
            }
            Some((prev_out, prev_in)) => {
                if out_ch < prev_out || in_ch < prev_in {
                    return Err(Error::NotNested {
                        layer: layer.layer_id.0,
                        layer_grid: (out_ch, in_ch),
                        previous_grid: (prev_out, prev_in),
                    });
                }
                if in_ch > prev_in {
                    let slot_id = add_slot(&mut slots, prev_out, in_ch - prev_in, layer.layer_id);
                    current.push(Placement { slot_id, out_offset: 0, in_offset: prev_in });
                }
                if out_ch > prev_out {
                    let slot_id = add_slot(&mut slots, out_ch - prev_out, in_ch, layer.layer_id);
                    current.push(Placement { slot_id, out_offset: prev_out, in_offset: 0 });
                }
            }
        }
        covered = Some((out_ch, in_ch));
        plan.layers.insert(layer.layer_id, current.clone());
    }
    Ok((plan, slots))
}

/// Splits a group of layers into sub-clusters that can each be tiled: first
/// by spatial kernel, then into chains of nested grids. A layer joins the
/// chain with the largest top grid it contains (ties: earliest chain).
pub fn split_tileable(layers: &[LayerSpec]) -> Vec<Vec<LayerSpec>> {
    let mut by_kernel: BTreeMap<(usize, usize), Vec<LayerSpec>> = BTreeMap::new();
    for layer in layers {
        by_kernel.entry(layer.shape.kernel()).or_default().push(*layer);
    }
    let mut chains_out = Vec::new();
    for group in by_kernel.values() {
        let mut chains: Vec<Vec<LayerSpec>> = Vec::new();
        for layer in smallest_first(group) {
            let (o, i) = layer.shape.grid();
            let best = chains
                .iter()
                .enumerate()
                .filter(|(_, chain)| {
                    let (to, ti) = chain.last().expect("chains are non-empty").shape.grid();
                    to <= o && ti <= i
                })
                .max_by(|(ia, a), (ib, b)| {
                    let ca = a.last().unwrap().shape.numel();
                    let cb = b.last().unwrap().shape.numel();
                    ca.cmp(&cb).then(ib.cmp(ia))
                })
                .map(|(idx, _)| idx);
            match best {
                Some(idx) => chains[idx].push(layer),
                None => chains.push(vec![layer]),
            }
        }
        chains_out.extend(chains);
    }
    chains_out.sort_by_key(|chain| chain.iter().map(|l| l.layer_id).min());
    chains_out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weightgen::{LayerKind, MemberId};

    fn layer(id: u32, out: usize, inp: usize) -> LayerSpec {
        LayerSpec {
            layer_id: LayerId(id),
            member_id: MemberId(0),
            kind: LayerKind::Affine,
            shape: WeightShape::affine(out, inp),
        }
    }

    /// Counts how many slot cells land on each grid cell.
    fn cover_counts(plan: &TilingPlan, slots: &[SuperWeightSlot], l: &LayerSpec) -> Vec<u32> {
        let (o, i) = l.shape.grid();
        let mut grid = vec![0u32; o * i];
        for p in plan.placements(l.layer_id).unwrap() {
            let s = slots.iter().find(|s| s.slot_id == p.slot_id).unwrap();
            for r in 0..s.shape.out_ch {
                for c in 0..s.shape.in_ch {
                    let (rr, cc) = (p.out_offset + r, p.in_offset + c);
                    assert!(rr < o && cc < i, "slot cell outside layer grid");
                    grid[rr * i + cc] += 1;
                }
            }
        }
        grid
    }

    #[test]
    fn single_layer_is_one_full_slot() {
        let l = layer(0, 5, 3);
        let (plan, slots) = plan_tiling(&[l], 0).unwrap();
        assert_eq!(slots.len(), 1);
        assert_eq!(slots[0].shape, l.shape);
        assert_eq!(plan.placements(l.layer_id).unwrap().len(), 1);
    }

    #[test]
    fn growth_in_both_dimensions_adds_two_slots() {
        let small = layer(1, 4, 4);
        let big = layer(0, 8, 6);
        let (plan, slots) = plan_tiling(&[big, small], 10).unwrap();
        let shapes: Vec<_> = slots.iter().map(|s| s.shape.grid()).collect();
        assert_eq!(shapes, vec![(4, 4), (4, 2), (4, 6)]);
        assert_eq!(slots[0].slot_id, SlotId(10));
        let placed: Vec<_> = plan
            .placements(big.layer_id)
            .unwrap()
            .iter()
            .map(|p| (p.out_offset, p.in_offset))
            .collect();
        assert_eq!(placed, vec![(0, 0), (0, 4), (4, 0)]);
        for l in [small, big] {
            assert!(cover_counts(&plan, &slots, &l).iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn hundred_k_then_four_hundred_k_adds_three_hundred_k() {
        let a = layer(0, 100, 1000);
        let b = layer(1, 400, 1000);
        let (_, slots) = plan_tiling(&[a, b], 0).unwrap();
        let new: usize = slots.iter().filter(|s| s.created_for == b.layer_id).map(|s| s.shape.numel()).sum();
        assert_eq!(new, 300_000);
    }

    #[test]
    fn equal_layers_share_every_slot() {
        let (plan, slots) = plan_tiling(&[layer(3, 6, 6), layer(1, 6, 6)], 0).unwrap();
        assert_eq!(slots.len(), 1);
        assert_eq!(plan.placements(LayerId(1)), plan.placements(LayerId(3)));
        assert_eq!(slots[0].created_for, LayerId(1));
    }

    #[test]
    fn rejects_mixed_kernels_and_non_nested_grids() {
        let mut conv = layer(1, 4, 4);
        conv.shape.kh = 3;
        conv.shape.kw = 3;
        assert!(matches!(plan_tiling(&[layer(0, 4, 4), conv], 0), Err(Error::KernelMismatch { .. })));
        assert!(matches!(
            plan_tiling(&[layer(0, 4, 8), layer(1, 8, 5)], 0),
            Err(Error::NotNested { .. })
        ));
        assert!(matches!(plan_tiling(&[], 0), Err(Error::EmptyCluster)));
    }

    #[test]
    fn split_produces_tileable_chains() {
        let layers = [layer(0, 32, 2), layer(1, 64, 2), layer(2, 32, 32), layer(3, 64, 64), layer(4, 32, 32)];
        let chains = split_tileable(&layers);
        for chain in &chains {
            plan_tiling(chain, 0).unwrap();
        }
        let ids: Vec<Vec<u32>> = chains.iter().map(|c| c.iter().map(|l| l.layer_id.0).collect()).collect();
        assert_eq!(ids, vec![vec![0, 1], vec![2, 4, 3]]);
    }
}
