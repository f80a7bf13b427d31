//! Splitting a parameter budget into Weight Templates.
//!
//! Unshared parameters (biases and classifier heads) are paid first. Every
//! template granted to a bank costs its slot size plus one coefficient entry
//! per layer using the slot: refinement may give each of those layers its own
//! coefficient copy, so that capacity is reserved up front and the budget
//! holds before and after refinement.
//!
//! Each bank first receives one template. The rest is split across clusters
//! in proportion to the weights their layers demand, handed out round-robin
//! in slot order inside each cluster, and whatever the clusters could not
//! spend is pooled and handed out round-robin over all banks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::weightgen::{BankId, SharingPlan};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateAllocation {
    pub budget: usize,
    pub unshared: usize,
    /// Templates per bank (the bank's N).
    pub templates: BTreeMap<BankId, usize>,
}

#[derive(Debug, Clone, Copy)]
struct BankCost {
    bank: BankId,
    slot_size: usize,
    users: usize,
}

impl BankCost {
    fn grant(&self) -> usize {
        self.slot_size + self.users
    }
}

fn bank_costs(plan: &SharingPlan) -> Vec<(u32, BankCost)> {
    plan.clusters
        .iter()
        .flat_map(|c| {
            c.slots.iter().map(move |&s| {
                let slot = plan.slot(s).expect("cluster slots exist");
                (
                    c.cluster_id,
                    BankCost {
                        bank: slot.bank_id,
                        slot_size: slot.shape.numel(),
                        users: plan.slot_users(s).len(),
                    },
                )
            })
        })
        .collect()
}

/// Round-robin over `banks` in order, skipping banks whose next template
/// does not fit; stops when none fits. Returns what is left.
fn round_robin(banks: &[BankCost], mut remaining: usize, templates: &mut BTreeMap<BankId, usize>) -> usize {
    loop {
        let mut granted = false;
        for b in banks {
            if b.grant() <= remaining {
                remaining -= b.grant();
                *templates.get_mut(&b.bank).expect("bank registered") += 1;
                granted = true;
            }
        }
        if !granted {
            return remaining;
        }
    }
}

/// Smallest budget that gives every bank one template.
pub fn minimum_budget(plan: &SharingPlan, unshared: usize) -> usize {
    unshared + bank_costs(plan).iter().map(|(_, b)| b.grant()).sum::<usize>()
}

pub fn allocate_templates(budget: usize, plan: &SharingPlan, unshared: usize) -> Result<TemplateAllocation> {
    let costs = bank_costs(plan);
    let minimum = minimum_budget(plan, unshared);
    if budget < minimum {
        return Err(Error::BudgetTooSmall { budget, minimum });
    }
    let mut templates: BTreeMap<BankId, usize> = costs.iter().map(|(_, b)| (b.bank, 1)).collect();
    let spare = budget - minimum;

    let demand: BTreeMap<u32, usize> = plan
        .clusters
        .iter()
        .map(|c| {
            let weights = c
                .layers
                .iter()
                .map(|l| plan.layer(*l).map_or(0, |s| s.shape.numel()))
                .sum();
            (c.cluster_id, weights)
        })
        .collect();
    let total_demand: u128 = demand.values().map(|&d| d as u128).sum();

    let mut pooled = spare;
    for cluster in &plan.clusters {
        let share = (spare as u128 * demand[&cluster.cluster_id] as u128)
            .checked_div(total_demand)
            .unwrap_or(0) as usize;
        pooled -= share;
        let banks: Vec<BankCost> = costs
            .iter()
            .filter(|(cid, _)| *cid == cluster.cluster_id)
            .map(|(_, b)| *b)
            .collect();
        pooled += round_robin(&banks, share, &mut templates);
    }
    let mut all: Vec<BankCost> = costs.iter().map(|(_, b)| *b).collect();
    all.sort_by_key(|b| b.bank);
    round_robin(&all, pooled, &mut templates);

    Ok(TemplateAllocation {
        budget,
        unshared,
        templates,
    })
}

impl TemplateAllocation {
    pub fn templates_for(&self, bank: BankId) -> usize {
        self.templates.get(&bank).copied().unwrap_or(0)
    }

    pub fn template_parameters(&self, plan: &SharingPlan) -> usize {
        plan.slots
            .iter()
            .map(|s| self.templates_for(s.bank_id) * s.shape.numel())
            .sum()
    }

    /// Coefficient entries reserved: one per template per slot user.
    pub fn coefficient_capacity(&self, plan: &SharingPlan) -> usize {
        plan.slots
            .iter()
            .map(|s| self.templates_for(s.bank_id) * plan.slot_users(s.slot_id).len())
            .sum()
    }

    /// Coefficient entries of the plan's current coefficient sets.
    pub fn coefficient_parameters(&self, plan: &SharingPlan) -> usize {
        plan.coefficient_sets
            .iter()
            .map(|c| self.templates_for(plan.bank_of(c.slot_id).expect("slot exists")))
            .sum()
    }

    /// Trainable parameters of the plan in its current sharing state.
    pub fn trainable_parameters(&self, plan: &SharingPlan) -> usize {
        self.unshared + self.template_parameters(plan) + self.coefficient_parameters(plan)
    }

    /// Parameters the allocation has committed to, counting coefficients at
    /// full per-layer capacity. Never exceeds the budget.
    pub fn committed_parameters(&self, plan: &SharingPlan) -> usize {
        self.unshared + self.template_parameters(plan) + self.coefficient_capacity(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weightgen::{LayerId, LayerKind, LayerSpec, MemberId, WeightShape};

    fn layer(id: u32, out: usize, inp: usize) -> LayerSpec {
        LayerSpec {
            layer_id: LayerId(id),
            member_id: MemberId(0),
            kind: LayerKind::Affine,
            shape: WeightShape::affine(out, inp),
        }
    }

    #[test]
    fn one_bank_floor_division() {
        let l = layer(0, 10, 10);
        let plan = SharingPlan::from_groups(&[l], &[vec![l.layer_id]]).unwrap();
        // 101 per template (100 weights + 1 coefficient); 350 spendable.
        let alloc = allocate_templates(7 + 350, &plan, 7).unwrap();
        assert_eq!(alloc.templates_for(BankId(0)), 3);
        assert!(alloc.committed_parameters(&plan) <= 357);
    }

    #[test]
    fn two_equal_banks_round_robin_in_slot_order() {
        let a = layer(0, 5, 4);
        let b = layer(1, 5, 4);
        let plan = SharingPlan::from_groups(&[a, b], &[vec![a.layer_id], vec![b.layer_id]]).unwrap();
        let per = 20 + 1;
        let alloc = allocate_templates(3 * per + per - 1, &plan, 0).unwrap();
        assert_eq!(alloc.templates_for(BankId(0)), 2);
        assert_eq!(alloc.templates_for(BankId(1)), 1);
    }

    #[test]
    fn too_small_budget_reports_minimum() {
        let l = layer(0, 4, 4);
        let plan = SharingPlan::from_groups(&[l], &[vec![l.layer_id]]).unwrap();
        match allocate_templates(10, &plan, 3) {
            Err(Error::BudgetTooSmall { budget, minimum }) => {
                assert_eq!(budget, 10);
                assert_eq!(minimum, 3 + 16 + 1);
            }
            other => panic!("expected budget error, got {other:?}"),
        }
    }
}
