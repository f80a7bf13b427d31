//! Builders shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use superweight::ensemble::{InitOptions, MemberSpec, SwnModel};
use superweight::harness::{DatasetKind, DatasetSpec, ExperimentConfig, MemberConfig};
use superweight::numerics::{DenseArray, Scalar};
use superweight::weightgen::{allocate_templates, minimum_budget, LayerId, LayerSpec, MemberId, SharingPlan};

pub fn layers_of(members: &[MemberSpec]) -> Vec<LayerSpec> {
    members.iter().flat_map(|m| m.layers.iter().copied()).collect()
}

pub fn layer_ids(members: &[MemberSpec]) -> Vec<LayerId> {
    layers_of(members).iter().map(|l| l.layer_id).collect()
}

/// Small members with random widths; with `conv`, every member gets a
/// 3x3 stem over a 2x4x4 input.
pub fn random_members(rng: &mut ChaCha8Rng, count: usize, conv: bool) -> Vec<MemberSpec> {
    let input: Vec<usize> = if conv { vec![2, 4, 4] } else { vec![rng.gen_range(2..=5)] };
    let classes = rng.gen_range(2..=4);
    let mut next = 0;
    (0..count)
        .map(|m| {
            let stem: Vec<usize> = if conv { vec![rng.gen_range(2..=3)] } else { Vec::new() };
            let depth = rng.gen_range(1..=3);
            let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(2..=6)).collect();
            let pool = if conv { 2 } else { 1 };
            let spec = MemberSpec::build(MemberId(m as u32), next, &input, &stem, 3, pool, &hidden, classes).unwrap();
            next += spec.layers.len() as u32;
            spec
        })
        .collect()
}

/// Single-group plan over `members` with `extra` parameters above the minimum budget.
pub fn model_with_groups<T: Scalar>(
    members: Vec<MemberSpec>,
    groups: &[Vec<LayerId>],
    extra: usize,
    seed: u64,
) -> SwnModel<T> {
    let layers = layers_of(&members);
    let plan = SharingPlan::from_groups(&layers, groups).unwrap();
    let unshared = members.iter().map(MemberSpec::unshared_parameters).sum();
    let alloc = allocate_templates(minimum_budget(&plan, unshared) + extra, &plan, unshared).unwrap();
    SwnModel::new(plan, alloc, members, InitOptions { seed, tie_heads: false }).unwrap()
}

pub fn single_cluster_model<T: Scalar>(members: Vec<MemberSpec>, extra: usize, seed: u64) -> SwnModel<T> {
    let ids = layer_ids(&members);
    model_with_groups(members, &[ids], extra, seed)
}

pub fn random_batch<T: Scalar>(
    rng: &mut ChaCha8Rng,
    input_shape: &[usize],
    n: usize,
    classes: usize,
) -> (DenseArray<T>, Vec<usize>) {
    let features: usize = input_shape.iter().product();
    let x = DenseArray::from_fn(&[n, features], |_| T::lit(rng.gen_range(-1.0..1.0)));
    let y = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    (x, y)
}

/// Partition from connected components of the graph whose edges are the
/// pairs with similarity above `eps`; every other mentioned layer is alone.
pub fn components_oracle(pairs: &[(f64, u32, u32)], eps: f64) -> BTreeSet<BTreeSet<u32>> {
    let mut adj: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for &(s, a, b) in pairs {
        adj.entry(a).or_default();
        adj.entry(b).or_default();
        if s > eps {
            adj.get_mut(&a).unwrap().push(b);
            adj.get_mut(&b).unwrap().push(a);
        }
    }
    let mut seen = BTreeSet::new();
    let mut out = BTreeSet::new();
    for &start in adj.keys() {
        if seen.contains(&start) {
            continue;
        }
        let mut comp = BTreeSet::new();
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            if seen.insert(v) {
                comp.insert(v);
                stack.extend(adj[&v].iter().copied());
            }
        }
        out.insert(comp);
    }
    out
}

pub fn as_partition(groups: &superweight::search::LayerGroups) -> BTreeSet<BTreeSet<u32>> {
    groups.groups().iter().map(|g| g.iter().map(|l| l.0).collect()).collect()
}

/// Complete similarity matrix over `n` layers, distinct values in [-1, 1].
pub fn random_similarities(rng: &mut ChaCha8Rng, n: u32) -> Vec<(f64, u32, u32)> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let s = loop {
                let s: f64 = rng.gen_range(-1.0..=1.0);
                if seen.insert(s.to_bits()) {
                    break s;
                }
            };
            out.push((s, a, b));
        }
    }
    out
}

/// Quick spirals experiment: `m` identical four-layer MLP members.
pub fn spirals_config(m: usize, hidden: usize, budget_fraction: f64) -> ExperimentConfig {
    ExperimentConfig {
        budget_fraction,
        epochs: 12,
        refine_epoch: 6,
        warmup_epochs: 2,
        members: vec![
            MemberConfig {
                hidden: vec![hidden; 3],
                ..MemberConfig::default()
            };
            m
        ],
        dataset: DatasetSpec {
            kind: DatasetKind::Spirals,
            train: 300,
            val: 150,
            test: 300,
            ..DatasetSpec::default()
        },
        ..ExperimentConfig::default()
    }
}

/// psi between the first layers of two identical members whose losses are
/// weighted by `weights`, plus the grouping at `tau`.
pub fn twin_similarity(weights: [f64; 2], tau: f64, seed: u64) -> (f64, superweight::search::LayerGroups) {
    use superweight::search::{cluster_by_similarity, superweight_similarities, GradientLedger};
    let build = |m: u32, first: u32| MemberSpec::build(MemberId(m), first, &[3], &[], 3, 1, &[8, 8], 3).unwrap();
    let members = vec![build(0, 0), build(1, 2)];
    let ids = layer_ids(&members);
    let layers = layers_of(&members);
    let plan = SharingPlan::from_groups(&layers, &[ids]).unwrap();
    let unshared = members.iter().map(MemberSpec::unshared_parameters).sum();
    let alloc = allocate_templates(minimum_budget(&plan, unshared) + 400, &plan, unshared).unwrap();
    let model = SwnModel::<f64>::new(plan, alloc, members, InitOptions { seed, tie_heads: true }).unwrap();
    let mut ledger = GradientLedger::for_plan(model.plan(), model.allocation());
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    for _ in 0..4 {
        let (x, y) = random_batch::<f64>(&mut rng, &[3], 16, 3);
        let out = model.forward_backward(&x, &y, Some(&weights)).unwrap();
        ledger.record_batch(&out.superweight_grads, &out.coefficient_contributions).unwrap();
    }
    let records = superweight_similarities(model.plan(), &ledger).unwrap();
    let psi = records
        .iter()
        .find(|r| r.layer_i == LayerId(0) && r.layer_j == LayerId(2))
        .expect("twin first layers share a slot")
        .psi;
    (psi, cluster_by_similarity(model.plan(), &records, tau))
}

/// Outcome of refining a trained single-cluster spirals ensemble.
pub struct RefineCheck {
    pub splits: usize,
    pub weights_unchanged: bool,
    /// Largest L2 distance between a split copy and its source after one more epoch.
    pub divergence: f64,
}

pub fn refine_and_train(beta: f64, seed: u64) -> RefineCheck {
    use superweight::harness::gen_dataset;
    use superweight::search::{refine_coefficients, GradientLedger};
    use superweight::train::{LrSchedule, TrainSettings, Trainer};
    let config = spirals_config(2, 16, 1.0);
    let data = gen_dataset::<f64>(&config.dataset).unwrap();
    let members = config.build_members(&data.input_shape, data.classes, 1.0).unwrap();
    let mut model = single_cluster_model::<f64>(members, 2000, seed);
    let mut trainer = Trainer::new(TrainSettings {
        schedule: LrSchedule::default(),
        epochs: 4,
        batch_size: 32,
        momentum: 0.9,
        weight_decay: 5e-4,
        seed,
    });
    let mut ledger = GradientLedger::for_plan(model.plan(), model.allocation());
    trainer.run_epoch(&mut model, &data.train, 0, Some(&mut ledger), None).unwrap();
    let before = model.layer_weights().unwrap();
    let refinement = refine_coefficients(model.plan(), &ledger, beta).unwrap();
    model.apply_refinement(&refinement, Some(&mut trainer.sgd)).unwrap();
    let weights_unchanged = model.layer_weights().unwrap() == before;
    trainer.run_epoch(&mut model, &data.train, 1, None, None).unwrap();
    let divergence = refinement
        .splits
        .iter()
        .map(|s| {
            let a = model.coefficient(s.from).unwrap();
            let b = model.coefficient(s.to).unwrap();
            a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max);
    RefineCheck {
        splits: refinement.splits.len(),
        weights_unchanged,
        divergence,
    }
}

/// Per-cell coverage counts of every layer; exact tiling means all ones.
pub fn coverage_is_exact(plan: &SharingPlan) -> bool {
    plan.layers.iter().all(|layer| {
        let (out, inp) = layer.shape.grid();
        let mut hits = vec![0u32; out * inp];
        for p in plan.placements(layer.layer_id).unwrap() {
            let s = plan.slot(p.slot_id).unwrap().shape.grid();
            for o in p.out_offset..p.out_offset + s.0 {
                for i in p.in_offset..p.in_offset + s.1 {
                    if o >= out || i >= inp {
                        return false;
                    }
                    hits[o * inp + i] += 1;
                }
            }
        }
        hits.iter().all(|&h| h == 1)
    })
}

/// Random layers over a few kernels, with arbitrary (often non-nested) grids.
pub fn random_layer_set(rng: &mut ChaCha8Rng) -> Vec<LayerSpec> {
    use superweight::weightgen::{LayerKind, WeightShape};
    let n = rng.gen_range(1..=9);
    (0..n)
        .map(|i| {
            let k = [1, 1, 3][rng.gen_range(0..3)];
            LayerSpec {
                layer_id: LayerId(i),
                member_id: MemberId(0),
                kind: if k == 1 { LayerKind::Affine } else { LayerKind::Conv2d },
                shape: WeightShape::new(rng.gen_range(1..=12), rng.gen_range(1..=12), k, k),
            }
        })
        .collect()
}

/// Random partition of `ids` into at most `k` groups.
pub fn random_groups(rng: &mut ChaCha8Rng, ids: &[LayerId], k: usize) -> Vec<Vec<LayerId>> {
    let mut groups = vec![Vec::new(); k];
    for &id in ids {
        groups[rng.gen_range(0..k)].push(id);
    }
    groups.retain(|g| !g.is_empty());
    groups
}

/// (trainable, committed, budget, largest single-template grant) of a
/// random allocation over tiny layers.
pub fn random_budget_case(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    let (count, conv) = (rng.gen_range(1..=4), rng.gen_bool(0.3));
    let members = random_members(rng, count, conv);
    let ids = layer_ids(&members);
    let k = rng.gen_range(1..=3);
    let groups = random_groups(rng, &ids, k);
    let layers = layers_of(&members);
    let plan = SharingPlan::from_groups(&layers, &groups).unwrap();
    let unshared: usize = members.iter().map(MemberSpec::unshared_parameters).sum();
    let budget = minimum_budget(&plan, unshared) + rng.gen_range(0..3000);
    let alloc = allocate_templates(budget, &plan, unshared).unwrap();
    let committed = alloc.committed_parameters(&plan);
    let grant = plan.slots.iter().map(|s| s.shape.numel() + plan.slot_users(s.slot_id).len()).max().unwrap();
    let model = SwnModel::<f32>::new(plan, alloc, members, InitOptions::default()).unwrap();
    (model.trainable_parameters(), committed, budget, grant)
}

/// Members from the desk-scale family: MLPs of 4 to 8 affine layers (head
/// included) with widths 32 to 256.
pub fn desk_scale_members(rng: &mut ChaCha8Rng) -> Vec<MemberSpec> {
    let input = [[2usize, 8][rng.gen_range(0..2)]];
    let classes = rng.gen_range(2..=5);
    let mut next = 0;
    (0..rng.gen_range(1..=4))
        .map(|m| {
            let depth = rng.gen_range(4..=8) - 1;
            let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(32..=256)).collect();
            let spec = MemberSpec::build(MemberId(m), next, &input, &[], 3, 1, &hidden, classes).unwrap();
            next += spec.layers.len() as u32;
            spec
        })
        .collect()
}

/// (trainable, budget, max slot size) for a desk-scale config at a random
/// feasible budget between the minimum and the full parameter count.
pub fn desk_scale_budget_case(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    let members = desk_scale_members(rng);
    let ids = layer_ids(&members);
    let k = rng.gen_range(1..=3);
    let groups = random_groups(rng, &ids, k);
    let plan = SharingPlan::from_groups(&layers_of(&members), &groups).unwrap();
    let unshared: usize = members.iter().map(MemberSpec::unshared_parameters).sum();
    let full: usize = members.iter().map(MemberSpec::full_parameters).sum();
    let minimum = minimum_budget(&plan, unshared);
    let budget = rng.gen_range(minimum..=full.max(minimum));
    let alloc = allocate_templates(budget, &plan, unshared).unwrap();
    let max_slot = plan.slots.iter().map(|s| s.shape.numel()).max().unwrap();
    (alloc.trainable_parameters(&plan), budget, max_slot)
}
