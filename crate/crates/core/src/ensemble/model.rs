use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::member::forward_member;
use crate::ensemble::{FrozenMember, MemberSpec};
use crate::error::{Error, Result};
use crate::numerics::{
    softmax_cross_entropy, DenseArray, Differentiable, GradMap, ParamId, ParamStore, Precision, Scalar, Sgd, Tape, Var,
};
use crate::search::Refinement;
use crate::weightgen::{
    assemble_layer, compose_superweight, grads_to_templates_and_coeffs, slice_layer, BankId, Checkpoint, CoeffId,
    LayerId, MemberId, SharingPlan, SlotId, TemplateAllocation,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitOptions {
    pub seed: u64,
    /// Give every member with a matching head shape the head of the first.
    pub tie_heads: bool,
}

/// Loss, gradients and the per-(layer, slot) evidence of one batch.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub loss: T,
    pub member_losses: Vec<T>,
    pub grads: GradMap<T>,
    /// Gradient w.r.t. each composed SuperWeight along one layer's path.
    pub superweight_grads: BTreeMap<(LayerId, SlotId), DenseArray<T>>,
    /// Each layer's contribution to its coefficient set's gradient.
    pub coefficient_contributions: BTreeMap<(LayerId, SlotId), DenseArray<T>>,
}

/// All members of an ensemble over one parameter store: template banks,
/// coefficient sets, and unshared biases and heads.
#[derive(Debug, Clone)]
pub struct SwnModel<T> {
    plan: SharingPlan,
    alloc: TemplateAllocation,
    members: Vec<MemberSpec>,
    store: ParamStore<T>,
    banks: BTreeMap<BankId, Vec<ParamId>>,
    coeffs: BTreeMap<CoeffId, ParamId>,
    biases: BTreeMap<LayerId, ParamId>,
    heads: BTreeMap<MemberId, (ParamId, ParamId)>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    precision: Precision,
    plan: SharingPlan,
    allocation: TemplateAllocation,
    members: Vec<MemberSpec>,
    #[serde(default)]
    extra: serde_json::Value,
}

fn check_members(plan: &SharingPlan, members: &[MemberSpec]) -> Result<()> {
    if members.is_empty() {
        return Err(Error::Member("an ensemble needs at least one member".into()));
    }
    let mut ids = BTreeSet::new();
    let mut layers = BTreeSet::new();
    for m in members {
        m.validate()?;
        if !ids.insert(m.member_id) {
            return Err(Error::Member(format!("duplicate member id {}", m.member_id)));
        }
        for l in &m.layers {
            let planned = plan.layer(l.layer_id).ok_or(Error::UnknownLayer(l.layer_id.0))?;
            if planned != l {
                return Err(Error::Member(format!("layer {} differs from the sharing plan", l.layer_id)));
            }
            layers.insert(l.layer_id);
        }
    }
    if layers.len() != plan.layers.len() {
        return Err(Error::Member("the sharing plan holds layers no member uses".into()));
    }
    Ok(())
}

impl<T: Scalar> SwnModel<T> {
    /// Templates are drawn uniformly with the fan-in scaled bound of the
    /// layer that created their slot and coefficients start at `1/sqrt(N)`,
    /// so a composed SuperWeight has the variance of a standard layer and
    /// every template sees the gradient scale of an unshared weight.
    /// Biases start at zero and heads uniformly within `1/sqrt(fan_in)`.
    pub fn new(plan: SharingPlan, alloc: TemplateAllocation, members: Vec<MemberSpec>, init: InitOptions) -> Result<Self> {
        check_members(&plan, &members)?;
        plan.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let mut store = ParamStore::new();
        let mut banks = BTreeMap::new();
        let mut slots = plan.slots.clone();
        slots.sort_by_key(|s| s.bank_id);
        for slot in &slots {
            let n = alloc.templates_for(slot.bank_id);
            if n == 0 {
                return Err(Error::Member(format!("bank {} has no templates", slot.bank_id)));
            }
            let fan_in = plan.layer(slot.created_for).ok_or(Error::UnknownLayer(slot.created_for.0))?.fan_in();
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let ids = (0..n)
                .map(|_| {
                    let t = DenseArray::from_fn(&slot.shape.dims(), |_| T::lit(dist.sample(&mut rng)));
                    store.insert(t, true)
                })
                .collect();
            banks.insert(slot.bank_id, ids);
        }
        let mut coeffs = BTreeMap::new();
        for set in &plan.coefficient_sets {
            let n = alloc.templates_for(plan.bank_of(set.slot_id).expect("validated plan"));
            let alpha = DenseArray::filled(&[n], T::lit(1.0 / (n as f64).sqrt()));
            coeffs.insert(set.coeff_id, store.insert(alpha, true));
        }
        let mut biases = BTreeMap::new();
        for layer in &plan.layers {
            biases.insert(layer.layer_id, store.insert(DenseArray::zeros(&[layer.shape.out_ch]), true));
        }
        let mut heads = BTreeMap::new();
        let mut first_head: Option<DenseArray<T>> = None;
        for m in &members {
            let f = m.head_features();
            let bound = 1.0 / (f as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let fresh = DenseArray::from_fn(&[m.classes, f], |_| T::lit(dist.sample(&mut rng)));
            let w = match &first_head {
                Some(h) if init.tie_heads && h.shape() == fresh.shape() => h.clone(),
                _ => fresh,
            };
            first_head.get_or_insert_with(|| w.clone());
            let wid = store.insert(w, true);
            let bid = store.insert(DenseArray::zeros(&[m.classes]), true);
            heads.insert(m.member_id, (wid, bid));
        }
        Ok(Self {
            plan,
            alloc,
            members,
            store,
            banks,
            coeffs,
            biases,
            heads,
        })
    }

    pub fn plan(&self) -> &SharingPlan {
        &self.plan
    }

    pub fn allocation(&self) -> &TemplateAllocation {
        &self.alloc
    }

    pub fn members(&self) -> &[MemberSpec] {
        &self.members
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn bank_params(&self, bank: BankId) -> Option<&[ParamId]> {
        self.banks.get(&bank).map(Vec::as_slice)
    }

    pub fn coefficient_param(&self, coeff: CoeffId) -> Option<ParamId> {
        self.coeffs.get(&coeff).copied()
    }

    pub fn coefficient(&self, coeff: CoeffId) -> Option<&DenseArray<T>> {
        self.coefficient_param(coeff).map(|id| self.store.array(id))
    }

    /// Coefficient parameters, which are exempt from weight decay.
    pub fn coefficient_params(&self) -> BTreeSet<ParamId> {
        self.coeffs.values().copied().collect()
    }

    /// Template and coefficient parameters.
    pub fn generator_params(&self) -> Vec<ParamId> {
        self.banks.values().flatten().chain(self.coeffs.values()).copied().collect()
    }

    pub fn head_params(&self, member: MemberId) -> Option<(ParamId, ParamId)> {
        self.heads.get(&member).copied()
    }

    pub fn bias_param(&self, layer: LayerId) -> Option<ParamId> {
        self.biases.get(&layer).copied()
    }

    pub fn trainable_parameters(&self) -> usize {
        self.store.iter().filter(|h| h.trainable).map(|h| h.array.len()).sum()
    }

    /// Composed SuperWeight of every coefficient set.
    pub fn composed(&self) -> Result<BTreeMap<CoeffId, DenseArray<T>>> {
        self.plan
            .coefficient_sets
            .iter()
            .map(|set| {
                let bank = self.plan.bank_of(set.slot_id).expect("validated plan");
                let templates: Vec<&DenseArray<T>> = self.banks[&bank].iter().map(|&id| self.store.array(id)).collect();
                let alpha = self.store.array(self.coeffs[&set.coeff_id]);
                Ok((set.coeff_id, compose_superweight(&templates, alpha)?))
            })
            .collect()
    }

    /// Generated weight tensor of every layer.
    pub fn layer_weights(&self) -> Result<BTreeMap<LayerId, DenseArray<T>>> {
        let composed = self.composed()?;
        let assignment = self.plan.assignment();
        self.plan
            .layers
            .iter()
            .map(|layer| {
                let cluster = self.plan.cluster_of(layer.layer_id).ok_or(Error::UnknownLayer(layer.layer_id.0))?;
                let w = assemble_layer(&cluster.tiling, layer.layer_id, layer.shape, |slot| {
                    assignment.get(&(layer.layer_id, slot)).and_then(|c| composed.get(c))
                })?;
                Ok((layer.layer_id, w))
            })
            .collect()
    }

    /// Summed cross-entropy of every member weighted by `member_weights`
    /// (one per member, default 1), with gradients for every trainable
    /// parameter and the per-layer evidence used by the sharing search.
    pub fn forward_backward(&self, x: &DenseArray<T>, labels: &[usize], member_weights: Option<&[T]>) -> Result<StepOutput<T>> {
        if let Some(w) = member_weights {
            if w.len() != self.members.len() {
                return Err(Error::Member(format!("{} loss weights for {} members", w.len(), self.members.len())));
            }
        }
        let weights = self.layer_weights()?;
        let mut tape = Tape::new();
        let mut weight_vars = BTreeMap::new();
        let mut bias_vars = BTreeMap::new();
        for (&l, w) in &weights {
            weight_vars.insert(l, tape.leaf(w.clone()));
            let b = self.biases[&l];
            bias_vars.insert(l, tape.param(b, self.store.array(b).clone()));
        }
        let mut loss = T::zero();
        let mut member_losses = Vec::new();
        let mut seeds: Vec<(Var, DenseArray<T>)> = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            let (hw, hb) = self.heads[&m.member_id];
            let head = (tape.param(hw, self.store.array(hw).clone()), tape.param(hb, self.store.array(hb).clone()));
            let logits = forward_member(&mut tape, m, x, &weight_vars, &bias_vars, head)?;
            let (l, mut dl) = softmax_cross_entropy(tape.value(logits), labels)?;
            let w = member_weights.map_or(T::one(), |w| w[i]);
            dl.scale(w);
            loss += w * l;
            member_losses.push(l);
            seeds.push((logits, dl));
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let tape_grads = tape.backward(seeds)?;
        let mut grads = tape_grads.param_grads()?;

        let mut superweight_grads = BTreeMap::new();
        for (&l, &var) in &weight_vars {
            let dw = tape_grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| DenseArray::zeros(weights[&l].shape()));
            for (slot, g) in slice_layer(&self.plan, l, &dw)? {
                superweight_grads.insert((l, slot), g);
            }
        }
        let bank_arrays: BTreeMap<BankId, Vec<&DenseArray<T>>> = self
            .banks
            .iter()
            .map(|(&b, ids)| (b, ids.iter().map(|&id| self.store.array(id)).collect()))
            .collect();
        let alphas: BTreeMap<CoeffId, &DenseArray<T>> =
            self.coeffs.iter().map(|(&c, &id)| (c, self.store.array(id))).collect();
        let comp = grads_to_templates_and_coeffs(&self.plan, &bank_arrays, &alphas, &superweight_grads)?;
        for (bank, gs) in comp.templates {
            for (&id, g) in self.banks[&bank].iter().zip(gs) {
                grads.accumulate(id, g)?;
            }
        }
        for (coeff, g) in comp.coefficients {
            grads.accumulate(self.coeffs[&coeff], g)?;
        }
        Ok(StepOutput {
            loss,
            member_losses,
            grads,
            superweight_grads,
            coefficient_contributions: comp.per_layer_coefficients,
        })
    }

    /// Applies a coefficient refinement: every split set becomes a new
    /// parameter holding an exact copy of its source, momentum included.
    pub fn apply_refinement(&mut self, refinement: &Refinement, sgd: Option<&mut Sgd<T>>) -> Result<()> {
        let mut sgd = sgd;
        for split in &refinement.splits {
            let src = *self.coeffs.get(&split.from).ok_or_else(|| {
                Error::InvalidGrouping(format!("coefficient set {} does not exist", split.from))
            })?;
            let copy = self.store.array(src).clone();
            let id = self.store.insert(copy, true);
            self.coeffs.insert(split.to, id);
            if let Some(s) = sgd.as_deref_mut() {
                s.clone_state(src, id);
            }
        }
        self.plan = refinement.plan.clone();
        self.plan.validate()
    }

    /// Members with their generated weights materialized.
    pub fn freeze(&self) -> Result<Vec<FrozenMember<T>>> {
        let weights = self.layer_weights()?;
        self.members
            .iter()
            .map(|m| {
                let (hw, hb) = self.heads[&m.member_id];
                FrozenMember::new(
                    m.clone(),
                    m.layers.iter().map(|l| (l.layer_id, weights[&l.layer_id].clone())).collect(),
                    m.layers.iter().map(|l| (l.layer_id, self.store.array(self.biases[&l.layer_id]).clone())).collect(),
                    self.store.array(hw).clone(),
                    self.store.array(hb).clone(),
                )
            })
            .collect()
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint<T>> {
        let meta = CheckpointMeta {
            precision: T::PRECISION,
            plan: self.plan.clone(),
            allocation: self.alloc.clone(),
            members: self.members.clone(),
            extra,
        };
        let arr = |id: ParamId| self.store.array(id).clone();
        let mut arrays = BTreeMap::new();
        for (l, &id) in &self.biases {
            arrays.insert(format!("bias.{l}"), arr(id));
        }
        for (m, &(w, b)) in &self.heads {
            arrays.insert(format!("head.{m}.weight"), arr(w));
            arrays.insert(format!("head.{m}.bias"), arr(b));
        }
        Ok(Checkpoint {
            meta: serde_json::to_value(meta)?,
            banks: self.banks.iter().map(|(&b, ids)| (b, ids.iter().map(|&id| arr(id)).collect())).collect(),
            coefficients: self
                .plan
                .coefficient_sets
                .iter()
                .map(|s| (s.coeff_id, (s.slot_id, arr(self.coeffs[&s.coeff_id]))))
                .collect(),
            arrays,
        })
    }

    /// Rebuilds a model from a checkpoint; returns it with the checkpoint's
    /// extra metadata.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<(Self, serde_json::Value)> {
        let meta: CheckpointMeta = serde_json::from_value(ck.meta.clone())?;
        let mut model = Self::new(meta.plan, meta.allocation, meta.members, InitOptions::default())?;
        let put = |model: &mut Self, id: ParamId, src: &DenseArray<T>, what: &str| -> Result<()> {
            let dst = model.store.array_mut(id);
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "{what}: stored shape {:?} does not match {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
            Ok(())
        };
        for (bank, ids) in model.banks.clone() {
            let stored = ck.banks.get(&bank).ok_or_else(|| Error::Checkpoint(format!("bank {bank} missing")))?;
            if stored.len() != ids.len() {
                return Err(Error::Checkpoint(format!("bank {bank} holds {} templates, expected {}", stored.len(), ids.len())));
            }
            for (id, t) in ids.iter().zip(stored) {
                put(&mut model, *id, t, &format!("bank {bank}"))?;
            }
        }
        for (coeff, id) in model.coeffs.clone() {
            let (slot, alpha) = ck
                .coefficients
                .get(&coeff)
                .ok_or_else(|| Error::Checkpoint(format!("coefficient set {coeff} missing")))?;
            if model.plan.coefficient_set(coeff).map(|s| s.slot_id) != Some(*slot) {
                return Err(Error::Checkpoint(format!("coefficient set {coeff} names the wrong slot")));
            }
            put(&mut model, id, alpha, &format!("coefficient set {coeff}"))?;
        }
        let named = |name: String| ck.arrays.get(&name).ok_or_else(|| Error::Checkpoint(format!("array {name} missing")));
        for (l, id) in model.biases.clone() {
            put(&mut model, id, named(format!("bias.{l}"))?, "bias")?;
        }
        for (m, (w, b)) in model.heads.clone() {
            put(&mut model, w, named(format!("head.{m}.weight"))?, "head")?;
            put(&mut model, b, named(format!("head.{m}.bias"))?, "head")?;
        }
        Ok((model, meta.extra))
    }
}

/// A batch objective over a model, for gradient checking.
pub struct BatchObjective<'a, T> {
    pub model: &'a mut SwnModel<T>,
    pub x: DenseArray<T>,
    pub labels: Vec<usize>,
    pub member_weights: Option<Vec<T>>,
}

impl<T: Scalar> Differentiable<T> for BatchObjective<'_, T> {
    fn params(&self) -> &ParamStore<T> {
        &self.model.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.model.store
    }

    fn loss_and_grad(&self) -> Result<(T, GradMap<T>)> {
        let out = self.model.forward_backward(&self.x, &self.labels, self.member_weights.as_deref())?;
        Ok((out.loss, out.grads))
    }
}
