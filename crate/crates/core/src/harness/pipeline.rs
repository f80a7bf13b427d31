use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::{
    enumerate_anytime_schedule, interpolate_members, AnytimeSchedule, FrozenMember, InitOptions, MemberSpec, SwnModel,
};
use crate::error::{Error, Result, Stage, StageExt};
use crate::harness::{gen_dataset, Dataset, ExperimentConfig, SharingMode, Split};
use crate::metrics::{evaluate, EvalReport};
use crate::numerics::{Precision, Scalar};
use crate::search::{
    baseline_grouping, cluster_by_similarity, decouple_coefficients, refine_coefficients, superweight_similarities,
    BaselineContext, BaselineMode, GradientLedger, LayerGroups, PlanEvent, PlanEventKind, PlanEventLog,
    SimilarityRecord,
};
use crate::train::{TrainSettings, Trainer};
use crate::weightgen::{allocate_templates, minimum_budget, LayerId, LayerSpec, SharingPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    /// Parameters of the unshared ensemble the budget is a fraction of.
    pub full_parameters: usize,
    pub budget: usize,
    pub unshared: usize,
    pub minimum_feasible: usize,
    pub max_slot_size: usize,
    /// Trainable parameters right after the searched plan was allocated.
    pub trainable_after_search: usize,
    pub trainable_final: usize,
    /// Parameters reserved including per-layer coefficient capacity.
    pub committed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationPoint {
    pub lambda: f64,
    pub accuracy: f64,
    pub loss: f64,
}

/// Everything a run reports; identical inputs give identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub seed: u64,
    pub mode: SharingMode,
    pub precision: Precision,
    pub budget: BudgetReport,
    /// Similarity threshold the cluster search used, for gradient-searched modes.
    pub search_threshold: Option<f64>,
    pub clusters: Vec<Vec<LayerId>>,
    pub coefficient_sets: usize,
    pub plan_sha256: String,
    pub test: EvalReport,
    pub val: EvalReport,
    pub anytime: AnytimeSchedule,
    pub interpolation: Option<Vec<InterpolationPoint>>,
    pub history: Vec<EpochRecord>,
}

pub struct ExperimentResult<T> {
    pub config: ExperimentConfig,
    pub report: ExperimentReport,
    pub model: SwnModel<T>,
    pub superweight_similarities: Vec<SimilarityRecord>,
    pub coefficient_similarities: Vec<SimilarityRecord>,
    pub events: PlanEventLog,
}

/// Outcome of the grouping stage.
pub struct SearchOutcome {
    pub groups: LayerGroups,
    pub similarities: Vec<SimilarityRecord>,
    pub events: PlanEventLog,
    pub history: Vec<EpochRecord>,
    /// Threshold the gradient search finally used; below `tau` when the
    /// groups at `tau` did not fit the budget.
    pub threshold: Option<f64>,
}

/// Groups at `tau`, or at the largest lower candidate threshold whose plan
/// fits `budget`. Candidates are the recorded similarities below `tau`, then
/// negative infinity (every sharing pair merged).
pub fn cluster_within_budget(
    plan: &SharingPlan,
    records: &[SimilarityRecord],
    tau: f64,
    budget: usize,
    unshared: usize,
) -> Result<(LayerGroups, f64)> {
    let mut candidates: Vec<f64> = records.iter().map(|r| r.psi).filter(|&p| p < tau).collect();
    candidates.sort_by(|a, b| b.total_cmp(a));
    candidates.dedup();
    // Pairs at exactly the candidate value must merge, so step just below it.
    let thresholds = std::iter::once(tau)
        .chain(candidates.into_iter().map(|p| p - p.abs().max(1.0) * f64::EPSILON))
        .chain(std::iter::once(f64::NEG_INFINITY));
    let mut last = None;
    for eps in thresholds {
        let groups = cluster_by_similarity(plan, records, eps);
        let candidate = SharingPlan::from_groups(&plan.layers, &groups.to_vecs())?;
        let minimum = minimum_budget(&candidate, unshared);
        if minimum <= budget {
            if eps < tau {
                log::warn!("groups at tau {tau} exceed budget {budget}; using threshold {eps}");
            }
            return Ok((groups, eps));
        }
        last = Some(minimum);
    }
    Err(Error::BudgetTooSmall {
        budget,
        minimum: last.unwrap_or(0),
    })
}

fn settings(config: &ExperimentConfig, seed: u64) -> TrainSettings {
    TrainSettings {
        schedule: config.lr.clone(),
        epochs: config.epochs,
        batch_size: config.batch_size,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
        seed,
    }
}

fn all_layers(members: &[MemberSpec]) -> Vec<LayerSpec> {
    members.iter().flat_map(|m| m.layers.iter().copied()).collect()
}

pub fn plan_sha256(plan: &SharingPlan) -> String {
    Sha256::digest(plan.to_json().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameter accounting shared by every mode.
pub struct Budget {
    pub full: usize,
    pub budget: usize,
    pub unshared: usize,
}

impl Budget {
    pub fn of(config: &ExperimentConfig, members: &[MemberSpec]) -> Self {
        let full: usize = members.iter().map(MemberSpec::full_parameters).sum();
        Self {
            full,
            budget: (config.budget_fraction * full as f64).floor() as usize,
            unshared: members.iter().map(MemberSpec::unshared_parameters).sum(),
        }
    }
}

fn warmup<T: Scalar>(
    config: &ExperimentConfig,
    model: &mut SwnModel<T>,
    data: &Split<T>,
    history: &mut Vec<EpochRecord>,
) -> Result<GradientLedger> {
    let mut trainer = Trainer::new(settings(config, config.seed));
    let mut ledger = GradientLedger::for_plan(model.plan(), model.allocation());
    for epoch in 0..config.warmup_epochs {
        let record = epoch + 1 == config.warmup_epochs;
        let loss = trainer.run_epoch(model, data, epoch, record.then_some(&mut ledger), None)?;
        history.push(EpochRecord {
            phase: "search".into(),
            epoch,
            lr: config.lr.lr_at(epoch, config.epochs),
            loss,
        });
    }
    Ok(ledger)
}

/// Per-layer coefficient features: the layer's alpha for every slot of the
/// plan in ascending order, zeros where the layer does not use the slot.
fn coefficient_features<T: Scalar>(model: &SwnModel<T>) -> std::collections::BTreeMap<LayerId, Vec<f64>> {
    let plan = model.plan();
    let mut slots: Vec<_> = plan.slots.iter().map(|s| (s.slot_id, s.bank_id)).collect();
    slots.sort();
    plan.layers
        .iter()
        .map(|l| {
            let mut f = Vec::new();
            for &(slot, bank) in &slots {
                let n = model.allocation().templates_for(bank);
                match plan.coeff_for(l.layer_id, slot).and_then(|c| model.coefficient(c)) {
                    Some(alpha) => f.extend(alpha.values().iter().map(|v| v.as_f64())),
                    None => f.extend(std::iter::repeat_n(0.0, n)),
                }
            }
            (l.layer_id, f)
        })
        .collect()
}

/// Decides the layer groups for `config.mode`. Gradient-based modes train a
/// single-cluster model for the warmup epochs first.
pub fn search_stage<T: Scalar>(
    config: &ExperimentConfig,
    members: &[MemberSpec],
    data: &Dataset<T>,
) -> Result<SearchOutcome> {
    let layers = all_layers(members);
    let ids: Vec<LayerId> = layers.iter().map(|l| l.layer_id).collect();
    let budget = Budget::of(config, members);
    let mut events = PlanEventLog::default();
    let mut history = Vec::new();
    let ctx = BaselineContext {
        groups: config.groups,
        seed: config.seed,
        ..Default::default()
    };
    let single = || LayerGroups::new(vec![ids.iter().copied().collect::<BTreeSet<_>>()]);
    let groups = match config.mode {
        SharingMode::SingleCluster | SharingMode::SharedCoefficients => single()?,
        SharingMode::Baseline => LayerGroups::new(ids.iter().map(|&l| BTreeSet::from([l])).collect())?,
        SharingMode::RandomCluster => baseline_grouping(BaselineMode::Random, &layers, &ctx)?,
        SharingMode::DepthBin => baseline_grouping(BaselineMode::DepthBin, &layers, &ctx)?,
        SharingMode::Swn | SharingMode::NoRefine | SharingMode::CoeffCluster | SharingMode::NoGradSim => {
            let plan = SharingPlan::from_groups(&layers, std::slice::from_ref(&ids))?;
            let alloc = allocate_templates(budget.budget, &plan, budget.unshared)?;
            let init = InitOptions {
                seed: config.seed,
                tie_heads: config.tie_heads,
            };
            let mut model = SwnModel::new(plan, alloc, members.to_vec(), init)?;
            let gradient_search = matches!(config.mode, SharingMode::Swn | SharingMode::NoRefine);
            if !gradient_search {
                let soft = decouple_coefficients(model.plan())?;
                model.apply_refinement(&soft, None)?;
            }
            let ledger = warmup(config, &mut model, &data.train, &mut history)?;
            if gradient_search {
                let records = superweight_similarities(model.plan(), &ledger)?;
                let (groups, threshold) =
                    cluster_within_budget(model.plan(), &records, config.tau, budget.budget, budget.unshared)?;
                let mut out = finish(config, &layers, groups, records, events, history)?;
                out.threshold = Some(threshold);
                return Ok(out);
            }
            let ctx = BaselineContext {
                features: coefficient_features(&model),
                ..ctx
            };
            baseline_grouping(BaselineMode::CoeffCluster, &layers, &ctx)?
        }
    };
    events.events.clear();
    finish(config, &layers, groups, Vec::new(), events, history)
}

fn finish(
    config: &ExperimentConfig,
    layers: &[LayerSpec],
    groups: LayerGroups,
    similarities: Vec<SimilarityRecord>,
    mut events: PlanEventLog,
    history: Vec<EpochRecord>,
) -> Result<SearchOutcome> {
    let ids: Vec<LayerId> = layers.iter().map(|l| l.layer_id).collect();
    let before = SharingPlan::from_groups(layers, &[ids])?;
    let after = SharingPlan::from_groups(layers, &groups.to_vecs())?;
    events.push(PlanEvent::diff(PlanEventKind::Search, config.warmup_epochs, &before, &after, Vec::new()));
    let _ = config;
    Ok(SearchOutcome {
        groups,
        similarities,
        events,
        history,
        threshold: None,
    })
}

/// Largest width factor in (0, 1] whose standard network fits `budget`,
/// counting one coefficient per layer.
fn baseline_width(config: &ExperimentConfig, data_shape: &[usize], classes: usize, budget: usize) -> Result<f64> {
    let cost = |f: f64| -> Result<usize> {
        let members = config.build_members(data_shape, classes, f)?;
        Ok(members.iter().map(|m| m.full_parameters() + m.layers.len()).sum())
    };
    if cost(1.0)? <= budget {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if cost(mid)? <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if cost(lo)? > budget {
        return Err(Error::BudgetTooSmall {
            budget,
            minimum: cost(lo.max(1e-9))?,
        });
    }
    Ok(lo)
}

fn evaluate_split<T: Scalar>(frozen: &[FrozenMember<T>], split: &Split<T>, config: &ExperimentConfig) -> Result<EvalReport> {
    let member_probs = frozen
        .iter()
        .map(|m| Ok((m.spec().member_id, m.predict_proba(&split.x)?)))
        .collect::<Result<Vec<_>>>()?;
    let probs: Vec<_> = member_probs.iter().map(|(_, p)| p.clone()).collect();
    let ensemble = crate::ensemble::average_probs(&probs)?;
    EvalReport::build(&ensemble, &member_probs, &split.y, config.ece_bins, config.symmetric_diversity)
}

/// Accuracy and NLL of `(1 - lambda) a + lambda b` on `split` at `steps + 1`
/// evenly spaced lambdas.
pub fn interpolation_curve<T: Scalar>(
    a: &FrozenMember<T>,
    b: &FrozenMember<T>,
    split: &Split<T>,
    steps: usize,
) -> Result<Vec<InterpolationPoint>> {
    (0..=steps)
        .map(|k| {
            let lambda = k as f64 / steps as f64;
            let m = interpolate_members(a, b, lambda)?;
            let (accuracy, loss) = evaluate(&m.predict_proba(&split.x)?, &split.y)?;
            Ok(InterpolationPoint { lambda, accuracy, loss })
        })
        .collect()
}

/// Runs one experiment end to end at precision `T`.
pub fn run_experiment<T: Scalar>(config: &ExperimentConfig) -> Result<ExperimentResult<T>> {
    config.validate()?;
    let data: Dataset<T> = gen_dataset(&config.dataset)?;
    let full_members = config.build_members(&data.input_shape, data.classes, 1.0)?;
    let budget = Budget::of(config, &full_members);

    let search = search_stage(config, &full_members, &data).stage(Stage::Search)?;
    let mut history = search.history.clone();
    let mut events = search.events.clone();

    let (members, groups, alloc_budget) = if config.mode == SharingMode::Baseline {
        let f = baseline_width(config, &data.input_shape, data.classes, budget.budget).stage(Stage::Search)?;
        let members = config.build_members(&data.input_shape, data.classes, f)?;
        let ids: Vec<LayerId> = all_layers(&members).iter().map(|l| l.layer_id).collect();
        let groups = LayerGroups::new(ids.iter().map(|&l| BTreeSet::from([l])).collect())?;
        let unshared = members.iter().map(MemberSpec::unshared_parameters).sum();
        let plan = SharingPlan::from_groups(&all_layers(&members), &groups.to_vecs())?;
        let minimum = minimum_budget(&plan, unshared);
        (members, groups, minimum)
    } else {
        (full_members, search.groups, budget.budget)
    };
    let layers = all_layers(&members);
    let unshared: usize = members.iter().map(MemberSpec::unshared_parameters).sum();

    let plan = SharingPlan::from_groups(&layers, &groups.to_vecs()).stage(Stage::Search)?;
    let alloc = allocate_templates(alloc_budget, &plan, unshared).stage(Stage::Search)?;
    let minimum_feasible = minimum_budget(&plan, unshared);
    let max_slot_size = plan.slots.iter().map(|s| s.shape.numel()).max().unwrap_or(0);
    let init = InitOptions {
        seed: config.seed + 1,
        tie_heads: config.tie_heads,
    };
    let mut model = SwnModel::new(plan, alloc, members, init).stage(Stage::Train)?;
    let trainable_after_search = model.trainable_parameters();
    if trainable_after_search > budget.budget {
        return Err(Error::BudgetTooSmall {
            budget: budget.budget,
            minimum: trainable_after_search,
        })
        .stage(Stage::Search);
    }

    let mut trainer = Trainer::new(settings(config, config.seed + 1));
    let mut ledger = GradientLedger::for_plan(model.plan(), model.allocation());
    let mut coefficient_similarities = Vec::new();
    let refines = config.mode.refines();
    for epoch in 0..config.epochs {
        if refines && epoch == config.refine_epoch {
            let before = model.plan().clone();
            let r = refine_coefficients(&before, &ledger, config.beta).stage(Stage::Refine)?;
            model.apply_refinement(&r, Some(&mut trainer.sgd)).stage(Stage::Refine)?;
            if model.trainable_parameters() > budget.budget {
                return Err(Error::BudgetTooSmall {
                    budget: budget.budget,
                    minimum: model.trainable_parameters(),
                })
                .stage(Stage::Refine);
            }
            events.push(PlanEvent::diff(PlanEventKind::Refine, epoch, &before, model.plan(), r.splits.clone()));
            coefficient_similarities = r.similarities;
        }
        let record = refines && epoch + 1 == config.refine_epoch;
        let loss = trainer
            .run_epoch(&mut model, &data.train, epoch, record.then_some(&mut ledger), None)
            .stage(Stage::Train)?;
        log::debug!("epoch {epoch}: loss {loss:.5}");
        history.push(EpochRecord {
            phase: "train".into(),
            epoch,
            lr: config.lr.lr_at(epoch, config.epochs),
            loss,
        });
    }

    let frozen = model.freeze().stage(Stage::Eval)?;
    let test = evaluate_split(&frozen, &data.test, config).stage(Stage::Eval)?;
    let val = evaluate_split(&frozen, &data.val, config).stage(Stage::Eval)?;
    let anytime = enumerate_anytime_schedule(&frozen, &data.val.x, &data.val.y).stage(Stage::Eval)?;
    let interpolation = match frozen.as_slice() {
        [a, b, ..] if a.spec().same_architecture(b.spec()) => {
            Some(interpolation_curve(a, b, &data.test, config.interpolation_steps).stage(Stage::Eval)?)
        }
        _ => None,
    };

    let plan = model.plan();
    let report = ExperimentReport {
        config_hash: config.config_hash(),
        seed: config.seed,
        mode: config.mode,
        precision: T::PRECISION,
        budget: BudgetReport {
            full_parameters: budget.full,
            budget: budget.budget,
            unshared,
            minimum_feasible,
            max_slot_size,
            trainable_after_search,
            trainable_final: model.trainable_parameters(),
            committed: model.allocation().committed_parameters(plan),
        },
        search_threshold: search.threshold,
        clusters: plan.cluster_groups(),
        coefficient_sets: plan.coefficient_sets.len(),
        plan_sha256: plan_sha256(plan),
        test,
        val,
        anytime,
        interpolation,
        history,
    };
    Ok(ExperimentResult {
        config: config.clone(),
        report,
        model,
        superweight_similarities: search.similarities.clone(),
        coefficient_similarities,
        events,
    })
}
