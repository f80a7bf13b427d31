//! Where to share: gradient evidence, similarity criteria, queue grouping,
//! coefficient refinement and fixed baseline groupings.

mod baselines;
mod export;
mod grouping;
mod ledger;
mod refine;
mod similarity;

pub use baselines::{baseline_grouping, kmeans, BaselineContext, BaselineMode};
pub use export::{write_similarity_csv, PlanEvent, PlanEventKind, PlanEventLog};
pub use grouping::{group_by_queue, LayerGroups, SimilarityEntry, SimilarityQueue};
pub use ledger::GradientLedger;
pub use refine::{
    cluster_by_similarity, decouple_coefficients, refine_coefficients, superweight_similarities, CoefficientSplit,
    Refinement, SimilarityRecord,
};
pub use similarity::{coefficient_similarity, cosine, superweight_similarity, DEGENERATE_NORM};
