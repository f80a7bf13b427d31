//! Weight Templates, SuperWeight composition, tiling and budget allocation.

mod alloc;
mod checkpoint;
mod compose;
mod layer;
mod plan;
mod tiling;

pub use alloc::{allocate_templates, minimum_budget, TemplateAllocation};
pub use checkpoint::{checkpoint_precision, Checkpoint};
pub use compose::{assemble_layer, compose_superweight, grads_to_templates_and_coeffs, slice_layer, CompositionGrads};
pub use layer::{validate_layers, BankId, CoeffId, LayerId, LayerKind, LayerSpec, MemberId, SlotId, WeightShape};
pub use plan::{Cluster, CoefficientSetSpec, SharingPlan};
pub use tiling::{plan_tiling, smallest_first, split_tileable, Placement, SuperWeightSlot, TilingPlan};
