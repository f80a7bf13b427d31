//! Ensemble members over one shared parameter store, ensemble prediction,
//! anytime subset schedules and parameter-space interpolation.

mod anytime;
mod frozen;
mod member;
mod model;

pub use anytime::{enumerate_anytime_schedule, select_under_budget, AnytimeSchedule, ScheduleEntry, MAX_ANYTIME_MEMBERS};
pub use frozen::{average_probs, ensemble_predict, interpolate_members, FrozenMember};
pub use member::MemberSpec;
pub use model::{BatchObjective, InitOptions, StepOutput, SwnModel};
