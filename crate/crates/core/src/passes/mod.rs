//! Optimization passes over lowered graphs and the static cost model.

pub mod checkpoint;
pub mod cost;
pub mod fusion;
pub mod pipeline;
pub mod reorganize;

pub use checkpoint::{plan_recompute, splice, stash_all, CheckpointPlan, Label, RECOMPUTE_THRESHOLD};
pub use cost::{cost_model, CostReport, Counts, RegionCost};
pub use fusion::{plan_fusion, plan_unfused, FusionPlan, Mapping, Region};
pub use pipeline::{compile, BackwardPass, OptLevel, Pipeline};
pub use reorganize::reorganize;
