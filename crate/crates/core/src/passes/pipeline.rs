//! Pass ordering for each optimization level.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DegreeStats;
use crate::ir::backward::derive_backward;
use crate::ir::decompose::decompose;
use crate::ir::{IrGraph, NodeId, OpKind, Part};
use crate::passes::checkpoint::{plan_recompute, splice, stash_all, CheckpointPlan, RECOMPUTE_THRESHOLD};
use crate::passes::fusion::{plan_fusion, plan_unfused, FusionPlan, Mapping};
use crate::passes::reorganize::reorganize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OptLevel {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "reorg")]
    Reorg,
    #[serde(rename = "reorg+fusion")]
    ReorgFusion,
    #[serde(rename = "all")]
    All,
}

impl OptLevel {
    pub const ALL: [OptLevel; 4] = [OptLevel::None, OptLevel::Reorg, OptLevel::ReorgFusion, OptLevel::All];

    pub fn name(self) -> &'static str {
        match self {
            OptLevel::None => "none",
            OptLevel::Reorg => "reorg",
            OptLevel::ReorgFusion => "reorg+fusion",
            OptLevel::All => "all",
        }
    }

    pub fn reorganizes(self) -> bool {
        self >= OptLevel::Reorg
    }

    pub fn fuses(self) -> bool {
        self >= OptLevel::ReorgFusion
    }

    pub fn recomputes(self) -> bool {
        self == OptLevel::All
    }
}

impl fmt::Display for OptLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(OptLevel::None),
            "reorg" => Ok(OptLevel::Reorg),
            "reorg+fusion" | "fusion" => Ok(OptLevel::ReorgFusion),
            "all" => Ok(OptLevel::All),
            other => Err(Error::Config(format!("unknown opt level `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardPass {
    /// Backward graph, with regenerated tensors spliced in.
    pub ir: IrGraph,
    pub plan: FusionPlan,
    pub ckpt: CheckpointPlan,
}

/// Everything the executor and the cost model need.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub opt: OptLevel,
    pub fwd: IrGraph,
    pub fwd_plan: FusionPlan,
    pub bwd: Option<BackwardPass>,
    /// Forward tensors written to the stash store (inputs excluded).
    pub stored: BTreeSet<(NodeId, Part)>,
    /// Pairs rewritten by reorganization.
    pub rewrites: usize,
}

fn plan(ir: &IrGraph, opt: OptLevel, stats: &DegreeStats, over: Option<Mapping>) -> Result<FusionPlan> {
    if opt.fuses() {
        plan_fusion(ir, stats, over)
    } else {
        plan_unfused(ir, stats, over)
    }
}

/// Lowers and optimizes a forward model graph. With `train`, the backward
/// graph is derived and planned as well.
pub fn compile(model: &IrGraph, opt: OptLevel, stats: &DegreeStats, over: Option<Mapping>, train: bool) -> Result<Pipeline> {
    let lowered = decompose(model)?;
    let (fwd, rewrites) = if opt.reorganizes() { reorganize(&lowered)? } else { (lowered, 0) };
    let fwd_plan = plan(&fwd, opt, stats, over)?;
    let mut stored = BTreeSet::new();
    let bwd = if train {
        let raw = derive_backward(&fwd)?;
        let (ir, ckpt) = if opt.recomputes() {
            let ckpt = plan_recompute(&fwd, &raw, RECOMPUTE_THRESHOLD);
            (splice(&fwd, &raw, &ckpt)?, ckpt)
        } else {
            let ckpt = stash_all(&fwd, &raw);
            (raw, ckpt)
        };
        stored = ir
            .stash
            .iter()
            .copied()
            .filter(|&(n, _)| !matches!(fwd.node(n).kind, OpKind::Input { .. }))
            .collect();
        let plan = plan(&ir, opt, stats, over)?;
        Some(BackwardPass { ir, plan, ckpt })
    } else {
        None
    };
    Ok(Pipeline { opt, fwd, fwd_plan, bwd, stored, rewrites })
}
