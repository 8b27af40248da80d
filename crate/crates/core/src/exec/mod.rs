//! Multi-worker executor for compiled pipelines.
//!
//! Regions run in plan order. Every region writes only its boundary outputs
//! and the tensors the checkpoint plan keeps; everything else lives in worker
//! scratch. The executor measures FLOPs, IO and memory while it runs.

pub mod region;

use std::collections::{BTreeSet, HashMap};
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::ir::{IrGraph, NodeId, OpKind, Part, Phase};
use crate::passes::cost::{resolve, schedule, CostReport, Counts, Key, RegionCost, Step};
use crate::passes::fusion::FusionPlan;
use crate::passes::pipeline::Pipeline;
use crate::tensor::{ParamTensor, Precision, Tensor};

pub use region::{OutSpec, Program, RegionRun};

/// Per-worker scratch capacity in scalars.
pub const DEFAULT_SCRATCH_CAPACITY: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecConfig {
    pub workers: usize,
    pub precision: Precision,
    /// Fail on any non-finite value.
    pub debug: bool,
    pub scratch_capacity: usize,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig { workers: 1, precision: Precision::F64, debug: false, scratch_capacity: DEFAULT_SCRATCH_CAPACITY }
    }
}

impl ExecConfig {
    pub fn with_workers(workers: usize) -> Self {
        ExecConfig { workers: workers.max(1), ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Materialization {
    Entry,
    /// Region output read by a later region or listed as an exit.
    Boundary,
    /// Region-internal tensor kept for the backward pass.
    Stash,
    Seed,
}

/// One tensor written to memory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Materialized {
    pub phase: Phase,
    pub node: NodeId,
    pub part: Part,
    pub rows: usize,
    pub cols: usize,
    pub kind: Materialization,
    pub region: Option<usize>,
}

/// Tensors currently held in memory, keyed across both passes.
#[derive(Debug, Default)]
struct Store {
    map: HashMap<Key, Tensor>,
    log: Vec<Materialized>,
}

impl Store {
    fn units(&self) -> u64 {
        self.map.values().map(|t| t.len() as u64).sum()
    }

    fn put(&mut self, key: Key, t: Tensor, kind: Materialization, region: Option<usize>) {
        self.log.push(Materialized { phase: key.0, node: key.1, part: key.2, rows: t.rows, cols: t.cols, kind, region });
        self.map.insert(key, t);
    }

    fn get(&self, key: Key) -> Result<&Tensor> {
        self.map.get(&key).ok_or_else(|| {
            let (phase, n, part) = key;
            Error::Checkpoint(format!("{phase:?} tensor {n} ({part:?}) is not in memory"))
        })
    }
}

/// Forward-pass state handed to the backward pass.
#[derive(Debug)]
pub struct ForwardRun {
    /// Exit tensors in `fwd.exits` order.
    pub exits: Vec<Tensor>,
    store: Store,
    counts: Counts,
    peak: u64,
    started: Instant,
}

impl ForwardRun {
    pub fn log(&self) -> &[Materialized] {
        &self.store.log
    }

    /// Report covering the forward pass only.
    pub fn report(&self) -> CostReport {
        let mut counts = self.counts.clone();
        counts.peak_mem_units = self.peak;
        CostReport { counts, wall_ms: self.started.elapsed().as_secs_f64() * 1e3 }
    }

    /// A stashed forward tensor, if kept.
    pub fn stashed(&self, node: NodeId, part: Part) -> Option<&Tensor> {
        self.store.map.get(&(Phase::Forward, node, part))
    }
}

#[derive(Debug)]
pub struct StepRun {
    pub exits: Vec<Tensor>,
    /// Parameter gradients, shaped like the parameters (zero when absent).
    pub grads: Vec<Tensor>,
    pub report: CostReport,
    pub log: Vec<Materialized>,
}

struct PassCtx<'a> {
    ir: &'a IrGraph,
    plan: &'a FusionPlan,
    steps: &'a [Step],
    stored: &'a BTreeSet<(NodeId, Part)>,
    key: &'a dyn Fn(NodeId) -> Key,
}

fn run_pass(
    cx: &PassCtx<'_>,
    g: &Graph,
    params: &[ParamTensor],
    cfg: &ExecConfig,
    store: &mut Store,
    counts: &mut Counts,
    peak: &mut u64,
    grads: &mut [Tensor],
) -> Result<()> {
    let phase = cx.ir.phase;
    for (r, step) in cx.plan.regions.iter().zip(cx.steps) {
        let prog = Program::new(cx.ir, r, cx.stored);
        let run = {
            let ext: Vec<&Tensor> = prog.ext.iter().map(|&t| store.get((cx.key)(t))).collect::<Result<_>>()?;
            prog.run(g, params, &ext, cfg)?
        };
        let allocated: u64 = run.outputs.iter().map(|t| t.len() as u64).sum();
        *peak = (*peak).max(store.units() + allocated + run.scratch);
        for (spec, t) in prog.outputs.iter().zip(run.outputs) {
            let kind = if r.outputs.contains(&spec.node) && spec.part == Part::Value {
                Materialization::Boundary
            } else {
                Materialization::Stash
            };
            store.put((phase, spec.node, spec.part), t, kind, Some(r.id));
        }
        for (p, g) in run.param_grads {
            let target = &mut grads[p.param];
            for i in 0..p.rows {
                for j in 0..p.cols {
                    target.data[(p.row0 + i) * target.cols + p.col0 + j] += g[i * p.cols + j];
                }
            }
        }
        for k in &step.free {
            store.map.remove(k);
        }
        let mut flops = 0;
        for &(n, f) in &run.member_flops {
            flops += f;
            counts.add_tag_flops(phase, cx.ir.node(n).tag.as_deref(), f);
        }
        counts.add_region(RegionCost {
            phase,
            region: r.id,
            mapping: prog.mapping(),
            expensive: r.expensive,
            members: r.nodes.len(),
            flops,
            io_read: run.io_read,
            io_write: run.io_write,
            scratch: run.scratch,
        });
    }
    Ok(())
}

/// Runs the forward graph. `inputs` must cover every `Input` node.
pub fn run_forward(p: &Pipeline, g: &Graph, params: &[ParamTensor], inputs: &[(NodeId, Tensor)], cfg: &ExecConfig) -> Result<ForwardRun> {
    let started = Instant::now();
    let sched = schedule(p);
    let mut store = Store::default();
    for &(phase, n, part) in &sched.entries {
        let t = inputs
            .iter()
            .find(|(id, _)| *id == n)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Config(format!("missing input tensor for node {n}")))?;
        let want = (p.fwd.rows(n, g), p.fwd.node(n).cols);
        if (t.rows, t.cols) != want {
            return Err(Error::Shape(format!("input {n} is {}x{}, expected {}x{}", t.rows, t.cols, want.0, want.1)));
        }
        store.put((phase, n, part), t, Materialization::Entry, None);
    }
    let mut counts = Counts::default();
    let mut peak = store.units();
    let key = |n: NodeId| (Phase::Forward, n, Part::Value);
    let cx = PassCtx { ir: &p.fwd, plan: &p.fwd_plan, steps: &sched.forward, stored: &p.stored, key: &key };
    run_pass(&cx, g, params, cfg, &mut store, &mut counts, &mut peak, &mut [])?;
    let exits = p.fwd.exits.iter().map(|&x| store.get(key(x)).cloned()).collect::<Result<Vec<_>>>()?;
    let mut stash_units = 0;
    for &(n, part) in &p.stored {
        stash_units += store.get((Phase::Forward, n, part))?.len() as u64;
    }
    counts.stash_units = stash_units;
    Ok(ForwardRun { exits, store, counts, peak, started })
}

/// Runs the backward graph on a finished forward pass and returns parameter
/// gradients for the sum-of-exits loss.
pub fn run_backward(p: &Pipeline, g: &Graph, params: &[ParamTensor], fwd: ForwardRun, cfg: &ExecConfig) -> Result<StepRun> {
    let b = p.bwd.as_ref().ok_or_else(|| Error::Config("pipeline was compiled without a backward pass".into()))?;
    let sched = schedule(p);
    let ForwardRun { exits, mut store, mut counts, mut peak, started } = fwd;
    for &k in &sched.seeds {
        let OpKind::Seed { exit } = b.ir.node(k.1).kind else { unreachable!("seed key") };
        let t = Tensor::filled(p.fwd.rows(exit, g), p.fwd.node(exit).cols, 1.0);
        store.put(k, t, Materialization::Seed, None);
    }
    peak = peak.max(store.units());
    let mut grads: Vec<Tensor> = params.iter().map(|q| Tensor::zeros(q.value.rows, q.value.cols)).collect();
    let key = |n: NodeId| resolve(&b.ir, n);
    let none = BTreeSet::new();
    let cx = PassCtx { ir: &b.ir, plan: &b.plan, steps: &sched.backward, stored: &none, key: &key };
    run_pass(&cx, g, params, cfg, &mut store, &mut counts, &mut peak, &mut grads)?;
    counts.peak_mem_units = peak;
    let report = CostReport { counts, wall_ms: started.elapsed().as_secs_f64() * 1e3 };
    Ok(StepRun { exits, grads, report, log: store.log })
}

/// Forward then backward (when compiled for training).
pub fn evaluate(p: &Pipeline, g: &Graph, params: &[ParamTensor], inputs: &[(NodeId, Tensor)], cfg: &ExecConfig) -> Result<StepRun> {
    let fwd = run_forward(p, g, params, inputs, cfg)?;
    if p.bwd.is_some() {
        run_backward(p, g, params, fwd, cfg)
    } else {
        let report = fwd.report();
        let grads = params.iter().map(|q| Tensor::zeros(q.value.rows, q.value.cols)).collect();
        Ok(StepRun { exits: fwd.exits, grads, report, log: fwd.store.log })
    }
}

/// One SGD step: gradients are stored on the parameters and
/// `params -= lr * grad`.
pub fn train_step(
    p: &Pipeline,
    g: &Graph,
    params: &mut [ParamTensor],
    inputs: &[(NodeId, Tensor)],
    lr: f64,
    cfg: &ExecConfig,
) -> Result<StepRun> {
    if p.bwd.is_none() {
        return Err(Error::Config("training needs a pipeline compiled with a backward pass".into()));
    }
    let run = evaluate(p, g, params, inputs, cfg)?;
    for (q, grad) in params.iter_mut().zip(&run.grads) {
        if lr != 0.0 {
            for (w, &d) in q.value.data.iter_mut().zip(&grad.data) {
                *w = cfg.precision.round(*w - lr * d);
            }
        }
        q.grad = Some(grad.clone());
    }
    Ok(run)
}

/// Sum of all exit entries (the training loss).
pub fn loss(exits: &[Tensor]) -> f64 {
    exits.iter().map(Tensor::sum).sum()
}
