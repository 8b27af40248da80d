//! One fused region as a worker program.
//!
//! Vertex-balanced: each worker owns a contiguous vertex range and walks the
//! edge group of every vertex it owns, keeping edge values in a per-edge cell
//! (plus a per-group buffer for values a later phase rereads) and reducing
//! locally. Edge-balanced: each worker owns a contiguous edge range, keeps
//! private reduction partials, and the partials are merged in worker order;
//! vertex work then runs over contiguous vertex ranges.

use std::collections::BTreeSet;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::graph::{Dir, Graph};
use crate::ir::{Access, ApplyFn, Class, IrGraph, NodeId, OpKind, Part, Reduce, RowCtx, ScatterFn};
use crate::ir::apply::ParamRef;
use crate::passes::cost::{materialized, partition, role, row_flops, slot_reads, Role};
use crate::passes::fusion::{Mapping, Region};
use crate::tensor::{ParamTensor, Precision, Tensor};

use super::ExecConfig;

const MAX_ARITY: usize = 4;

#[derive(Debug, Clone, Copy)]
enum Src {
    /// Tensor read from outside the region.
    Ext(usize, Access),
    /// Same-phase edge member: offset and width in the per-edge cell.
    Cell(usize, usize),
    /// Edge member of an earlier phase.
    Cross(usize),
    /// Vertex member: offset and width in a vertex row.
    Vert(usize, usize, Access),
}

#[derive(Debug, Clone)]
enum Op {
    Scatter(ScatterFn, usize),
    Gather(Reduce),
    Apply(ApplyFn),
}

#[derive(Debug, Clone)]
struct Member {
    node: NodeId,
    role: Role,
    op: Op,
    phase: usize,
    cols: usize,
    /// Reduction direction of a Gather.
    dir: Dir,
    srcs: Vec<Src>,
    /// `(external index, elements per row)` for every external slot.
    reads: Vec<(usize, u64)>,
    flops: u64,
    cell: usize,
    cross: Option<usize>,
    voff: usize,
    goff: usize,
    out: Option<usize>,
    argmax_out: Option<usize>,
    param: Option<usize>,
}

/// A tensor the region writes.
#[derive(Debug, Clone, PartialEq)]
pub struct OutSpec {
    pub node: NodeId,
    pub part: Part,
    pub class: Class,
    pub cols: usize,
    /// Whether the write counts as IO.
    pub charged: bool,
}

#[derive(Debug, Clone)]
pub struct Program {
    pub id: usize,
    mapping: Mapping,
    orientation: Dir,
    phases: usize,
    members: Vec<Member>,
    /// External tensors, in `Region::inputs` order.
    pub ext: Vec<NodeId>,
    cell_width: usize,
    cross_cols: Vec<usize>,
    vwidth: usize,
    gwidth: usize,
    pub outputs: Vec<OutSpec>,
    params: Vec<ParamRef>,
}

/// Everything a region run produces.
#[derive(Debug, Clone)]
pub struct RegionRun {
    /// Parallel to `Program::outputs`.
    pub outputs: Vec<Tensor>,
    pub param_grads: Vec<(ParamRef, Vec<f64>)>,
    /// FLOPs per member node.
    pub member_flops: Vec<(NodeId, u64)>,
    pub io_read: u64,
    pub io_write: u64,
    pub scratch: u64,
}

impl Program {
    pub fn new(ir: &IrGraph, region: &Region, stored: &BTreeSet<(NodeId, Part)>) -> Program {
        let ext = region.inputs.clone();
        let mut outputs = Vec::new();
        for (n, part) in materialized(ir, region, stored) {
            let node = ir.node(n);
            let boundary = region.outputs.contains(&n);
            let class = if part == Part::Argmax { Class::Vertex } else { node.class };
            let charged = part == Part::Value && (boundary || node.class == Class::Edge);
            outputs.push(OutSpec { node: n, part, class, cols: node.cols, charged });
        }
        let find_out = |n: NodeId, part: Part| outputs.iter().position(|o| o.node == n && o.part == part);

        let mut members: Vec<Member> = Vec::with_capacity(region.nodes.len());
        let (mut cell_width, mut vwidth, mut gwidth) = (0, 0, 0);
        let mut cross_cols = Vec::new();
        let mut params = Vec::new();
        for (i, &n) in region.nodes.iter().enumerate() {
            let node = ir.node(n);
            let r = role(node);
            let mut dir = region.orientation;
            let op = match &node.kind {
                OpKind::Scatter { fun, heads } => Op::Scatter(*fun, *heads),
                OpKind::Gather { reduce, dir: d } => {
                    dir = *d;
                    Op::Gather(*reduce)
                }
                OpKind::ApplyEdge(f) | OpKind::ApplyVertex(f) => Op::Apply(f.clone()),
                k => unreachable!("{k:?} in a region"),
            };
            let phase = region.phases[i];
            let mut srcs = Vec::with_capacity(node.inputs.len());
            let mut reads = Vec::new();
            for (slot, o) in node.inputs.iter().enumerate() {
                let src = match members.iter().find(|m| m.node == o.node) {
                    None => {
                        let t = ext.iter().position(|&x| x == o.node).expect("external input listed");
                        reads.push((t, slot_reads(ir, node, slot)));
                        Src::Ext(t, o.access)
                    }
                    Some(p) => match p.role {
                        Role::Edge if p.phase == phase => Src::Cell(p.cell, p.cols),
                        Role::Edge => Src::Cross(p.cross.expect("cross-phase member")),
                        Role::Gather { .. } | Role::Vertex => Src::Vert(p.voff, p.cols, o.access),
                        Role::ParamEdge | Role::ParamVertex => unreachable!("parameter gradients have no readers"),
                    },
                };
                srcs.push(src);
            }
            let mut m = Member {
                node: n,
                role: r,
                op,
                phase,
                cols: node.cols,
                dir,
                srcs,
                reads,
                flops: row_flops(ir, node),
                cell: 0,
                cross: None,
                voff: 0,
                goff: 0,
                out: find_out(n, Part::Value),
                argmax_out: find_out(n, Part::Argmax),
                param: None,
            };
            match r {
                Role::Edge => {
                    m.cell = cell_width;
                    cell_width += node.cols;
                    if region.cross_phase.contains(&n) {
                        m.cross = Some(cross_cols.len());
                        cross_cols.push(node.cols);
                    }
                }
                Role::Gather { .. } => {
                    m.voff = vwidth;
                    m.goff = gwidth;
                    vwidth += r.vertex_width(node.cols);
                    gwidth += r.vertex_width(node.cols);
                }
                Role::Vertex => {
                    m.voff = vwidth;
                    vwidth += node.cols;
                }
                Role::ParamEdge | Role::ParamVertex => {
                    let Op::Apply(f) = &m.op else { unreachable!() };
                    m.param = Some(params.len());
                    params.push(f.param_target().expect("parameter-gradient target"));
                }
            }
            members.push(m);
        }
        Program {
            id: region.id,
            mapping: region.mapping,
            orientation: region.orientation,
            phases: region.num_phases(),
            members,
            ext,
            cell_width,
            cross_cols,
            vwidth,
            gwidth,
            outputs,
            params,
        }
    }

    /// Runs the region under `mapping` instead of the planned one. Either
    /// mapping computes the same values; the planner only decides which is
    /// legal to choose automatically.
    pub fn with_mapping(mut self, mapping: Mapping) -> Program {
        self.mapping = mapping;
        self
    }

    pub fn mapping(&self) -> Mapping {
        self.mapping
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Execution { region: self.id, msg: msg.into() }
    }

    fn has_edge_work(&self, phase: usize) -> bool {
        self.members.iter().any(|m| m.phase == phase && m.role.on_edges())
    }

    /// Executes the region. `ext` is parallel to `self.ext`.
    pub fn run(&self, g: &Graph, params: &[ParamTensor], ext: &[&Tensor], cfg: &ExecConfig) -> Result<RegionRun> {
        let env = Env { prog: self, g, params, ext, cfg };
        match self.mapping {
            Mapping::VertexBalanced => run_vb(&env),
            Mapping::EdgeBalanced => run_eb(&env),
        }
    }
}

/// Read-only inputs shared by all workers.
struct Env<'a> {
    prog: &'a Program,
    g: &'a Graph,
    params: &'a [ParamTensor],
    ext: &'a [&'a Tensor],
    cfg: &'a ExecConfig,
}

/// Per-worker counters and parameter partials.
struct Tally {
    member_flops: Vec<u64>,
    /// `ext * members + member`.
    reads: Vec<u64>,
    params: Vec<Vec<f64>>,
}

impl Tally {
    fn new(p: &Program) -> Self {
        Tally {
            member_flops: vec![0; p.members.len()],
            reads: vec![0; p.ext.len() * p.members.len()],
            params: p.params.iter().map(|r| vec![0.0; r.rows * r.cols]).collect(),
        }
    }

    fn charge(&mut self, mi: usize, m: &Member, members: usize) {
        self.member_flops[mi] += m.flops;
        for &(t, n) in &m.reads {
            self.reads[t * members + mi] += n;
        }
    }
}

/// Fork-join over `items`; runs inline when there is at most one.
fn fork<T: Send, R: Send>(items: Vec<T>, f: impl Fn(T) -> R + Sync) -> Vec<R> {
    if items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items.into_iter().map(|it| s.spawn(move || f(it))).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    })
}

fn init_acc(prog: &Program, acc: &mut [f64]) {
    for m in &prog.members {
        if let Role::Gather { max } = m.role {
            let a = &mut acc[m.goff..m.goff + m.role.vertex_width(m.cols)];
            if max {
                a[..m.cols].fill(f64::NEG_INFINITY);
                a[m.cols..].fill(-1.0);
            } else {
                a.fill(0.0);
            }
        }
    }
}

fn reduce_into(reduce: Reduce, acc: &mut [f64], cols: usize, x: &[f64], e: usize, prec: Precision) {
    match reduce {
        Reduce::Sum => {
            for (a, &v) in acc[..cols].iter_mut().zip(x) {
                *a = prec.round(*a + v);
            }
        }
        Reduce::Max => {
            let (val, arg) = acc.split_at_mut(cols);
            for j in 0..cols {
                if arg[j] < 0.0 || x[j] > val[j] {
                    val[j] = x[j];
                    arg[j] = e as f64;
                }
            }
        }
    }
}

/// Turns an accumulator into the reduction result (empty groups give 0).
fn finalize(role: Role, cols: usize, slot: &mut [f64]) {
    if role == (Role::Gather { max: true }) {
        let (val, arg) = slot.split_at_mut(cols);
        for j in 0..cols {
            if arg[j] < 0.0 {
                val[j] = 0.0;
            }
        }
    }
}

/// Where vertex members live while edge work reads them.
#[derive(Clone, Copy)]
enum VertView<'a> {
    /// The single vertex a vertex-balanced unit owns.
    Local(&'a [f64]),
    /// Full buffer of `width`-wide rows, indexed by endpoint.
    Shared(&'a [f64], usize),
}

impl<'a> VertView<'a> {
    fn get(self, g: &Graph, e: usize, voff: usize, cols: usize, access: Access) -> &'a [f64] {
        match self {
            VertView::Local(row) => &row[voff..voff + cols],
            VertView::Shared(buf, w) => {
                let v = g.endpoint(e, access.side().expect("edge read of a vertex tensor"));
                &buf[v * w + voff..v * w + voff + cols]
            }
        }
    }
}

fn ext_for_edge<'a>(env: &Env<'a>, t: usize, access: Access, e: usize) -> &'a [f64] {
    let x = env.ext[t];
    match access.side() {
        Some(side) => x.row(env.g.endpoint(e, side)),
        None => x.row(e),
    }
}

fn check(env: &Env<'_>, m: &Member, out: &[f64]) -> Result<()> {
    if env.cfg.debug && out.iter().any(|x| !x.is_finite()) {
        return Err(env.prog.err(format!("node {} produced a non-finite value", m.node)));
    }
    Ok(())
}

fn round_all(prec: Precision, out: &mut [f64]) {
    if prec == Precision::F32 {
        for x in out {
            *x = prec.round(*x);
        }
    }
}

/// Edge-side buffers of one worker.
struct EdgeBufs<'b> {
    cell: &'b mut [f64],
    cross: &'b mut [Vec<f64>],
    /// Reduction accumulators, rows of `gwidth`.
    acc: &'b mut [f64],
}

/// Runs the edge members of `phase` on edge `e`. `pos` indexes the cross
/// buffers and `target` maps a reduction direction to the accumulator row.
/// Rows of edge outputs are appended to `blocks`.
#[allow(clippy::too_many_arguments)]
fn edge_step(
    env: &Env<'_>,
    phase: usize,
    e: usize,
    pos: usize,
    target: impl Fn(Dir) -> usize,
    vert: VertView<'_>,
    bufs: &mut EdgeBufs<'_>,
    tally: &mut Tally,
    blocks: &mut [Vec<f64>],
) -> Result<()> {
    let prog = env.prog;
    let nm = prog.members.len();
    for (mi, m) in prog.members.iter().enumerate() {
        if m.phase != phase || !m.role.on_edges() {
            continue;
        }
        tally.charge(mi, m, nm);
        let split = if m.role == Role::Edge { m.cell } else { prog.cell_width };
        let (lo, hi) = bufs.cell.split_at_mut(split);
        let mut ins: [&[f64]; MAX_ARITY] = [&[]; MAX_ARITY];
        for (k, s) in m.srcs.iter().enumerate() {
            ins[k] = match *s {
                Src::Ext(t, a) => ext_for_edge(env, t, a, e),
                Src::Cell(off, w) => &lo[off..off + w],
                Src::Cross(c) => {
                    let w = prog.cross_cols[c];
                    &bufs.cross[c][pos * w..(pos + 1) * w]
                }
                Src::Vert(voff, w, a) => vert.get(env.g, e, voff, w, a),
            };
        }
        let ins = &ins[..m.srcs.len()];
        match (&m.op, m.role) {
            (Op::Scatter(fun, heads), _) => {
                let out = &mut hi[..m.cols];
                fun.eval(ins, *heads, out);
                round_all(env.cfg.precision, out);
                check(env, m, out)?;
            }
            (Op::Apply(f), Role::Edge) => {
                let out = &mut hi[..m.cols];
                f.eval_row(env.params, ins, &RowCtx { graph: env.g, row: e }, out);
                round_all(env.cfg.precision, out);
                check(env, m, out)?;
            }
            (Op::Apply(f), Role::ParamEdge) => {
                f.accumulate_row(env.params, ins, &mut tally.params[m.param.expect("param slot")]);
            }
            (Op::Gather(reduce), _) => {
                let base = target(m.dir) * prog.gwidth + m.goff;
                let w = m.role.vertex_width(m.cols);
                reduce_into(*reduce, &mut bufs.acc[base..base + w], m.cols, ins[0], e, env.cfg.precision);
            }
            _ => unreachable!("edge step on a vertex member"),
        }
        if m.role == Role::Edge {
            let row = &bufs.cell[m.cell..m.cell + m.cols];
            if let Some(c) = m.cross {
                bufs.cross[c][pos * m.cols..(pos + 1) * m.cols].copy_from_slice(row);
            }
            if let Some(o) = m.out {
                blocks[o].extend_from_slice(row);
            }
        }
    }
    Ok(())
}

/// Runs the vertex members of `phase` on vertex `v`. `row` holds every vertex
/// member of `v` (`vwidth` wide); reductions are already finalized in it.
fn vertex_step(env: &Env<'_>, phase: usize, v: usize, row: &mut [f64], tally: &mut Tally) -> Result<()> {
    let prog = env.prog;
    let nm = prog.members.len();
    for (mi, m) in prog.members.iter().enumerate() {
        if m.phase != phase || m.role.on_edges() {
            continue;
        }
        tally.charge(mi, m, nm);
        let split = if m.role == Role::Vertex { m.voff } else { prog.vwidth };
        let (lo, hi) = row.split_at_mut(split);
        let mut ins: [&[f64]; MAX_ARITY] = [&[]; MAX_ARITY];
        for (k, s) in m.srcs.iter().enumerate() {
            ins[k] = match *s {
                Src::Ext(t, _) => env.ext[t].row(v),
                Src::Vert(voff, w, _) => &lo[voff..voff + w],
                Src::Cell(..) | Src::Cross(_) => unreachable!("vertex member reads an edge value"),
            };
        }
        let ins = &ins[..m.srcs.len()];
        let Op::Apply(f) = &m.op else { unreachable!("vertex member is an Apply") };
        if m.role == Role::ParamVertex {
            f.accumulate_row(env.params, ins, &mut tally.params[m.param.expect("param slot")]);
        } else {
            let out = &mut hi[..m.cols];
            f.eval_row(env.params, ins, &RowCtx { graph: env.g, row: v }, out);
            round_all(env.cfg.precision, out);
            check(env, m, out)?;
        }
    }
    Ok(())
}

/// Appends the vertex-class outputs of one vertex row.
fn push_vertex_outputs(prog: &Program, row: &[f64], blocks: &mut [Vec<f64>]) {
    for m in &prog.members {
        if let Some(o) = m.out {
            if !m.role.on_edges() || matches!(m.role, Role::Gather { .. }) {
                blocks[o].extend_from_slice(&row[m.voff..m.voff + m.cols]);
            }
        }
        if let Some(o) = m.argmax_out {
            blocks[o].extend_from_slice(&row[m.voff + m.cols..m.voff + 2 * m.cols]);
        }
    }
}

/// What one worker hands back.
struct Chunk {
    tally: Tally,
    /// Output rows produced by this worker, per output.
    blocks: Vec<Vec<f64>>,
    /// Vertex rows covered (vertex outputs) and edge ids in block order.
    vertices: Range<usize>,
    edges: Vec<usize>,
    scratch: u64,
}

fn check_capacity(env: &Env<'_>, scratch: usize) -> Result<()> {
    if scratch > env.cfg.scratch_capacity {
        return Err(env.prog.err(format!(
            "worker scratch of {scratch} scalars exceeds the capacity of {}",
            env.cfg.scratch_capacity
        )));
    }
    Ok(())
}

fn vb_worker(env: &Env<'_>, units: Range<usize>) -> Result<Chunk> {
    let prog = env.prog;
    let mut tally = Tally::new(prog);
    let mut blocks = vec![Vec::new(); prog.outputs.len()];
    if units.is_empty() {
        return Ok(Chunk { tally, blocks, vertices: units, edges: Vec::new(), scratch: 0 });
    }
    let idx = env.g.index(prog.orientation);
    let maxdeg = units.clone().map(|v| idx.degree(v)).max().unwrap_or(0);
    let mut cell = vec![0.0; prog.cell_width];
    let mut cross: Vec<Vec<f64>> = prog.cross_cols.iter().map(|&c| vec![0.0; c * maxdeg]).collect();
    let mut vert = vec![0.0; prog.vwidth];
    let mut acc = vec![0.0; prog.gwidth];
    let scratch = cell.len() + cross.iter().map(Vec::len).sum::<usize>() + vert.len() + acc.len();
    check_capacity(env, scratch)?;
    let mut edges = Vec::new();
    for v in units.clone() {
        init_acc(prog, &mut acc);
        vert.fill(0.0);
        for p in 0..prog.phases {
            if prog.has_edge_work(p) {
                for (pos, &(_, e)) in idx.row(v).iter().enumerate() {
                    let mut bufs = EdgeBufs { cell: &mut cell, cross: &mut cross, acc: &mut acc };
                    edge_step(env, p, e, pos, |_| 0, VertView::Local(&vert), &mut bufs, &mut tally, &mut blocks)?;
                }
            }
            for m in prog.members.iter().filter(|m| m.phase == p) {
                if let Role::Gather { .. } = m.role {
                    let w = m.role.vertex_width(m.cols);
                    let slot = &mut vert[m.voff..m.voff + w];
                    slot.copy_from_slice(&acc[m.goff..m.goff + w]);
                    finalize(m.role, m.cols, slot);
                }
            }
            vertex_step(env, p, v, &mut vert, &mut tally)?;
        }
        push_vertex_outputs(prog, &vert, &mut blocks);
        edges.extend(idx.row(v).iter().map(|&(_, e)| e));
    }
    Ok(Chunk { tally, blocks, vertices: units, edges, scratch: scratch as u64 })
}

fn run_vb(env: &Env<'_>) -> Result<RegionRun> {
    let ranges = partition(env.g.num_vertices(), env.cfg.workers);
    let parts = fork(ranges, |r| vb_worker(env, r)).into_iter().collect::<Result<Vec<_>>>()?;
    assemble(env, parts, 0)
}

/// State an edge-balanced worker keeps across phases.
struct EbWorker {
    edges: Range<usize>,
    vertices: Range<usize>,
    cell: Vec<f64>,
    cross: Vec<Vec<f64>>,
    acc: Vec<f64>,
    tally: Tally,
    blocks: Vec<Vec<f64>>,
    scratch: usize,
}

fn run_eb(env: &Env<'_>) -> Result<RegionRun> {
    let prog = env.prog;
    let (nv, ne) = (env.g.num_vertices(), env.g.num_edges());
    let w = env.cfg.workers.max(1);
    let mut workers: Vec<EbWorker> = partition(ne, w)
        .into_iter()
        .zip(partition(nv, w))
        .map(|(er, vr)| {
            let busy = !er.is_empty();
            let cell = if busy { vec![0.0; prog.cell_width] } else { Vec::new() };
            let cross: Vec<Vec<f64>> = prog.cross_cols.iter().map(|&c| vec![0.0; if busy { c * er.len() } else { 0 }]).collect();
            let mut acc = if busy { vec![0.0; prog.gwidth * nv] } else { Vec::new() };
            for row in acc.chunks_mut(prog.gwidth.max(1)) {
                init_acc(prog, row);
            }
            let scratch = cell.len() + cross.iter().map(Vec::len).sum::<usize>() + acc.len();
            EbWorker {
                edges: er,
                vertices: vr,
                cell,
                cross,
                acc,
                tally: Tally::new(prog),
                blocks: vec![Vec::new(); prog.outputs.len()],
                scratch,
            }
        })
        .collect();
    for wk in &workers {
        check_capacity(env, wk.scratch)?;
    }
    let vw = prog.vwidth;
    let mut shared = vec![0.0; vw * nv];

    for p in 0..prog.phases {
        if prog.has_edge_work(p) {
            let view = VertView::Shared(&shared, vw);
            let results = fork(workers.iter_mut().collect(), |wk: &mut EbWorker| -> Result<()> {
                let start = wk.edges.start;
                for e in wk.edges.clone() {
                    let mut bufs = EdgeBufs { cell: &mut wk.cell, cross: &mut wk.cross, acc: &mut wk.acc };
                    let g = env.g;
                    edge_step(env, p, e, e - start, |d| g.endpoint(e, d), view, &mut bufs, &mut wk.tally, &mut wk.blocks)?;
                }
                Ok(())
            });
            results.into_iter().collect::<Result<Vec<_>>>()?;
        }
        // Merge reduction partials in worker order.
        for m in prog.members.iter().filter(|m| m.phase == p) {
            let Op::Gather(reduce) = m.op else { continue };
            let width = m.role.vertex_width(m.cols);
            for v in 0..nv {
                let slot = &mut shared[v * vw + m.voff..v * vw + m.voff + width];
                init_acc_slot(m, slot);
                for wk in workers.iter().filter(|wk| !wk.edges.is_empty()) {
                    let part = &wk.acc[v * prog.gwidth + m.goff..v * prog.gwidth + m.goff + width];
                    merge_partial(reduce, m.cols, slot, part, env.cfg.precision);
                }
                finalize(m.role, m.cols, slot);
            }
        }
        if prog.members.iter().any(|m| m.phase == p && !m.role.on_edges()) {
            let mut rest: &mut [f64] = &mut shared;
            let mut jobs = Vec::with_capacity(workers.len());
            for wk in workers.iter_mut() {
                let (mine, tail) = rest.split_at_mut(wk.vertices.len() * vw);
                rest = tail;
                jobs.push((wk, mine));
            }
            let results = fork(jobs, |(wk, rows): (&mut EbWorker, &mut [f64])| -> Result<()> {
                for (i, v) in wk.vertices.clone().enumerate() {
                    vertex_step(env, p, v, &mut rows[i * vw..(i + 1) * vw], &mut wk.tally)?;
                }
                Ok(())
            });
            results.into_iter().collect::<Result<Vec<_>>>()?;
        }
    }

    let parts = workers
        .into_iter()
        .map(|mut wk| {
            for v in wk.vertices.clone() {
                push_vertex_outputs(prog, &shared[v * vw..(v + 1) * vw], &mut wk.blocks);
            }
            Chunk {
                tally: wk.tally,
                blocks: wk.blocks,
                vertices: wk.vertices,
                edges: wk.edges.collect(),
                scratch: wk.scratch as u64,
            }
        })
        .collect();
    assemble(env, parts, shared.len() as u64)
}

fn init_acc_slot(m: &Member, slot: &mut [f64]) {
    if m.role == (Role::Gather { max: true }) {
        slot[..m.cols].fill(f64::NEG_INFINITY);
        slot[m.cols..].fill(-1.0);
    } else {
        slot.fill(0.0);
    }
}

/// Folds one worker's partial into the merged slot. For max, a later worker
/// only wins on a strictly larger value, so ties keep the lowest edge id.
fn merge_partial(reduce: Reduce, cols: usize, slot: &mut [f64], part: &[f64], prec: Precision) {
    match reduce {
        Reduce::Sum => {
            for (s, &x) in slot[..cols].iter_mut().zip(&part[..cols]) {
                *s = prec.round(*s + x);
            }
        }
        Reduce::Max => {
            let (val, arg) = slot.split_at_mut(cols);
            for j in 0..cols {
                let (pv, pa) = (part[j], part[cols + j]);
                if pa >= 0.0 && (arg[j] < 0.0 || pv > val[j]) {
                    val[j] = pv;
                    arg[j] = pa;
                }
            }
        }
    }
}

/// Scatters worker blocks into output tensors and folds the counters.
fn assemble(env: &Env<'_>, parts: Vec<Chunk>, shared: u64) -> Result<RegionRun> {
    let prog = env.prog;
    let (nv, ne) = (env.g.num_vertices(), env.g.num_edges());
    let mut outputs: Vec<Tensor> = prog
        .outputs
        .iter()
        .map(|o| Tensor::zeros(if o.class == Class::Edge { ne } else { nv }, o.cols))
        .collect();
    let nm = prog.members.len();
    let mut member_flops = vec![0u64; nm];
    let mut reads = vec![0u64; prog.ext.len() * nm];
    let mut grads: Vec<Vec<f64>> = prog.params.iter().map(|r| vec![0.0; r.rows * r.cols]).collect();
    let mut io_write = 0u64;
    let mut scratch = shared;
    for part in parts {
        scratch += part.scratch;
        for (a, b) in member_flops.iter_mut().zip(&part.tally.member_flops) {
            *a += b;
        }
        for (a, b) in reads.iter_mut().zip(&part.tally.reads) {
            *a += b;
        }
        for (g, p) in grads.iter_mut().zip(&part.tally.params) {
            for (a, b) in g.iter_mut().zip(p) {
                *a += b;
            }
        }
        for (o, (spec, block)) in prog.outputs.iter().zip(&part.blocks).enumerate() {
            let t = &mut outputs[o];
            let c = spec.cols;
            if spec.class == Class::Edge {
                if block.len() != part.edges.len() * c {
                    return Err(prog.err(format!("edge output {} incomplete", spec.node)));
                }
                for (i, &e) in part.edges.iter().enumerate() {
                    t.row_mut(e).copy_from_slice(&block[i * c..(i + 1) * c]);
                }
            } else {
                if block.len() != part.vertices.len() * c {
                    return Err(prog.err(format!("vertex output {} incomplete", spec.node)));
                }
                t.data[part.vertices.start * c..part.vertices.end * c].copy_from_slice(block);
            }
            if spec.charged {
                io_write += block.len() as u64;
            }
        }
    }
    let io_read = (0..prog.ext.len()).map(|t| (0..nm).map(|m| reads[t * nm + m]).max().unwrap_or(0)).sum();
    Ok(RegionRun {
        outputs,
        param_grads: prog.params.iter().copied().zip(grads).collect(),
        member_flops: prog.members.iter().map(|m| m.node).zip(member_flops).collect(),
        io_read,
        io_write,
        scratch,
    })
}
