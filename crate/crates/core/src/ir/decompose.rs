//! Lowers `Aggregate` and `ReduceScatter` into the four basic operators.

use super::{ApplyFn, IrBuilder, IrGraph, NodeId, OpKind, Operand, Reduce, RsKind, ScatterFn};
use crate::error::Result;
use crate::tensor::Elementwise;

/// Returns a graph with no composite nodes. Each lowered node records the
/// composite it came from in `origin`.
pub fn decompose(ir: &IrGraph) -> Result<IrGraph> {
    let mut b = IrBuilder::new(ir.phase);
    for p in &ir.params {
        b.param(p.name.clone(), p.rows, p.cols);
    }
    let mut map: Vec<NodeId> = Vec::with_capacity(ir.len());
    let mut next_group = ir.nodes.iter().filter_map(|n| n.origin).max().map_or(0, |g| g + 1);

    for n in &ir.nodes {
        let remap = |op: &Operand| Operand { node: map[op.node], access: op.access };
        let inputs: Vec<Operand> = n.inputs.iter().map(remap).collect();
        b.set_tag(n.tag.as_deref());
        let id = match &n.kind {
            OpKind::Aggregate { fun, heads, edge_fn, reduce, dir } => {
                b.set_origin(Some(next_group));
                next_group += 1;
                let k = fun.accesses().len();
                let sops: Vec<NodeId> = inputs[..k].iter().map(|o| o.node).collect();
                let s = b.scatter(*fun, *heads, &sops)?;
                let t = match edge_fn {
                    Some(f) => {
                        let mut ops = vec![Operand::direct(s)];
                        ops.extend_from_slice(&inputs[k..]);
                        b.apply_edge(f.clone(), &ops)?
                    }
                    None => s,
                };
                b.gather(*reduce, *dir, t)?
            }
            OpKind::ReduceScatter { kind, dir } => {
                b.set_origin(Some(next_group));
                next_group += 1;
                let m = inputs[0].node;
                let copy = ScatterFn::copy_of(*dir);
                match kind {
                    RsKind::EdgeSoftmax => {
                        let mx = b.gather(Reduce::Max, *dir, m)?;
                        let bm = b.scatter(copy, 1, &[mx])?;
                        b.mark_broadcast(bm, mx);
                        let sub = b.apply_edge(
                            ApplyFn::Elem(Elementwise::Sub),
                            &[Operand::direct(m), Operand::direct(bm)],
                        )?;
                        let ex = b.apply_edge(ApplyFn::Elem(Elementwise::Exp), &[Operand::direct(sub)])?;
                        let den = b.gather(Reduce::Sum, *dir, ex)?;
                        let bd = b.scatter(copy, 1, &[den])?;
                        b.mark_broadcast(bd, den);
                        b.apply_edge(ApplyFn::Elem(Elementwise::Div), &[Operand::direct(ex), Operand::direct(bd)])?
                    }
                    RsKind::Generic { reduce, edge_fn } => {
                        let r = b.gather(*reduce, *dir, m)?;
                        let br = b.scatter(copy, 1, &[r])?;
                        b.mark_broadcast(br, r);
                        b.apply_edge(edge_fn.clone(), &[Operand::direct(m), Operand::direct(br)])?
                    }
                }
            }
            kind if kind.is_source() => {
                b.set_origin(n.origin);
                b.source(kind.clone(), n.class, n.cols)
            }
            kind => {
                b.set_origin(n.origin);
                let id = b.push(kind.clone(), inputs)?;
                if let Some(of) = n.broadcast_of {
                    b.mark_broadcast(id, map[of]);
                }
                id
            }
        };
        map.push(id);
    }
    let exits = ir.exits.iter().map(|&x| map[x]).collect();
    let mut out = b.finish(exits)?;
    out.stash = ir.stash.clone();
    Ok(out)
}
