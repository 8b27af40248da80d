//! Propagation-postponed reorganization: `Scatter(phi) -> ApplyEdge(f)`
//! becomes `ApplyVertex(f) -> Scatter(phi)` when `f` distributes over `phi`,
//! so the expensive work runs once per vertex instead of once per edge.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ir::{ApplyFn, IrBuilder, IrGraph, NodeId, OpKind, Operand, ScatterFn};

/// Static distributivity table over `(f, phi)` tags.
pub fn distributes(f: &ApplyFn, phi: ScatterFn) -> bool {
    let linear = matches!(f, ApplyFn::Linear(_) | ApplyFn::HeadDot { .. } | ApplyFn::Scale(_));
    linear && matches!(phi, ScatterFn::CopyU | ScatterFn::CopyV | ScatterFn::UAddV | ScatterFn::USubV)
}

/// How a matched pair is rewritten.
#[derive(Debug, Clone, PartialEq)]
enum Rewrite {
    /// Same function on every operand, same scatter function.
    Distribute(ApplyFn),
    /// Left/right halves of a function applied to a concatenation, then added.
    SplitConcat(ApplyFn, ApplyFn),
}

fn match_pair(ir: &IrGraph, s: NodeId, consumers: &[Vec<NodeId>]) -> Option<(NodeId, Rewrite)> {
    let OpKind::Scatter { fun, heads } = ir.node(s).kind else { return None };
    if ir.exits.contains(&s) {
        return None;
    }
    let [a] = consumers[s][..] else { return None };
    let an = ir.node(a);
    let OpKind::ApplyEdge(f) = &an.kind else { return None };
    if an.inputs != [Operand::direct(s)] {
        return None;
    }
    if distributes(f, fun) {
        return Some((a, Rewrite::Distribute(f.clone())));
    }
    if fun != ScatterFn::UConcatV {
        return None;
    }
    // a^T [x_u || x_v] = a_l^T x_u + a_r^T x_v, per head.
    match *f {
        ApplyFn::HeadDot { p, heads: h } if h == heads && p.cols % 2 == 0 => {
            let k = p.cols / 2;
            Some((
                a,
                Rewrite::SplitConcat(
                    ApplyFn::HeadDot { p: p.col_slice(0, k), heads: h },
                    ApplyFn::HeadDot { p: p.col_slice(k, k), heads: h },
                ),
            ))
        }
        // [x_u || x_v] W = x_u W_top + x_v W_bottom.
        ApplyFn::Linear(w) if heads == 1 && w.rows % 2 == 0 => {
            let c = w.rows / 2;
            Some((a, Rewrite::SplitConcat(ApplyFn::Linear(w.row_slice(0, c)), ApplyFn::Linear(w.row_slice(c, c)))))
        }
        _ => None,
    }
}

/// One sweep over the graph; returns the rewritten graph and the number of
/// pairs rewritten.
fn sweep(ir: &IrGraph) -> Result<(IrGraph, usize)> {
    let consumers = ir.consumers();
    let mut matches: HashMap<NodeId, (NodeId, Rewrite)> = HashMap::new();
    let mut absorbed: HashMap<NodeId, NodeId> = HashMap::new();
    for n in &ir.nodes {
        if let Some((a, rw)) = match_pair(ir, n.id, &consumers) {
            absorbed.insert(a, n.id);
            matches.insert(n.id, (a, rw));
        }
    }
    if matches.is_empty() {
        return Ok((ir.clone(), 0));
    }

    let mut b = IrBuilder::new(ir.phase);
    for p in &ir.params {
        b.param(p.name.clone(), p.rows, p.cols);
    }
    let mut map: Vec<Option<NodeId>> = vec![None; ir.len()];
    let get = |map: &[Option<NodeId>], id: NodeId| {
        map[id].ok_or_else(|| Error::Plan(format!("reorganize: node {id} used after rewrite")))
    };
    for n in &ir.nodes {
        if absorbed.contains_key(&n.id) {
            continue;
        }
        b.set_origin(n.origin);
        if let Some((a, rw)) = matches.get(&n.id) {
            let OpKind::Scatter { fun, heads } = n.kind else { unreachable!() };
            let an = ir.node(*a);
            let ops: Vec<NodeId> = n.inputs.iter().map(|o| get(&map, o.node)).collect::<Result<_>>()?;
            b.set_tag(an.tag.as_deref());
            let (new_ops, new_fun) = match rw {
                Rewrite::Distribute(f) => {
                    let mut done: HashMap<NodeId, NodeId> = HashMap::new();
                    let mut out = Vec::new();
                    for &x in &ops {
                        let y = match done.get(&x) {
                            Some(&y) => y,
                            None => {
                                let y = b.apply_vertex(f.clone(), &[x])?;
                                done.insert(x, y);
                                y
                            }
                        };
                        out.push(y);
                    }
                    (out, fun)
                }
                Rewrite::SplitConcat(fl, fr) => {
                    let l = b.apply_vertex(fl.clone(), &[ops[0]])?;
                    let r = b.apply_vertex(fr.clone(), &[ops[1]])?;
                    (vec![l, r], ScatterFn::UAddV)
                }
            };
            b.set_tag(n.tag.as_deref());
            let heads = if new_fun == fun { heads } else { 1 };
            let s = b.scatter(new_fun, heads, &new_ops)?;
            map[*a] = Some(s);
            continue;
        }
        b.set_tag(n.tag.as_deref());
        let id = if n.is_source() {
            b.source(n.kind.clone(), n.class, n.cols)
        } else {
            let inputs = n
                .inputs
                .iter()
                .map(|o| Ok(Operand { node: get(&map, o.node)?, access: o.access }))
                .collect::<Result<Vec<_>>>()?;
            let id = b.push(n.kind.clone(), inputs)?;
            if let Some(of) = n.broadcast_of {
                b.mark_broadcast(id, get(&map, of)?);
            }
            id
        };
        map[n.id] = Some(id);
    }
    let exits = ir.exits.iter().map(|&x| get(&map, x)).collect::<Result<_>>()?;
    Ok((b.finish(exits)?, matches.len()))
}

/// Applies the rewrite to a fixed point. Expects a lowered graph.
pub fn reorganize(ir: &IrGraph) -> Result<(IrGraph, usize)> {
    if ir.has_composites() {
        return Err(Error::Plan("reorganize expects a lowered graph".into()));
    }
    let mut cur = ir.clone();
    let mut total = 0;
    loop {
        let (next, n) = sweep(&cur)?;
        if n == 0 {
            return Ok((next, total));
        }
        total += n;
        cur = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Dir;
    use crate::ir::decompose::decompose;
    use crate::ir::models::{build, ModelKind, ModelSpec};
    use crate::ir::{Class, Phase, Reduce};
    use crate::tensor::Elementwise;

    fn kinds(ir: &IrGraph) -> Vec<String> {
        ir.nodes
            .iter()
            .filter(|n| !n.is_source())
            .map(|n| match &n.kind {
                OpKind::Scatter { fun, .. } => format!("S:{}", fun.name()),
                OpKind::Gather { reduce, .. } => format!("G:{}", reduce.name()),
                OpKind::ApplyEdge(f) => format!("AE:{}", f.name()),
                OpKind::ApplyVertex(f) => format!("AV:{}", f.name()),
                _ => "?".into(),
            })
            .collect()
    }

    #[test]
    fn sub_then_linear_is_hoisted() {
        let mut b = IrBuilder::new(Phase::Forward);
        let x = b.input("x", Class::Vertex, 3);
        let w = b.param("w", 3, 2);
        let s = b.scatter(ScatterFn::USubV, 1, &[x, x]).unwrap();
        let t = b.apply_edge(ApplyFn::Linear(w), &[Operand::direct(s)]).unwrap();
        let g = b.gather(Reduce::Max, Dir::Dst, t).unwrap();
        let ir = b.finish(vec![g]).unwrap();
        let (out, n) = reorganize(&ir).unwrap();
        assert_eq!(n, 1);
        assert_eq!(kinds(&out), ["AV:linear(p0[0:3,0:2])", "S:u_sub_v", "G:max"]);
    }

    #[test]
    fn nonlinear_after_scatter_is_untouched() {
        let mut b = IrBuilder::new(Phase::Forward);
        let x = b.input("x", Class::Vertex, 3);
        let s = b.scatter(ScatterFn::USubV, 1, &[x, x]).unwrap();
        let t = b.apply_edge(ApplyFn::Elem(Elementwise::LeakyRelu(0.2)), &[Operand::direct(s)]).unwrap();
        let ir = b.finish(vec![t]).unwrap();
        let (out, n) = reorganize(&ir).unwrap();
        assert_eq!(n, 0);
        assert_eq!(out, ir);
    }

    #[test]
    fn gat_attention_splits_into_vertex_projections() {
        let spec = ModelSpec { layers: 1, ..ModelSpec::new(ModelKind::Gat, 4, 2, 2) };
        let ir = decompose(&build(&spec, 0).unwrap().ir).unwrap();
        let (out, n) = reorganize(&ir).unwrap();
        assert_eq!(n, 1);
        let att: Vec<String> = kinds(&out)
            .into_iter()
            .zip(out.nodes.iter().filter(|n| !n.is_source()))
            .filter(|(_, n)| n.tag.as_deref() == Some("attention"))
            .map(|(k, _)| k)
            .collect();
        assert_eq!(att, ["AV:head_dot(p1[0:1,0:2],h=1)", "AV:head_dot(p1[0:1,2:4],h=1)", "S:u_add_v", "AE:leaky_relu(0.2)"]);
    }

    #[test]
    fn monet_concat_projection_splits_rows() {
        let spec = ModelSpec::new(ModelKind::MoNet, 3, 4, 2);
        let ir = decompose(&build(&spec, 0).unwrap().ir).unwrap();
        let (out, n) = reorganize(&ir).unwrap();
        assert_eq!(n, 1);
        assert!(!out.nodes.iter().any(|n| matches!(n.kind, OpKind::Scatter { fun: ScatterFn::UConcatV, .. })));
    }
}
