use std::fmt::Write;

use super::{Access, IrGraph, OpKind, Part, RsKind};

fn operand(op: &super::Operand) -> String {
    match op.access {
        Access::Direct => format!("%{}", op.node),
        Access::Src => format!("%{}@src", op.node),
        Access::Dst => format!("%{}@dst", op.node),
    }
}

pub(super) fn render(ir: &IrGraph) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {:?} graph, {} nodes", ir.phase, ir.len());
    for (i, p) in ir.params.iter().enumerate() {
        let _ = writeln!(s, "param p{i} {} [{}x{}]", p.name, p.rows, p.cols);
    }
    for n in &ir.nodes {
        let head = match &n.kind {
            OpKind::Input { name } => format!("Input[{name}]"),
            OpKind::Seed { exit } => format!("Seed[exit %{exit}]"),
            OpKind::ForwardRef { node, part } => match part {
                Part::Value => format!("ForwardRef[%{node}]"),
                Part::Argmax => format!("ForwardRef[argmax %{node}]"),
            },
            OpKind::Scatter { fun, heads } if *heads > 1 => format!("Scatter[{},h={heads}]", fun.name()),
            OpKind::Scatter { fun, .. } => format!("Scatter[{}]", fun.name()),
            OpKind::Gather { reduce, dir } => format!("Gather[{},{dir:?}]", reduce.name()),
            OpKind::ApplyEdge(f) => format!("ApplyEdge[{}]", f.name()),
            OpKind::ApplyVertex(f) => format!("ApplyVertex[{}]", f.name()),
            OpKind::Aggregate { fun, edge_fn, reduce, .. } => format!(
                "Aggregate[{},{},{}]",
                fun.name(),
                edge_fn.as_ref().map_or_else(|| "-".to_string(), |f| f.name()),
                reduce.name()
            ),
            OpKind::ReduceScatter { kind: RsKind::EdgeSoftmax, dir } => format!("ReduceScatter[edge_softmax,{dir:?}]"),
            OpKind::ReduceScatter { kind: RsKind::Generic { reduce, edge_fn }, dir } => {
                format!("ReduceScatter[{},{},{dir:?}]", reduce.name(), edge_fn.name())
            }
        };
        let args: Vec<String> = n.inputs.iter().map(operand).collect();
        let _ = write!(s, "%{}: {head} ({}) -> {:?}x{}", n.id, args.join(", "), n.class, n.cols);
        if let Some(t) = &n.tag {
            let _ = write!(s, " #{t}");
        }
        if let Some(o) = n.origin {
            let _ = write!(s, " @g{o}");
        }
        s.push('\n');
    }
    let exits: Vec<String> = ir.exits.iter().map(|x| format!("%{x}")).collect();
    let _ = writeln!(s, "exits {}", exits.join(", "));
    s
}
