//! Brute-force reference semantics for tests.
//!
//! Graph operators are evaluated whole-tensor by scanning the edge list, with
//! no fusion, no worker split and no shared code with the executor's region
//! kernels. Composite operators are interpreted directly rather than lowered.
//! Only the per-row Apply kernels are shared, since they are graph-irrelevant.

use crate::error::{Error, Result};
use crate::graph::{Dir, Graph};
use crate::ir::{Access, IrGraph, NodeId, OpKind, Operand, Reduce, RowCtx, RsKind, ScatterFn};
use crate::tensor::{ParamTensor, Tensor};

/// `A[u][v]` = number of edges `u -> v`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseAdjacency {
    pub n: usize,
    pub a: Vec<f64>,
}

impl DenseAdjacency {
    pub fn from_graph(g: &Graph) -> Self {
        let n = g.num_vertices();
        let mut a = vec![0.0; n * n];
        for e in 0..g.num_edges() {
            a[g.src(e) * n + g.dst(e)] += 1.0;
        }
        DenseAdjacency { n, a }
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.a[u * self.n + v]
    }

    pub fn total(&self) -> f64 {
        self.a.iter().sum()
    }
}

/// `H'[v] = sum_u A[u][v] * w(u, v) * H[u]` by triple loop.
pub fn dense_aggregate(a: &DenseAdjacency, h: &Tensor, w: impl Fn(usize, usize) -> f64) -> Tensor {
    let mut out = Tensor::zeros(a.n, h.cols);
    for v in 0..a.n {
        for u in 0..a.n {
            let c = a.get(u, v);
            if c == 0.0 {
                continue;
            }
            let s = c * w(u, v);
            for j in 0..h.cols {
                out.data[v * h.cols + j] += s * h.data[u * h.cols + j];
            }
        }
    }
    out
}

fn row<'a>(t: &'a Tensor, g: &Graph, e: usize, a: Access) -> &'a [f64] {
    match a {
        Access::Src => t.row(g.src(e)),
        Access::Dst => t.row(g.dst(e)),
        Access::Direct => t.row(e),
    }
}

fn scatter(fun: ScatterFn, heads: usize, ins: &[(&Tensor, Access)], g: &Graph) -> Tensor {
    let c = ins[0].0.cols;
    let cols = if fun == ScatterFn::UConcatV { 2 * c } else { c };
    let mut out = Tensor::zeros(g.num_edges(), cols);
    for e in 0..g.num_edges() {
        let x: Vec<&[f64]> = ins.iter().map(|(t, a)| row(t, g, e, *a)).collect();
        let o = out.row_mut(e);
        match fun {
            ScatterFn::CopyU | ScatterFn::CopyV => o.copy_from_slice(x[0]),
            ScatterFn::UAddV => (0..c).for_each(|j| o[j] = x[0][j] + x[1][j]),
            ScatterFn::USubV => (0..c).for_each(|j| o[j] = x[0][j] - x[1][j]),
            ScatterFn::UMulEV => (0..c).for_each(|j| o[j] = x[0][j] * x[1][j] * x[2][j]),
            ScatterFn::UConcatV => {
                let k = c / heads;
                for h in 0..heads {
                    for j in 0..k {
                        o[2 * h * k + j] = x[0][h * k + j];
                        o[2 * h * k + k + j] = x[1][h * k + j];
                    }
                }
            }
        }
    }
    out
}

/// Edge ids grouped by their `dir` endpoint, in edge order.
fn groups(g: &Graph, dir: Dir) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); g.num_vertices()];
    for e in 0..g.num_edges() {
        out[g.endpoint(e, dir)].push(e);
    }
    out
}

fn gather(reduce: Reduce, dir: Dir, m: &Tensor, g: &Graph) -> Tensor {
    let mut out = Tensor::zeros(g.num_vertices(), m.cols);
    for (v, group) in groups(g, dir).iter().enumerate() {
        for j in 0..m.cols {
            let vals = group.iter().map(|&e| m.data[e * m.cols + j]);
            out.data[v * m.cols + j] = match reduce {
                Reduce::Sum => vals.sum(),
                Reduce::Max => vals.fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.max(x)))).unwrap_or(0.0),
            };
        }
    }
    out
}

fn apply(f: &crate::ir::ApplyFn, params: &[ParamTensor], ins: &[(&Tensor, Access)], rows: usize, cols: usize, g: &Graph) -> Tensor {
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let x: Vec<&[f64]> = ins.iter().map(|(t, a)| row(t, g, r, *a)).collect();
        f.eval_row(params, &x, &RowCtx { graph: g, row: r }, out.row_mut(r));
    }
    out
}

/// Evaluates a forward graph (composites allowed) and returns its exits.
pub fn interpret(ir: &IrGraph, g: &Graph, params: &[ParamTensor], inputs: &[(NodeId, Tensor)]) -> Result<Vec<Tensor>> {
    let mut vals: Vec<Option<Tensor>> = vec![None; ir.len()];
    for n in &ir.nodes {
        let get = |o: &Operand| vals[o.node].as_ref().map(|t| (t, o.access)).expect("topological order");
        let ins: Vec<(&Tensor, Access)> = n.inputs.iter().map(get).collect();
        let rows = ir.rows(n.id, g);
        let t = match &n.kind {
            OpKind::Input { name } => inputs
                .iter()
                .find(|(id, _)| *id == n.id)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Config(format!("missing input `{name}`")))?,
            OpKind::Scatter { fun, heads } => scatter(*fun, *heads, &ins, g),
            OpKind::Gather { reduce, dir } => gather(*reduce, *dir, ins[0].0, g),
            OpKind::ApplyEdge(f) | OpKind::ApplyVertex(f) => apply(f, params, &ins, rows, n.cols, g),
            OpKind::Aggregate { fun, heads, edge_fn, reduce, dir } => {
                let k = fun.accesses().len();
                let s = scatter(*fun, *heads, &ins[..k], g);
                let m = match edge_fn {
                    Some(f) => {
                        let mut all = vec![(&s, Access::Direct)];
                        all.extend_from_slice(&ins[k..]);
                        let cols = f.out_cols(&all.iter().map(|(t, _)| t.cols).collect::<Vec<_>>())?;
                        apply(f, params, &all, g.num_edges(), cols, g)
                    }
                    None => s,
                };
                gather(*reduce, *dir, &m, g)
            }
            OpKind::ReduceScatter { kind, dir } => {
                let m = ins[0].0;
                let side = match dir {
                    Dir::Src => Access::Src,
                    Dir::Dst => Access::Dst,
                };
                match kind {
                    RsKind::EdgeSoftmax => {
                        let c = m.cols;
                        let mut out = Tensor::zeros(g.num_edges(), c);
                        for group in groups(g, *dir) {
                            for j in 0..c {
                                let mx = group.iter().map(|&f| m.data[f * c + j]).fold(f64::NEG_INFINITY, f64::max);
                                let den: f64 = group.iter().map(|&f| (m.data[f * c + j] - mx).exp()).sum();
                                for &e in &group {
                                    out.data[e * c + j] = (m.data[e * c + j] - mx).exp() / den;
                                }
                            }
                        }
                        out
                    }
                    RsKind::Generic { reduce, edge_fn } => {
                        let r = gather(*reduce, *dir, m, g);
                        apply(edge_fn, params, &[(m, Access::Direct), (&r, side)], g.num_edges(), n.cols, g)
                    }
                }
            }
            OpKind::Seed { .. } | OpKind::ForwardRef { .. } => {
                return Err(Error::Unsupported("the oracle interprets forward graphs only".into()));
            }
        };
        if (t.rows, t.cols) != (rows, n.cols) {
            return Err(Error::Shape(format!("oracle: node {} is {}x{}, expected {rows}x{}", n.id, t.rows, t.cols, n.cols)));
        }
        vals[n.id] = Some(t);
    }
    Ok(ir.exits.iter().map(|&x| vals[x].clone().expect("exit evaluated")).collect())
}

/// Loss used by gradient checks: sum of every exit entry.
pub fn loss(ir: &IrGraph, g: &Graph, params: &[ParamTensor], inputs: &[(NodeId, Tensor)]) -> Result<f64> {
    Ok(interpret(ir, g, params, inputs)?.iter().map(Tensor::sum).sum())
}

/// Central differences of the sum-of-exits loss for every parameter scalar.
pub fn finite_diff_grads(ir: &IrGraph, g: &Graph, params: &[ParamTensor], inputs: &[(NodeId, Tensor)], step: f64) -> Result<Vec<Tensor>> {
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].value.rows, params[p].value.cols);
        for i in 0..grad.len() {
            let orig = work[p].value.data[i];
            work[p].value.data[i] = orig + step;
            let up = loss(ir, g, &work, inputs)?;
            work[p].value.data[i] = orig - step;
            let down = loss(ir, g, &work, inputs)?;
            work[p].value.data[i] = orig;
            grad.data[i] = (up - down) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Relative error with a `max(1, |a|, |b|)` denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Largest relative error over two equally shaped tensor lists.
pub fn max_rel_err(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data.iter().zip(&y.data).map(|(p, q)| rel_err(*p, *q)))
        .fold(0.0, f64::max)
}
