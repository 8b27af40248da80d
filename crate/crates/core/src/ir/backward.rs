//! Reverse-mode derivation over a lowered forward graph.
//!
//! The backward graph uses only Scatter, Gather, ApplyEdge and ApplyVertex.
//! Forward tensors enter through `ForwardRef` sources; the set of those
//! references is the graph's `stash`: every forward tensor that must either be
//! kept from the forward pass or recomputed before backward runs.

use std::collections::{BTreeSet, HashMap};

use super::{
    Access, Act, ApplyFn, Class, IrBuilder, IrGraph, NodeId, OpKind, Operand, Part, Phase, Reduce, ScatterFn,
};
use crate::error::{Error, Result};
use crate::graph::Dir;
use crate::tensor::Elementwise;

struct Deriver<'a> {
    fwd: &'a IrGraph,
    b: IrBuilder,
    frefs: HashMap<(NodeId, Part), NodeId>,
    contribs: Vec<Vec<NodeId>>,
    stash: BTreeSet<(NodeId, Part)>,
    param_grads: Vec<NodeId>,
}

fn elem(e: Elementwise) -> ApplyFn {
    ApplyFn::Elem(e)
}

impl<'a> Deriver<'a> {
    /// Backward view of a forward tensor. Broadcasts of a reduction result
    /// are re-emitted from the (vertex-sized) reduction output, so the edge
    /// copy is never stashed.
    fn fref(&mut self, node: NodeId, part: Part) -> Result<NodeId> {
        if let Some(&id) = self.frefs.get(&(node, part)) {
            return Ok(id);
        }
        let n = &self.fwd.nodes[node];
        let id = match (n.broadcast_of, &n.kind, part) {
            (Some(of), OpKind::Scatter { fun, heads }, Part::Value) => {
                let (fun, heads) = (*fun, *heads);
                let src = self.fref(of, Part::Value)?;
                self.b.set_tag(n.tag.as_deref());
                self.b.set_origin(n.origin);
                self.b.scatter(fun, heads, &[src])?
            }
            _ => {
                self.stash.insert((node, part));
                let class = if part == Part::Argmax { Class::Vertex } else { n.class };
                self.b.set_tag(n.tag.as_deref());
                self.b.set_origin(None);
                self.b.source(OpKind::ForwardRef { node, part }, class, n.cols)
            }
        };
        self.frefs.insert((node, part), id);
        Ok(id)
    }

    fn fop(&mut self, op: Operand) -> Result<Operand> {
        Ok(Operand { node: self.fref(op.node, Part::Value)?, access: op.access })
    }

    fn contribute(&mut self, node: NodeId, g: NodeId) {
        self.contribs[node].push(g);
    }

    /// Routes an edge-level gradient to an operand read through `access`.
    fn contribute_via(&mut self, op: Operand, g: NodeId) -> Result<()> {
        let g = match op.access.side() {
            Some(side) => self.b.gather(Reduce::Sum, side, g)?,
            None => g,
        };
        self.contribute(op.node, g);
        Ok(())
    }

    /// Sum of all gradient contributions to `node`.
    fn total(&mut self, node: NodeId) -> Result<Option<NodeId>> {
        let parts = std::mem::take(&mut self.contribs[node]);
        let mut it = parts.into_iter();
        let Some(mut acc) = it.next() else { return Ok(None) };
        let class = self.b.ir().node(acc).class;
        for g in it {
            acc = self.b.apply_like(class, elem(Elementwise::Add), &[acc, g])?;
        }
        Ok(Some(acc))
    }

    fn apply(&mut self, domain: Class, f: ApplyFn, ins: &[Operand]) -> Result<NodeId> {
        match domain {
            Class::Edge => self.b.apply_edge(f, ins),
            _ => self.b.push(OpKind::ApplyVertex(f), ins.to_vec()),
        }
    }

    fn param_grad(&mut self, domain: Class, f: ApplyFn, ins: &[Operand]) -> Result<()> {
        let id = self.apply(domain, f, ins)?;
        self.param_grads.push(id);
        Ok(())
    }

    fn scatter_rule(&mut self, fun: ScatterFn, heads: usize, inputs: &[Operand], g: NodeId, needs: &[bool]) -> Result<()> {
        let gd = Operand::direct(g);
        match fun {
            ScatterFn::CopyU | ScatterFn::CopyV => {
                if needs[inputs[0].node] {
                    self.contribute_via(inputs[0], g)?;
                }
            }
            ScatterFn::UAddV => {
                for &op in inputs {
                    if needs[op.node] {
                        self.contribute_via(op, g)?;
                    }
                }
            }
            ScatterFn::USubV => {
                if needs[inputs[0].node] {
                    self.contribute_via(inputs[0], g)?;
                }
                if needs[inputs[1].node] {
                    let side = inputs[1].access.side().expect("vertex operand");
                    let s = self.b.gather(Reduce::Sum, side, g)?;
                    let neg = self.b.apply_vertex(ApplyFn::Scale(-1.0), &[s])?;
                    self.contribute(inputs[1].node, neg);
                }
            }
            ScatterFn::UConcatV => {
                for (part, &op) in inputs.iter().enumerate() {
                    if needs[op.node] {
                        let half = self.b.apply_edge(ApplyFn::ConcatPart { heads, part }, &[gd])?;
                        self.contribute_via(op, half)?;
                    }
                }
            }
            ScatterFn::UMulEV => {
                let f: Vec<Operand> = inputs.iter().map(|&o| self.fop(o)).collect::<Result<_>>()?;
                for i in 0..3 {
                    if !needs[inputs[i].node] {
                        continue;
                    }
                    let (j, k) = ((i + 1) % 3, (i + 2) % 3);
                    let t = self.b.apply_edge(elem(Elementwise::Mul), &[gd, f[j]])?;
                    let t = self.b.apply_edge(elem(Elementwise::Mul), &[Operand::direct(t), f[k]])?;
                    self.contribute_via(inputs[i], t)?;
                }
            }
        }
        Ok(())
    }

    fn gather_rule(&mut self, node: NodeId, reduce: Reduce, dir: Dir, input: Operand, g: NodeId) -> Result<()> {
        let back = self.b.scatter(ScatterFn::copy_of(dir), 1, &[g])?;
        let t = match reduce {
            Reduce::Sum => back,
            Reduce::Max => {
                let am = self.fref(node, Part::Argmax)?;
                self.b.apply_edge(
                    ApplyFn::SelectArgmax,
                    &[Operand::direct(back), Operand { node: am, access: Access::of_side(dir) }],
                )?
            }
        };
        self.contribute(input.node, t);
        Ok(())
    }

    fn apply_rule(&mut self, node: NodeId, domain: Class, f: &ApplyFn, inputs: &[Operand], g: NodeId, needs: &[bool]) -> Result<()> {
        let gd = Operand::direct(g);
        let need = |i: usize| needs[inputs[i].node];
        let mut grads: Vec<Option<NodeId>> = vec![None; inputs.len()];
        match f {
            ApplyFn::Elem(e) => match e {
                Elementwise::Copy => grads[0] = Some(g),
                Elementwise::Relu | Elementwise::LeakyRelu(_) => {
                    if need(0) {
                        let act = match e {
                            Elementwise::Relu => Act::Relu,
                            Elementwise::LeakyRelu(a) => Act::LeakyRelu(*a),
                            _ => unreachable!(),
                        };
                        let x = self.fop(inputs[0])?;
                        grads[0] = Some(self.apply(domain, ApplyFn::GradIn(act), &[gd, x])?);
                    }
                }
                Elementwise::Sigmoid | Elementwise::Exp => {
                    if need(0) {
                        let y = Operand::direct(self.fref(node, Part::Value)?);
                        let f = match e {
                            Elementwise::Sigmoid => ApplyFn::GradOut(Act::Sigmoid),
                            _ => elem(Elementwise::Mul),
                        };
                        grads[0] = Some(self.apply(domain, f, &[gd, y])?);
                    }
                }
                Elementwise::Add => {
                    grads[0] = Some(g);
                    grads[1] = Some(g);
                }
                Elementwise::Sub => {
                    grads[0] = Some(g);
                    if need(1) {
                        grads[1] = Some(self.apply(domain, ApplyFn::Scale(-1.0), &[gd])?);
                    }
                }
                Elementwise::Mul => {
                    for i in 0..2 {
                        if need(i) {
                            let other = self.fop(inputs[1 - i])?;
                            grads[i] = Some(self.apply(domain, elem(Elementwise::Mul), &[gd, other])?);
                        }
                    }
                }
                Elementwise::Div => {
                    let b = self.fop(inputs[1])?;
                    if need(0) {
                        grads[0] = Some(self.apply(domain, elem(Elementwise::Div), &[gd, b])?);
                    }
                    if need(1) {
                        let y = Operand::direct(self.fref(node, Part::Value)?);
                        grads[1] = Some(self.apply(domain, ApplyFn::DivGradDenom, &[gd, y, b])?);
                    }
                }
            },
            ApplyFn::Scale(_) | ApplyFn::ScaleInvDegree(_) => {
                grads[0] = Some(self.apply(domain, f.clone(), &[gd])?);
            }
            ApplyFn::MulHeads { heads } => {
                if need(0) {
                    let b = self.fop(inputs[1])?;
                    grads[0] = Some(self.apply(domain, ApplyFn::MulHeads { heads: *heads }, &[gd, b])?);
                }
                if need(1) {
                    let a = self.fop(inputs[0])?;
                    grads[1] = Some(self.apply(domain, ApplyFn::HeadSum { heads: *heads }, &[gd, a])?);
                }
            }
            ApplyFn::Linear(w) => {
                let x = self.fop(inputs[0])?;
                self.param_grad(domain, ApplyFn::LinearWGrad(*w), &[x, gd])?;
                if need(0) {
                    grads[0] = Some(self.apply(domain, ApplyFn::LinearT(*w), &[gd])?);
                }
            }
            ApplyFn::HeadDot { p, heads } => {
                let x = self.fop(inputs[0])?;
                self.param_grad(domain, ApplyFn::HeadDotPGrad { p: *p, heads: *heads }, &[x, gd])?;
                if need(0) {
                    grads[0] = Some(self.apply(domain, ApplyFn::HeadDotT { p: *p, heads: *heads }, &[gd])?);
                }
            }
            ApplyFn::BiasAct { bias, act } => {
                let delta = match act {
                    Some(a) => {
                        let y = Operand::direct(self.fref(node, Part::Value)?);
                        self.apply(domain, ApplyFn::GradOut(*a), &[gd, y])?
                    }
                    None => g,
                };
                self.param_grad(domain, ApplyFn::BiasGrad(*bias), &[Operand::direct(delta)])?;
                grads[0] = Some(delta);
            }
            ApplyFn::Gaussian { mu, inv_sigma } => {
                let x = self.fop(inputs[0])?;
                let w = Operand::direct(self.fref(node, Part::Value)?);
                let (mu, inv_sigma) = (*mu, *inv_sigma);
                self.param_grad(domain, ApplyFn::GaussianMuGrad { mu, inv_sigma }, &[gd, x, w])?;
                self.param_grad(domain, ApplyFn::GaussianSigmaGrad { mu, inv_sigma }, &[gd, x, w])?;
                if need(0) {
                    grads[0] = Some(self.apply(domain, ApplyFn::GaussianGradInput { mu, inv_sigma }, &[gd, x, w])?);
                }
            }
            ApplyFn::KernelMix { kernels } => {
                if need(0) {
                    let w = self.fop(inputs[1])?;
                    grads[0] = Some(self.apply(domain, ApplyFn::KernelMixGradS { kernels: *kernels }, &[gd, w])?);
                }
                if need(1) {
                    let s = self.fop(inputs[0])?;
                    grads[1] = Some(self.apply(domain, ApplyFn::KernelMixGradW { kernels: *kernels }, &[gd, s])?);
                }
            }
            other => {
                return Err(Error::Unsupported(format!("no derivative rule for {}", other.name())));
            }
        }
        for (i, gi) in grads.into_iter().enumerate() {
            if let Some(gi) = gi {
                if need(i) {
                    self.contribute_via(inputs[i], gi)?;
                }
            }
        }
        Ok(())
    }
}

/// Derives the backward graph of a lowered forward graph whose loss is the
/// sum of all exit entries. Its exits are the parameter-gradient nodes.
pub fn derive_backward(fwd: &IrGraph) -> Result<IrGraph> {
    if fwd.has_composites() {
        return Err(Error::Unsupported("backward derivation needs a lowered graph".into()));
    }
    if fwd.phase != Phase::Forward {
        return Err(Error::Unsupported("backward of a backward graph".into()));
    }
    // A node needs a gradient when some parameter influences it.
    let mut needs = vec![false; fwd.len()];
    for n in &fwd.nodes {
        let own = n.kind.apply_fn().is_some_and(|f| !f.params().is_empty());
        needs[n.id] = own || n.inputs.iter().any(|o| needs[o.node]);
    }

    let mut b = IrBuilder::new(Phase::Backward);
    for p in &fwd.params {
        b.param(p.name.clone(), p.rows, p.cols);
    }
    let mut d = Deriver {
        fwd,
        b,
        frefs: HashMap::new(),
        contribs: vec![Vec::new(); fwd.len()],
        stash: BTreeSet::new(),
        param_grads: Vec::new(),
    };
    for &x in &fwd.exits {
        if needs[x] {
            let n = &fwd.nodes[x];
            let seed = d.b.source(OpKind::Seed { exit: x }, n.class, n.cols);
            d.contribute(x, seed);
        }
    }
    for n in fwd.nodes.iter().rev() {
        if !needs[n.id] {
            continue;
        }
        let Some(g) = d.total(n.id)? else { continue };
        d.b.set_tag(n.tag.as_deref());
        d.b.set_origin(n.origin);
        match &n.kind {
            OpKind::Scatter { fun, heads } => d.scatter_rule(*fun, *heads, &n.inputs, g, &needs)?,
            OpKind::Gather { reduce, dir } => d.gather_rule(n.id, *reduce, *dir, n.inputs[0], g)?,
            OpKind::ApplyEdge(f) => d.apply_rule(n.id, Class::Edge, f, &n.inputs, g, &needs)?,
            OpKind::ApplyVertex(f) => d.apply_rule(n.id, Class::Vertex, f, &n.inputs, g, &needs)?,
            OpKind::Input { .. } => {}
            other => return Err(Error::Unsupported(format!("no derivative rule for {other:?}"))),
        }
    }
    let exits = d.param_grads.clone();
    let stash = d.stash;
    let mut out = d.b.finish(exits)?;
    out.stash = stash;
    Ok(out)
}
