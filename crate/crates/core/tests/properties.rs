//! Randomized invariants over graphs, models and configurations.

use gnncg::exec::{evaluate, run_forward, ExecConfig, Materialization};
use gnncg::graph::{k_regular_in, Dir, Graph};
use gnncg::ir::decompose::decompose;
use gnncg::ir::models::{build, prepare_inputs, ModelKind, ModelSpec};
use gnncg::ir::{backward::derive_backward, ApplyFn, Class, IrBuilder, OpKind, Phase, Reduce, ScatterFn};
use gnncg::oracle::{dense_aggregate, interpret, max_rel_err, DenseAdjacency};
use gnncg::passes::{compile, cost_model, Mapping, OptLevel};
use gnncg::tensor::{dense_matmul, Init, ParamTensor, Tensor};
use proptest::prelude::*;

const KINDS: [ModelKind; 4] = [ModelKind::Gcn, ModelKind::Gat, ModelKind::EdgeConv, ModelKind::MoNet];

fn graph(max_v: usize, max_e: usize) -> impl Strategy<Value = Graph> {
    (1..=max_v).prop_flat_map(move |v| {
        prop::collection::vec((0..v, 0..v), 0..=max_e).prop_map(move |edges| Graph::from_edges(v, &edges).unwrap())
    })
}

fn kind() -> impl Strategy<Value = ModelKind> {
    prop::sample::select(KINDS.to_vec())
}

fn spec(kind: ModelKind, width: usize, heads: usize) -> ModelSpec {
    ModelSpec { heads: if kind == ModelKind::Gat { heads } else { 1 }, ..ModelSpec::new(kind, width, width + 1, width) }
}

fn flat(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data.iter().copied()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn opt_levels_preserve_semantics(g in graph(14, 50), k in kind(), width in 1usize..5, heads in 1usize..3, seed in 0u64..1000) {
        let model = build(&spec(k, width, heads), seed).unwrap();
        let mut base: Option<(Vec<Tensor>, Vec<Tensor>)> = None;
        for opt in OptLevel::ALL {
            let p = compile(&model.ir, opt, &g.degree_stats(), None, true).unwrap();
            let inputs = prepare_inputs(&p.fwd, &g, seed).unwrap();
            let run = evaluate(&p, &g, &model.params, &inputs, &ExecConfig::with_workers(2)).unwrap();
            prop_assert_eq!(&run.report.counts, &cost_model(&p, &g, 2).counts);
            match &base {
                None => base = Some((run.exits, run.grads)),
                Some((exits, grads)) => {
                    prop_assert!(max_rel_err(&run.exits, exits) < 1e-9, "{:?} {} exits", k, opt);
                    prop_assert!(max_rel_err(&run.grads, grads) < 1e-6, "{:?} {} grads", k, opt);
                }
            }
        }
    }

    #[test]
    fn reorganization_saves_the_moved_work(g in graph(16, 80), k in kind(), width in 1usize..5, seed in 0u64..100) {
        prop_assume!(g.num_edges() >= g.num_vertices());
        let model = build(&spec(k, width, 1), seed).unwrap();
        let lowered = decompose(&model.ir).unwrap();
        let cost = lowered
            .nodes
            .iter()
            .filter_map(|n| match &n.kind {
                OpKind::ApplyEdge(f) if f.is_expensive() => {
                    let ins: Vec<usize> = n.inputs.iter().map(|o| lowered.node(o.node).cols).collect();
                    Some(f.flops_per_row(&ins, n.cols))
                }
                _ => None,
            })
            .min();
        let naive = compile(&model.ir, OptLevel::None, &g.degree_stats(), None, false).unwrap();
        let reorg = compile(&model.ir, OptLevel::Reorg, &g.degree_stats(), None, false).unwrap();
        let (a, b) = (cost_model(&naive, &g, 1).counts.flops, cost_model(&reorg, &g, 1).counts.flops);
        if reorg.rewrites == 0 {
            prop_assert_eq!(a, b);
        } else {
            let c = cost.expect("a rewrite moves an expensive edge apply");
            let bound = (g.num_edges() - g.num_vertices()) as u64 * c;
            prop_assert!(a >= b + bound, "{:?}: {} -> {} (bound {})", k, a, b, bound);
            prop_assert!(a > b || g.num_edges() == g.num_vertices());
        }
    }

    #[test]
    fn fusion_never_adds_io(g in graph(16, 60), k in kind(), width in 1usize..5, train in any::<bool>()) {
        let model = build(&spec(k, width, 2), 3).unwrap();
        let unfused = compile(&model.ir, OptLevel::Reorg, &g.degree_stats(), None, train).unwrap();
        let fused = compile(&model.ir, OptLevel::ReorgFusion, &g.degree_stats(), None, train).unwrap();
        let (a, b) = (cost_model(&unfused, &g, 1).counts.io_units, cost_model(&fused, &g, 1).counts.io_units);
        prop_assert!(b <= a, "{:?}: fused {} > unfused {}", k, b, a);
        let graph_ops = |ir: &gnncg::ir::IrGraph, nodes: &[usize]| {
            nodes.iter().filter(|&&n| matches!(ir.node(n).kind, OpKind::Scatter { .. } | OpKind::Gather { .. } | OpKind::ApplyEdge(_))).count()
        };
        let merged = fused.fwd_plan.regions.iter().any(|r| graph_ops(&fused.fwd, &r.nodes) >= 2);
        if merged && g.num_edges() > 0 {
            prop_assert!(b < a, "{:?}: fusion merged graph ops without saving IO", k);
        }
    }

    #[test]
    fn backward_reads_only_planned_tensors(g in graph(14, 50), k in kind(), width in 1usize..4) {
        let model = build(&spec(k, width, 2), 9).unwrap();
        let p = compile(&model.ir, OptLevel::All, &g.degree_stats(), None, true).unwrap();
        let b = p.bwd.as_ref().unwrap();
        for n in &b.ir.nodes {
            if let OpKind::ForwardRef { node, part } = n.kind {
                let entry = matches!(p.fwd.node(node).kind, OpKind::Input { .. });
                prop_assert!(entry || p.stored.contains(&(node, part)), "{:?}: reads unplanned {} {:?}", k, node, part);
            }
        }
        let inputs = prepare_inputs(&p.fwd, &g, 1).unwrap();
        let fwd = run_forward(&p, &g, &model.params, &inputs, &ExecConfig::default()).unwrap();
        for m in fwd.log().iter().filter(|m| m.kind == Materialization::Stash) {
            prop_assert!(p.stored.contains(&(m.node, m.part)));
        }
        // Executes without touching anything outside the plan.
        evaluate(&p, &g, &model.params, &inputs, &ExecConfig::default()).unwrap();
    }

    #[test]
    fn fused_regions_keep_edge_tensors_local(g in graph(14, 50), k in kind(), width in 1usize..4) {
        let model = build(&spec(k, width, 2), 4).unwrap();
        for opt in [OptLevel::ReorgFusion, OptLevel::All] {
            let p = compile(&model.ir, opt, &g.degree_stats(), None, true).unwrap();
            let inputs = prepare_inputs(&p.fwd, &g, 1).unwrap();
            let fwd = run_forward(&p, &g, &model.params, &inputs, &ExecConfig::default()).unwrap();
            for m in fwd.log() {
                if p.fwd.node(m.node).class != Class::Edge || m.kind == Materialization::Entry {
                    continue;
                }
                let region = &p.fwd_plan.regions[m.region.unwrap()];
                let escapes = region.outputs.contains(&m.node) || p.stored.contains(&(m.node, m.part));
                prop_assert!(escapes, "{:?} {}: internal edge tensor {} written", k, opt, m.node);
                if k == ModelKind::Gat && opt == OptLevel::All {
                    prop_assert!(false, "GAT wrote edge tensor {} under full optimization", m.node);
                }
            }
        }
    }

    #[test]
    fn gat_stash_does_not_grow_with_edges(v in 6usize..30, k in 1usize..3, width in 1usize..5, heads in 1usize..3) {
        prop_assume!(2 * k < v);
        let model = build(&spec(ModelKind::Gat, width, heads), 2).unwrap();
        let mut stash = Vec::new();
        for g in [k_regular_in(v, k, 1).unwrap(), k_regular_in(v, 2 * k, 1).unwrap()] {
            let p = compile(&model.ir, OptLevel::All, &g.degree_stats(), None, true).unwrap();
            prop_assert!(p.stored.iter().all(|&(n, _)| p.fwd.node(n).class != Class::Edge));
            stash.push(cost_model(&p, &g, 1).counts.stash_units);
        }
        prop_assert_eq!(stash[0], stash[1]);
    }

    #[test]
    fn mappings_and_worker_counts_agree(g in graph(20, 80), k in kind(), width in 1usize..4) {
        let model = build(&spec(k, width, 2), 6).unwrap();
        let auto = compile(&model.ir, OptLevel::All, &g.degree_stats(), None, true).unwrap();
        let inputs = prepare_inputs(&auto.fwd, &g, 2).unwrap();
        let base = evaluate(&auto, &g, &model.params, &inputs, &ExecConfig::default()).unwrap();
        let want = [flat(&base.exits), flat(&base.grads)].concat();
        for m in [Mapping::VertexBalanced, Mapping::EdgeBalanced] {
            let Ok(p) = compile(&model.ir, OptLevel::All, &g.degree_stats(), Some(m), true) else {
                prop_assert_eq!(m, Mapping::EdgeBalanced);
                continue;
            };
            for w in [1, 2, 4, 8] {
                let cfg = ExecConfig::with_workers(w);
                let a = evaluate(&p, &g, &model.params, &inputs, &cfg).unwrap();
                let b = evaluate(&p, &g, &model.params, &inputs, &cfg).unwrap();
                let got = [flat(&a.exits), flat(&a.grads)].concat();
                prop_assert_eq!(&got, &[flat(&b.exits), flat(&b.grads)].concat(), "not bitwise reproducible");
                for (x, y) in got.iter().zip(&want) {
                    prop_assert!((x - y).abs() <= 1e-9 * 1f64.max(x.abs()).max(y.abs()), "{:?} {:?} w={}", k, m, w);
                }
            }
        }
    }

    #[test]
    fn weighted_aggregate_matches_dense_oracle(g in graph(64, 200), cols in 1usize..5, seed in 0u64..1000, w in 1usize..5) {
        let weight = |u: usize, v: usize| 1.0 / (1.0 + u as f64 + 2.0 * v as f64);
        let mut b = IrBuilder::new(Phase::Forward);
        let x = b.input("x", Class::Vertex, cols);
        let ew = b.input("edge_weight", Class::Edge, 1);
        let out = b.aggregate(ScatterFn::CopyU, 1, &[x], Some(ApplyFn::MulHeads { heads: 1 }), &[ew], Reduce::Sum, Dir::Dst).unwrap();
        let ir = b.finish(vec![out]).unwrap();
        let h = Tensor::init_seeded(g.num_vertices(), cols, seed, Init::Uniform);
        let we = Tensor { rows: g.num_edges(), cols: 1, data: g.triples().map(|(u, _, v)| weight(u, v)).collect() };
        let want = dense_aggregate(&DenseAdjacency::from_graph(&g), &h, weight);
        let p = compile(&ir, OptLevel::All, &g.degree_stats(), None, false).unwrap();
        prop_assert_eq!(p.fwd_plan.regions.len(), 1);
        let inputs = [(x, h), (ew, we)];
        let run = evaluate(&p, &g, &[], &inputs, &ExecConfig::with_workers(w)).unwrap();
        prop_assert!(max_rel_err(&run.exits, &[want]) < 1e-9);
    }

    #[test]
    fn composites_equal_their_lowering_bitwise(g in graph(14, 50), k in kind(), width in 1usize..4, seed in 0u64..100) {
        let model = build(&spec(k, width, 2), seed).unwrap();
        let lowered = decompose(&model.ir).unwrap();
        prop_assert_eq!(&decompose(&lowered).unwrap(), &lowered);
        let a = interpret(&model.ir, &g, &model.params, &prepare_inputs(&model.ir, &g, seed).unwrap()).unwrap();
        let b = interpret(&lowered, &g, &model.params, &prepare_inputs(&lowered, &g, seed).unwrap()).unwrap();
        prop_assert_eq!(flat(&a), flat(&b));
    }

    #[test]
    fn backward_stays_in_the_basic_operator_set(k in kind(), width in 1usize..6, heads in 1usize..4, layers in 1usize..4) {
        let mut s = spec(k, width, heads);
        s.layers = layers;
        let model = build(&s, 0).unwrap();
        let bwd = derive_backward(&decompose(&model.ir).unwrap()).unwrap();
        for n in &bwd.nodes {
            let basic = matches!(
                n.kind,
                OpKind::Scatter { .. } | OpKind::Gather { .. } | OpKind::ApplyEdge(_) | OpKind::ApplyVertex(_)
                    | OpKind::Seed { .. } | OpKind::ForwardRef { .. }
            );
            prop_assert!(basic, "{:?}", n.kind);
        }
    }

    #[test]
    fn matmul_by_identity_is_exact(rows in 1usize..8, cols in 1usize..8, seed in 0u64..1000) {
        let x = Tensor::init_seeded(rows, cols, seed, Init::Uniform);
        let mut eye = Tensor::zeros(cols, cols);
        (0..cols).for_each(|i| eye.data[i * cols + i] = 1.0);
        prop_assert_eq!(dense_matmul(&x, &eye).unwrap().0, x);
    }
}

#[test]
fn parameterless_graphs_need_no_params() {
    // Sanity check for the oracle property above: a model-free graph runs with an empty parameter list.
    let g = Graph::from_edges(2, &[(0, 1)]).unwrap();
    let mut b = IrBuilder::new(Phase::Forward);
    let x = b.input("x", Class::Vertex, 1);
    let out = b.aggregate(ScatterFn::CopyU, 1, &[x], None, &[], Reduce::Sum, Dir::Dst).unwrap();
    let ir = b.finish(vec![out]).unwrap();
    let p = compile(&ir, OptLevel::All, &g.degree_stats(), None, false).unwrap();
    let params: [ParamTensor; 0] = [];
    let run = evaluate(&p, &g, &params, &[(x, Tensor::from_rows(&[&[2.0], &[5.0]]))], &ExecConfig::default()).unwrap();
    assert_eq!(run.exits[0].data, vec![0.0, 2.0]);
}
