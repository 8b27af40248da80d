//! Command-line front end.
//!
//! `run` executes one configuration, `compare` runs several on the same graph
//! and checks that they agree, `dump-ir` prints the graph after every pass.
//! Reports are JSON; apart from `wall_ms` they are deterministic.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{evaluate, loss, train_step, ExecConfig, DEFAULT_SCRATCH_CAPACITY};
use crate::graph::{load_edge_list, Graph, Synthetic};
use crate::ir::backward::derive_backward;
use crate::ir::decompose::decompose;
use crate::ir::models::{build, prepare_inputs, Model, ModelKind, ModelSpec};
use crate::ir::{NodeId, Part};
use crate::oracle::{finite_diff_grads, interpret, max_rel_err};
use crate::passes::{compile, cost_model, reorganize, FusionPlan, Mapping, OptLevel, Pipeline};
use crate::tensor::{Precision, Tensor};

pub const REPORT_VERSION: u32 = 1;
/// Largest graph the forward oracle is run on.
pub const ORACLE_MAX_VERTICES: usize = 64;
/// Budget for the finite-difference check, in parameter scalars times `V + E`.
pub const GRAD_CHECK_BUDGET: usize = 2_000_000;

pub const FORWARD_TOL: f64 = 1e-9;
pub const GRAD_TOL: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphSource {
    File { path: PathBuf, undirected: bool },
    /// `kind:param:param[:seed]`, e.g. `erdos_renyi:100:0.05`.
    Synthetic { descriptor: String },
    /// Graph handed over by an embedding caller; only its size is echoed.
    External { vertices: usize, edges: usize },
}

impl GraphSource {
    pub fn load(&self, seed: u64) -> Result<Graph> {
        match self {
            GraphSource::File { path, undirected } => load_edge_list(path, *undirected),
            GraphSource::Synthetic { descriptor } => Synthetic::parse(descriptor, seed)?.generate(),
            GraphSource::External { .. } => Err(Error::Config("an external graph must be passed in by the caller".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub graph: GraphSource,
    pub opt: OptLevel,
    /// Forces one mapping on every region; illegal choices are plan errors.
    pub mapping: Option<Mapping>,
    pub workers: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Training steps (or forward passes without `train`).
    pub steps: usize,
    pub lr: f64,
    pub train: bool,
    pub debug: bool,
    pub scratch_capacity: usize,
}

impl RunConfig {
    pub fn new(model: ModelSpec, graph: GraphSource) -> Self {
        RunConfig {
            model,
            graph,
            opt: OptLevel::All,
            mapping: None,
            workers: 1,
            seed: 42,
            precision: Precision::F64,
            steps: 1,
            lr: 0.0,
            train: true,
            debug: false,
            scratch_capacity: DEFAULT_SCRATCH_CAPACITY,
        }
    }

    fn exec_config(&self) -> ExecConfig {
        ExecConfig {
            workers: self.workers.max(1),
            precision: self.precision,
            debug: self.debug,
            scratch_capacity: self.scratch_capacity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphSummary {
    #[serde(rename = "V")]
    pub v: usize,
    #[serde(rename = "E")]
    pub e: usize,
    pub max_in: usize,
    pub mean_in: f64,
}

impl GraphSummary {
    pub fn of(g: &Graph) -> Self {
        let s = g.degree_stats();
        GraphSummary { v: g.num_vertices(), e: g.num_edges(), max_in: s.max_in_degree, mean_in: s.mean_in_degree }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub status: Status,
    pub detail: String,
}

impl Check {
    fn new(name: &str, ok: bool, detail: String) -> Self {
        Check { name: name.into(), status: if ok { Status::Pass } else { Status::Fail }, detail }
    }

    fn skipped(name: &str, why: &str) -> Self {
        Check { name: name.into(), status: Status::Skipped, detail: why.into() }
    }

    fn tolerance(name: &str, err: f64, tol: f64) -> Self {
        Check::new(name, err < tol, format!("max relative error {err:.3e} (tolerance {tol:e})"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionSummary {
    pub id: usize,
    pub nodes: Vec<NodeId>,
    pub mapping: Mapping,
    pub expensive: bool,
    pub forced_vertex: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelSummary {
    pub node: NodeId,
    pub part: Part,
    pub label: crate::passes::Label,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanSummary {
    pub rewrites: usize,
    pub forward: Vec<RegionSummary>,
    pub backward: Vec<RegionSummary>,
    pub labels: Vec<LabelSummary>,
    pub recompute_nodes: Vec<NodeId>,
}

fn regions(plan: &FusionPlan) -> Vec<RegionSummary> {
    plan.regions
        .iter()
        .map(|r| RegionSummary {
            id: r.id,
            nodes: r.nodes.clone(),
            mapping: r.mapping,
            expensive: r.expensive,
            forced_vertex: r.forced_vertex,
        })
        .collect()
}

impl PlanSummary {
    pub fn of(p: &Pipeline) -> Self {
        let (backward, labels, recompute_nodes) = match &p.bwd {
            Some(b) => (
                regions(&b.plan),
                b.ckpt.labels.iter().map(|(&(node, part), &label)| LabelSummary { node, part, label }).collect(),
                b.ckpt.recompute_nodes.iter().copied().collect(),
            ),
            None => (Vec::new(), Vec::new(), Vec::new()),
        };
        PlanSummary { rewrites: p.rewrites, forward: regions(&p.fwd_plan), backward, labels, recompute_nodes }
    }
}

/// One executed configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub opt: OptLevel,
    /// Forced mapping, or `auto`.
    pub mapping: String,
    pub flops: u64,
    pub io_units: u64,
    pub graph_io_units: u64,
    pub peak_mem_units: u64,
    pub stash_units: u64,
    pub wall_ms: f64,
    pub tag_flops: std::collections::BTreeMap<String, u64>,
    /// Loss after each step, before the parameter update.
    pub losses: Vec<f64>,
    pub checks: Vec<Check>,
    pub plan: PlanSummary,
    #[serde(skip)]
    pub exits: Vec<Tensor>,
    #[serde(skip)]
    pub grads: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportDocument {
    pub version: u32,
    pub config: RunConfig,
    pub graph: GraphSummary,
    pub results: Vec<RunResult>,
    /// Cross-configuration agreement (compare only).
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub comparison: Vec<Check>,
}

impl ReportDocument {
    pub fn checks(&self) -> impl Iterator<Item = &Check> {
        self.results.iter().flat_map(|r| &r.checks).chain(&self.comparison)
    }

    pub fn passed(&self) -> bool {
        self.checks().all(|c| c.status != Status::Fail)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `Error::Check` naming the first failed check.
    pub fn ensure_passed(&self) -> Result<()> {
        match self.checks().find(|c| c.status == Status::Fail) {
            Some(c) => Err(Error::Check(format!("{}: {}", c.name, c.detail))),
            None => Ok(()),
        }
    }
}

fn all_finite(ts: &[Tensor]) -> bool {
    ts.iter().all(Tensor::all_finite)
}

/// Compiles and runs `cfg` on `g`, then checks the result against the cost
/// model and, on small graphs, against the reference oracle.
pub fn execute(cfg: &RunConfig, g: &Graph, model: &Model) -> Result<RunResult> {
    let p = compile(&model.ir, cfg.opt, &g.degree_stats(), cfg.mapping, cfg.train)?;
    let inputs = prepare_inputs(&p.fwd, g, cfg.seed)?;
    let ecfg = cfg.exec_config();
    let mut params = model.params.clone();
    let mut losses = Vec::new();
    let mut first: Option<(Vec<Tensor>, Vec<Tensor>)> = None;
    let mut last = None;
    for _ in 0..cfg.steps.max(1) {
        let run = if cfg.train {
            train_step(&p, g, &mut params, &inputs, cfg.lr, &ecfg)?
        } else {
            evaluate(&p, g, &params, &inputs, &ecfg)?
        };
        losses.push(loss(&run.exits));
        first.get_or_insert_with(|| (run.exits.clone(), run.grads.clone()));
        last = Some(run);
    }
    let run = last.expect("at least one step");
    let (exits, grads) = first.expect("at least one step");
    let predicted = cost_model(&p, g, ecfg.workers);

    let mut checks = Vec::new();
    let c = &run.report.counts;
    let pc = &predicted.counts;
    checks.push(Check::new(
        "measured_equals_predicted",
        c == pc,
        format!(
            "flops {}/{}, io {}/{}, peak {}/{}, stash {}/{}",
            c.flops, pc.flops, c.io_units, pc.io_units, c.peak_mem_units, pc.peak_mem_units, c.stash_units, pc.stash_units
        ),
    ));
    checks.push(Check::new("finite", all_finite(&exits) && all_finite(&grads), "exits and gradients are finite".into()));

    let small = g.num_vertices() <= ORACLE_MAX_VERTICES;
    let f64_run = cfg.precision == Precision::F64;
    let oracle_inputs = prepare_inputs(&model.ir, g, cfg.seed)?;
    if small && f64_run {
        let want = interpret(&model.ir, g, &model.params, &oracle_inputs)?;
        checks.push(Check::tolerance("oracle_forward", max_rel_err(&exits, &want), FORWARD_TOL));
    } else {
        checks.push(Check::skipped("oracle_forward", "graph too large or not f64"));
    }
    let scalars: usize = model.params.iter().map(|q| q.value.len()).sum();
    if !cfg.train {
        checks.push(Check::skipped("grad_check", "inference run"));
    } else if small && f64_run && scalars * (g.num_vertices() + g.num_edges()) <= GRAD_CHECK_BUDGET {
        let fd = finite_diff_grads(&model.ir, g, &model.params, &oracle_inputs, 1e-4)?;
        checks.push(Check::tolerance("grad_check", max_rel_err(&grads, &fd), FD_TOL));
    } else {
        checks.push(Check::skipped("grad_check", "over the finite-difference budget or not f64"));
    }

    Ok(RunResult {
        opt: cfg.opt,
        mapping: cfg.mapping.map_or("auto", Mapping::name).to_string(),
        flops: c.flops,
        io_units: c.io_units,
        graph_io_units: c.graph_io_units,
        peak_mem_units: c.peak_mem_units,
        stash_units: c.stash_units,
        wall_ms: run.report.wall_ms,
        tag_flops: c.tag_flops.clone(),
        losses,
        checks,
        plan: PlanSummary::of(&p),
        exits,
        grads,
    })
}

pub fn run_report(cfg: &RunConfig) -> Result<ReportDocument> {
    run_report_on(cfg, &cfg.graph.load(cfg.seed)?)
}

/// `run_report` on an already loaded graph; `cfg.graph` is only echoed.
pub fn run_report_on(cfg: &RunConfig, g: &Graph) -> Result<ReportDocument> {
    let model = build(&cfg.model, cfg.seed)?;
    let result = execute(cfg, g, &model)?;
    Ok(ReportDocument { version: REPORT_VERSION, config: cfg.clone(), graph: GraphSummary::of(g), results: vec![result], comparison: Vec::new() })
}

/// Runs every `(opt, mapping)` pair on one graph and model and checks that
/// exits (and gradients when training) agree with the first pair.
pub fn compare_report(base: &RunConfig, variants: &[(OptLevel, Option<Mapping>)]) -> Result<ReportDocument> {
    let g = base.graph.load(base.seed)?;
    let model = build(&base.model, base.seed)?;
    let mut results = Vec::new();
    for &(opt, mapping) in variants {
        let cfg = RunConfig { opt, mapping, ..base.clone() };
        results.push(execute(&cfg, &g, &model)?);
    }
    let mut comparison = Vec::new();
    if let Some((head, rest)) = results.split_first() {
        for r in rest {
            let name = format!("{}/{} vs {}/{}", r.opt, r.mapping, head.opt, head.mapping);
            comparison.push(Check::tolerance(&format!("exits {name}"), max_rel_err(&r.exits, &head.exits), FORWARD_TOL));
            if base.train {
                comparison.push(Check::tolerance(&format!("grads {name}"), max_rel_err(&r.grads, &head.grads), GRAD_TOL));
            }
        }
    }
    Ok(ReportDocument { version: REPORT_VERSION, config: base.clone(), graph: GraphSummary::of(&g), results, comparison })
}

fn dump_plan(out: &mut String, title: &str, plan: &FusionPlan) {
    let _ = writeln!(out, "== {title} ==");
    for r in &plan.regions {
        let _ = writeln!(
            out,
            "region {} {}{}{}: {:?}",
            r.id,
            r.mapping.name(),
            if r.expensive { " expensive" } else { "" },
            if r.forced_vertex { " forced" } else { "" },
            r.nodes
        );
    }
}

/// The graph after every pass stage, plus the final plans.
pub fn dump_ir(cfg: &RunConfig) -> Result<String> {
    let g = cfg.graph.load(cfg.seed)?;
    let model = build(&cfg.model, cfg.seed)?;
    let mut out = String::new();
    let mut stage = |title: &str, text: String| {
        let _ = writeln!(out, "== {title} ==\n{text}");
    };
    stage("model", model.ir.to_text());
    let lowered = decompose(&model.ir)?;
    stage("decomposed", lowered.to_text());
    let fwd = if cfg.opt.reorganizes() {
        let (r, n) = reorganize(&lowered)?;
        stage(&format!("reorganized ({n} rewrites)"), r.to_text());
        r
    } else {
        lowered
    };
    if cfg.train {
        stage("backward", derive_backward(&fwd)?.to_text());
    }
    let p = compile(&model.ir, cfg.opt, &g.degree_stats(), cfg.mapping, cfg.train)?;
    if let Some(b) = &p.bwd {
        if cfg.opt.recomputes() {
            stage("backward (recompute spliced)", b.ir.to_text());
        }
    }
    dump_plan(&mut out, "forward plan", &p.fwd_plan);
    if let Some(b) = &p.bwd {
        dump_plan(&mut out, "backward plan", &b.plan);
    }
    Ok(out)
}

// ── Argument parsing ─────────────────────────────────────────────────

#[derive(Debug, Parser)]
#[command(name = "gnncg", version, about = "Compile and run GNN computational graphs on CPU")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one configuration and emit a JSON report.
    Run(RunArgs),
    /// Run several opt levels / mappings and check that they agree.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated opt levels to compare.
        #[arg(long, value_delimiter = ',', default_value = "none,reorg,reorg+fusion,all")]
        opts: Vec<OptLevel>,
        /// Comma-separated mappings (`auto`, `vertex`, `edge`).
        #[arg(long, value_delimiter = ',', default_value = "auto")]
        mappings: Vec<String>,
    },
    /// Print the IR after each pass stage.
    DumpIr(RunArgs),
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    match s {
        "f64" => Ok(Precision::F64),
        "f32" => Ok(Precision::F32),
        other => Err(format!("unknown precision `{other}` (f32 or f64)")),
    }
}

fn parse_mapping(s: &str) -> Result<Option<Mapping>> {
    if s == "auto" {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long, default_value = "gcn")]
    pub model: ModelKind,
    /// Edge-list file (`src dst` per line, `#` comments).
    #[arg(long, conflicts_with = "synthetic")]
    pub graph: Option<PathBuf>,
    /// Add the reverse of every edge read from `--graph`.
    #[arg(long)]
    pub undirected: bool,
    /// Synthetic graph, e.g. `erdos_renyi:100:0.05` or `k_regular_in:32:4`.
    #[arg(long)]
    pub synthetic: Option<String>,
    #[arg(long, default_value_t = 8)]
    pub feat_dim: usize,
    /// Hidden width (defaults to the feature width).
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Output width (defaults to the feature width).
    #[arg(long)]
    pub out_dim: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub kernels: usize,
    #[arg(long, default_value = "all")]
    pub opt: OptLevel,
    /// `auto`, `vertex` or `edge`.
    #[arg(long, default_value = "auto")]
    pub mapping: String,
    #[arg(long, env = "GNNCG_THREADS", default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value = "f64", value_parser = parse_precision)]
    pub precision: Precision,
    #[arg(long, default_value_t = 1)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.0)]
    pub lr: f64,
    /// Forward only; no backward graph is built.
    #[arg(long)]
    pub inference: bool,
    /// Fail on any non-finite value.
    #[arg(long)]
    pub debug: bool,
    #[arg(long, default_value_t = DEFAULT_SCRATCH_CAPACITY)]
    pub scratch_capacity: usize,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

impl RunArgs {
    pub fn to_config(&self) -> Result<RunConfig> {
        let graph = match (&self.graph, &self.synthetic) {
            (Some(path), None) => GraphSource::File { path: path.clone(), undirected: self.undirected },
            (None, Some(d)) => GraphSource::Synthetic { descriptor: d.clone() },
            _ => return Err(Error::Config("exactly one of --graph and --synthetic is required".into())),
        };
        let mut model = ModelSpec::new(
            self.model,
            self.feat_dim,
            self.hidden.unwrap_or(self.feat_dim),
            self.out_dim.unwrap_or(self.feat_dim),
        );
        model.layers = self.layers;
        model.heads = self.heads;
        model.kernels = self.kernels;
        Ok(RunConfig {
            model,
            graph,
            opt: self.opt,
            mapping: parse_mapping(&self.mapping)?,
            workers: self.workers,
            seed: self.seed,
            precision: self.precision,
            steps: self.steps,
            lr: self.lr,
            train: !self.inference,
            debug: self.debug,
            scratch_capacity: self.scratch_capacity,
        })
    }
}

fn emit(doc: &ReportDocument, to: &Option<PathBuf>) -> Result<()> {
    let json = doc.to_json();
    match to {
        Some(path) => {
            std::fs::write(path, json + "\n")?;
            for r in &doc.results {
                let failed = r.checks.iter().filter(|c| c.status == Status::Fail).count();
                println!(
                    "{:<13} {:<16} flops={} io={} peak={} failed_checks={failed}",
                    r.opt.name(),
                    r.mapping,
                    r.flops,
                    r.io_units,
                    r.peak_mem_units
                );
            }
        }
        None => println!("{json}"),
    }
    doc.ensure_passed()
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) => emit(&run_report(&a.to_config()?)?, &a.json),
        Command::Compare { run, opts, mappings } => {
            let base = run.to_config()?;
            let mut variants = Vec::new();
            for &opt in &opts {
                for m in &mappings {
                    variants.push((opt, parse_mapping(m)?));
                }
            }
            emit(&compare_report(&base, &variants)?, &run.json)
        }
        Command::DumpIr(a) => {
            let text = dump_ir(&a.to_config()?)?;
            match &a.json {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
