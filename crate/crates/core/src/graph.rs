//! Immutable directed graph with dual indexing.
//!
//! Edges are `(u, e, v)` triples pointing from `u` to `v`. The graph keeps two
//! compressed indexes over the same edge set: one grouped by destination
//! (in-edge groups, what `Gather` reduces over) and one grouped by source
//! (out-edge groups, used by backward gathers). Rows in both indexes are
//! sorted by edge id so every traversal is deterministic.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

pub type VertexId = usize;
pub type EdgeId = usize;

/// Which endpoint a per-vertex group is keyed by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Dir {
    /// Group edges by destination vertex (in-edges).
    Dst,
    /// Group edges by source vertex (out-edges).
    Src,
}

/// One compressed index: `offsets[v]..offsets[v + 1]` selects the group of `v`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Csr {
    pub offsets: Vec<usize>,
    /// `(other endpoint, edge id)` pairs.
    pub entries: Vec<(VertexId, EdgeId)>,
}

impl Csr {
    pub fn row(&self, v: VertexId) -> &[(VertexId, EdgeId)] {
        &self.entries[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: VertexId) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    num_vertices: usize,
    src: Vec<VertexId>,
    dst: Vec<VertexId>,
    csr_dst: Csr,
    csc_src: Csr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DegreeStats {
    pub max_in_degree: usize,
    pub mean_in_degree: f64,
    pub max_out_degree: usize,
}

fn build_index(num_vertices: usize, key: &[VertexId], other: &[VertexId]) -> Csr {
    let mut offsets = vec![0usize; num_vertices + 1];
    for &k in key {
        offsets[k + 1] += 1;
    }
    for i in 0..num_vertices {
        offsets[i + 1] += offsets[i];
    }
    let mut cursor = offsets.clone();
    let mut entries = vec![(0, 0); key.len()];
    // Edge ids are visited in increasing order, so every row ends up sorted.
    for (e, (&k, &o)) in key.iter().zip(other).enumerate() {
        entries[cursor[k]] = (o, e);
        cursor[k] += 1;
    }
    Csr { offsets, entries }
}

impl Graph {
    /// Builds a graph from `(src, dst)` pairs; edge ids follow input order.
    pub fn from_edges(num_vertices: usize, edges: &[(VertexId, VertexId)]) -> Result<Self> {
        for (i, &(u, v)) in edges.iter().enumerate() {
            if u >= num_vertices || v >= num_vertices {
                return Err(Error::Config(format!(
                    "edge {i} ({u} -> {v}) out of range for {num_vertices} vertices"
                )));
            }
        }
        let src: Vec<_> = edges.iter().map(|e| e.0).collect();
        let dst: Vec<_> = edges.iter().map(|e| e.1).collect();
        let csr_dst = build_index(num_vertices, &dst, &src);
        let csc_src = build_index(num_vertices, &src, &dst);
        Ok(Self { num_vertices, src, dst, csr_dst, csc_src })
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn src(&self, e: EdgeId) -> VertexId {
        self.src[e]
    }

    pub fn dst(&self, e: EdgeId) -> VertexId {
        self.dst[e]
    }

    /// Endpoint of `e` on the given side.
    pub fn endpoint(&self, e: EdgeId, side: Dir) -> VertexId {
        match side {
            Dir::Dst => self.dst[e],
            Dir::Src => self.src[e],
        }
    }

    pub fn csr_dst(&self) -> &Csr {
        &self.csr_dst
    }

    pub fn csc_src(&self) -> &Csr {
        &self.csc_src
    }

    pub fn index(&self, dir: Dir) -> &Csr {
        match dir {
            Dir::Dst => &self.csr_dst,
            Dir::Src => &self.csc_src,
        }
    }

    pub fn in_degree(&self, v: VertexId) -> usize {
        self.csr_dst.degree(v)
    }

    pub fn out_degree(&self, v: VertexId) -> usize {
        self.csc_src.degree(v)
    }

    /// All `(u, e, v)` triples in edge-id order.
    pub fn triples(&self) -> impl Iterator<Item = (VertexId, EdgeId, VertexId)> + '_ {
        (0..self.num_edges()).map(move |e| (self.src[e], e, self.dst[e]))
    }

    pub fn degree_stats(&self) -> DegreeStats {
        let n = self.num_vertices;
        let max_in_degree = (0..n).map(|v| self.in_degree(v)).max().unwrap_or(0);
        let max_out_degree = (0..n).map(|v| self.out_degree(v)).max().unwrap_or(0);
        let mean_in_degree = if n == 0 { 0.0 } else { self.num_edges() as f64 / n as f64 };
        DegreeStats { max_in_degree, mean_in_degree, max_out_degree }
    }
}

// ── Loaders ──────────────────────────────────────────────────────────

fn parse_id(tok: &str, line: usize) -> Result<i64> {
    tok.parse::<i64>()
        .map_err(|_| Error::Parse { line, msg: format!("invalid vertex id {tok:?}") })
}

/// Parses the plain edge-list or MatrixMarket coordinate-pattern format.
///
/// With `undirected`, every input pair becomes two directed edges `u -> v`
/// and `v -> u` (consecutive edge ids).
pub fn parse_edge_list(text: &str, undirected: bool) -> Result<Graph> {
    let first = text.lines().find(|l| !l.trim().is_empty());
    if first.is_some_and(|l| l.trim_start().starts_with("%%MatrixMarket")) {
        return parse_matrix_market(text, undirected);
    }
    let mut header_vertices: Option<usize> = None;
    let mut pairs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            let mut toks = comment.split_whitespace();
            if toks.next() == Some("vertices") {
                let n = toks
                    .next()
                    .ok_or_else(|| Error::Parse { line, msg: "missing vertex count".into() })?;
                let n = parse_id(n, line)?;
                if n < 0 {
                    return Err(Error::Parse { line, msg: "negative vertex count".into() });
                }
                header_vertices = Some(n as usize);
            }
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(Error::Parse { line, msg: format!("expected \"src dst\", got {trimmed:?}") });
        }
        let u = parse_id(toks[0], line)?;
        let v = parse_id(toks[1], line)?;
        if u < 0 || v < 0 {
            return Err(Error::Parse { line, msg: "negative vertex id".into() });
        }
        pairs.push((u as usize, v as usize));
    }
    finish(pairs, header_vertices, undirected)
}

fn parse_matrix_market(text: &str, undirected: bool) -> Result<Graph> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().expect("caller checked header");
    let lower = header.to_ascii_lowercase();
    if !(lower.contains("coordinate") && lower.contains("pattern")) {
        return Err(Error::Parse {
            line: 1,
            msg: "only \"matrix coordinate pattern\" MatrixMarket files are supported".into(),
        });
    }
    let mut size: Option<(usize, usize)> = None;
    let mut pairs = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.starts_with('%') {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if size.is_none() {
            if toks.len() != 3 {
                return Err(Error::Parse { line, msg: "expected \"rows cols nnz\"".into() });
            }
            let r = parse_id(toks[0], line)?;
            let c = parse_id(toks[1], line)?;
            if r < 0 || c < 0 {
                return Err(Error::Parse { line, msg: "negative dimension".into() });
            }
            size = Some((r as usize, c as usize));
            continue;
        }
        if toks.len() != 2 {
            return Err(Error::Parse { line, msg: format!("expected \"i j\", got {trimmed:?}") });
        }
        let i = parse_id(toks[0], line)?;
        let j = parse_id(toks[1], line)?;
        if i < 1 || j < 1 {
            return Err(Error::Parse { line, msg: "MatrixMarket indices are 1-based".into() });
        }
        pairs.push(((i - 1) as usize, (j - 1) as usize));
    }
    let n = size.map(|(r, c)| r.max(c));
    finish(pairs, n, undirected)
}

fn finish(pairs: Vec<(usize, usize)>, explicit: Option<usize>, undirected: bool) -> Result<Graph> {
    let inferred = pairs.iter().map(|&(u, v)| u.max(v) + 1).max().unwrap_or(0);
    let n = explicit.map_or(inferred, |n| n.max(inferred));
    let edges: Vec<_> = if undirected {
        pairs.iter().flat_map(|&(u, v)| [(u, v), (v, u)]).collect()
    } else {
        pairs
    };
    Graph::from_edges(n, &edges)
}

pub fn load_edge_list(path: impl AsRef<Path>, undirected: bool) -> Result<Graph> {
    let text = fs::read_to_string(path)?;
    parse_edge_list(&text, undirected)
}

// ── Synthetic generators ─────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Synthetic {
    ErdosRenyi { vertices: usize, p: f64, seed: u64 },
    KRegularIn { vertices: usize, k: usize, seed: u64 },
    Star { vertices: usize },
}

impl Synthetic {
    /// Parses the `kind:param:param` descriptor, e.g. `erdos_renyi:100:0.05`.
    /// The seed is an optional trailing field and defaults to `default_seed`.
    pub fn parse(desc: &str, default_seed: u64) -> Result<Self> {
        let parts: Vec<&str> = desc.split(':').collect();
        let bad = || Error::Config(format!("invalid synthetic descriptor {desc:?}"));
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let seed = |i: usize| parts.get(i).map_or(Ok(default_seed), |s| s.parse::<u64>().map_err(|_| bad()));
        match parts.as_slice() {
            ["erdos_renyi", v, p, ..] if parts.len() <= 4 => Ok(Self::ErdosRenyi {
                vertices: num(v)?,
                p: p.parse().map_err(|_| bad())?,
                seed: seed(3)?,
            }),
            ["k_regular_in", v, k, ..] if parts.len() <= 4 => {
                Ok(Self::KRegularIn { vertices: num(v)?, k: num(k)?, seed: seed(3)? })
            }
            ["star", v] => Ok(Self::Star { vertices: num(v)? }),
            _ => Err(bad()),
        }
    }

    pub fn generate(&self) -> Result<Graph> {
        match *self {
            Self::ErdosRenyi { vertices, p, seed } => erdos_renyi(vertices, p, seed),
            Self::KRegularIn { vertices, k, seed } => k_regular_in(vertices, k, seed),
            Self::Star { vertices } => star(vertices),
        }
    }
}

/// Every ordered pair `u != v` is an edge with probability `p`.
pub fn erdos_renyi(vertices: usize, p: f64, seed: u64) -> Result<Graph> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("edge probability {p} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..vertices {
        for v in 0..vertices {
            if u != v && rng.gen::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    Graph::from_edges(vertices, &edges)
}

/// Every vertex receives exactly `k` in-edges from distinct other vertices.
pub fn k_regular_in(vertices: usize, k: usize, seed: u64) -> Result<Graph> {
    if k >= vertices.max(1) {
        return Err(Error::Config(format!("k_regular_in needs k < V (k={k}, V={vertices})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::with_capacity(vertices * k);
    let mut pool: Vec<usize> = Vec::with_capacity(vertices);
    for v in 0..vertices {
        pool.clear();
        pool.extend((0..vertices).filter(|&u| u != v));
        // Partial Fisher-Yates: the first k slots become the sample.
        for i in 0..k {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
            edges.push((pool[i], v));
        }
    }
    Graph::from_edges(vertices, &edges)
}

/// `V - 1` edges, all pointing at vertex 0.
pub fn star(vertices: usize) -> Result<Graph> {
    if vertices == 0 {
        return Err(Error::Config("star graph needs at least one vertex".into()));
    }
    let edges: Vec<_> = (1..vertices).map(|u| (u, 0)).collect();
    Graph::from_edges(vertices, &edges)
}
