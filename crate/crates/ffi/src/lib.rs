//! C interface to the gnncg compiler.
//!
//! Graphs are opaque handles. A run takes a JSON options object and returns
//! the JSON report as a string the caller frees with `gnncg_string_free`.
//! Every call returns a `GnncgStatus`; on failure `gnncg_last_error` holds a
//! message for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gnncg::cli::{run_report_on, GraphSource, RunConfig};
use gnncg::graph::{Graph, Synthetic};
use gnncg::ir::models::{ModelKind, ModelSpec};
use gnncg::passes::{Mapping, OptLevel};
use gnncg::tensor::Precision;
use gnncg::Error;
use serde::Deserialize;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GnncgStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Shape = 6,
    Plan = 7,
    Execution = 8,
    /// The run finished but a report check failed; the report is still written.
    CheckFailed = 9,
    Panic = 10,
}

impl From<&Error> for GnncgStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io(_) => GnncgStatus::Io,
            Error::Parse { .. } => GnncgStatus::Parse,
            Error::Config(_) => GnncgStatus::Config,
            Error::Shape(_) | Error::Unsupported(_) => GnncgStatus::Shape,
            Error::Plan(_) => GnncgStatus::Plan,
            Error::Execution { .. } | Error::Checkpoint(_) => GnncgStatus::Execution,
            Error::Check(_) => GnncgStatus::CheckFailed,
        }
    }
}

/// Opaque graph handle.
pub struct GnncgGraph {
    graph: Graph,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(status: GnncgStatus, msg: impl Into<String>) -> GnncgStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> GnncgStatus) -> GnncgStatus {
    set_error("");
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(GnncgStatus::Panic, "internal panic"))
}

fn from_err(e: Error) -> GnncgStatus {
    fail((&e).into(), e.to_string())
}

unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, GnncgStatus> {
    if s.is_null() {
        return Err(fail(GnncgStatus::NullArgument, "null string argument"));
    }
    CStr::from_ptr(s).to_str().map_err(|_| fail(GnncgStatus::InvalidUtf8, "argument is not UTF-8"))
}

fn into_handle(graph: Graph, out: *mut *mut GnncgGraph) -> GnncgStatus {
    unsafe { *out = Box::into_raw(Box::new(GnncgGraph { graph })) };
    GnncgStatus::Ok
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn gnncg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread (empty after success).
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn gnncg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a graph from parallel `src`/`dst` arrays of length `num_edges`.
///
/// # Safety
/// `src` and `dst` must point to `num_edges` readable values (or may be null
/// when `num_edges` is 0); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gnncg_graph_from_edges(
    num_vertices: usize,
    src: *const usize,
    dst: *const usize,
    num_edges: usize,
    out: *mut *mut GnncgGraph,
) -> GnncgStatus {
    guard(|| {
        if out.is_null() || (num_edges > 0 && (src.is_null() || dst.is_null())) {
            return fail(GnncgStatus::NullArgument, "null pointer argument");
        }
        let edges: Vec<(usize, usize)> = if num_edges == 0 {
            Vec::new()
        } else {
            let (s, d) = (std::slice::from_raw_parts(src, num_edges), std::slice::from_raw_parts(dst, num_edges));
            s.iter().copied().zip(d.iter().copied()).collect()
        };
        match Graph::from_edges(num_vertices, &edges) {
            Ok(g) => into_handle(g, out),
            Err(e) => from_err(e),
        }
    })
}

/// Generates a synthetic graph from a `kind:param:param[:seed]` descriptor.
///
/// # Safety
/// `descriptor` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gnncg_graph_synthetic(descriptor: *const c_char, seed: u64, out: *mut *mut GnncgGraph) -> GnncgStatus {
    guard(|| {
        if out.is_null() {
            return fail(GnncgStatus::NullArgument, "null output pointer");
        }
        let desc = match read_str(descriptor) {
            Ok(d) => d,
            Err(s) => return s,
        };
        match Synthetic::parse(desc, seed).and_then(|s| s.generate()) {
            Ok(g) => into_handle(g, out),
            Err(e) => from_err(e),
        }
    })
}

/// # Safety
/// `g` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn gnncg_graph_num_vertices(g: *const GnncgGraph) -> usize {
    g.as_ref().map_or(0, |h| h.graph.num_vertices())
}

/// # Safety
/// `g` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn gnncg_graph_num_edges(g: *const GnncgGraph) -> usize {
    g.as_ref().map_or(0, |h| h.graph.num_edges())
}

/// Releases a graph handle; null is ignored.
///
/// # Safety
/// `g` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gnncg_graph_free(g: *mut GnncgGraph) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Run options; every field is optional.
#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Options {
    model: String,
    feat_dim: usize,
    hidden: Option<usize>,
    out_dim: Option<usize>,
    layers: usize,
    heads: usize,
    kernels: usize,
    opt: String,
    mapping: String,
    workers: usize,
    seed: u64,
    precision: String,
    steps: usize,
    lr: f64,
    train: bool,
    debug: bool,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            model: "gcn".into(),
            feat_dim: 8,
            hidden: None,
            out_dim: None,
            layers: 2,
            heads: 1,
            kernels: 2,
            opt: "all".into(),
            mapping: "auto".into(),
            workers: 1,
            seed: 42,
            precision: "f64".into(),
            steps: 1,
            lr: 0.0,
            train: true,
            debug: false,
        }
    }
}

impl Options {
    fn to_config(&self, g: &Graph) -> gnncg::Result<RunConfig> {
        let kind: ModelKind = self.model.parse()?;
        let mut model = ModelSpec::new(kind, self.feat_dim, self.hidden.unwrap_or(self.feat_dim), self.out_dim.unwrap_or(self.feat_dim));
        model.layers = self.layers;
        model.heads = self.heads;
        model.kernels = self.kernels;
        let mut cfg = RunConfig::new(model, GraphSource::External { vertices: g.num_vertices(), edges: g.num_edges() });
        cfg.opt = self.opt.parse::<OptLevel>()?;
        cfg.mapping = match self.mapping.as_str() {
            "auto" => None,
            m => Some(m.parse::<Mapping>()?),
        };
        cfg.workers = self.workers;
        cfg.seed = self.seed;
        cfg.precision = match self.precision.as_str() {
            "f64" => Precision::F64,
            "f32" => Precision::F32,
            other => return Err(Error::Config(format!("unknown precision `{other}`"))),
        };
        cfg.steps = self.steps;
        cfg.lr = self.lr;
        cfg.train = self.train;
        cfg.debug = self.debug;
        Ok(cfg)
    }
}

/// Compiles and runs a model on `g` and writes the JSON report to `*out_json`.
///
/// `options_json` may be null for defaults. The report is written for
/// `GNNCG_STATUS_OK` and `GNNCG_STATUS_CHECK_FAILED`; otherwise `*out_json` is
/// set to null.
///
/// # Safety
/// `g` must be a live handle, `options_json` null or nul-terminated, and
/// `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn gnncg_run(g: *const GnncgGraph, options_json: *const c_char, out_json: *mut *mut c_char) -> GnncgStatus {
    guard(|| {
        if out_json.is_null() {
            return fail(GnncgStatus::NullArgument, "null output pointer");
        }
        *out_json = ptr::null_mut();
        let Some(h) = g.as_ref() else {
            return fail(GnncgStatus::NullArgument, "null graph handle");
        };
        let opts: Options = if options_json.is_null() {
            Options::default()
        } else {
            let text = match read_str(options_json) {
                Ok(t) => t,
                Err(s) => return s,
            };
            match serde_json::from_str(text) {
                Ok(o) => o,
                Err(e) => return fail(GnncgStatus::Config, format!("invalid options: {e}")),
            }
        };
        let doc = match opts.to_config(&h.graph).and_then(|cfg| run_report_on(&cfg, &h.graph)) {
            Ok(d) => d,
            Err(e) => return from_err(e),
        };
        let status = match doc.ensure_passed() {
            Ok(()) => GnncgStatus::Ok,
            Err(e) => from_err(e),
        };
        *out_json = CString::new(doc.to_json()).expect("JSON has no nul").into_raw();
        status
    })
}

/// Releases a string returned by this library; null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gnncg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
