use std::process::{Command, Output};

use serde_json::Value;

fn gnncg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gnncg")).args(args).env_remove("GNNCG_THREADS").output().unwrap()
}

fn report(args: &[&str]) -> (i32, Value) {
    let out = gnncg(args);
    let code = out.status.code().unwrap();
    let doc = serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stderr)));
    (code, doc)
}

fn strip_wall(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.remove("wall_ms");
            m.values_mut().for_each(strip_wall);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_wall),
        _ => {}
    }
}

fn statuses(doc: &Value) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for r in doc["results"].as_array().unwrap() {
        for c in r["checks"].as_array().unwrap() {
            out.push((c["name"].as_str().unwrap().to_string(), c["status"].as_str().unwrap().to_string()));
        }
    }
    out
}

const GAT_RUN: &[&str] =
    &["run", "--model", "gat", "--synthetic", "k_regular_in:32:4", "--feat-dim", "8", "--heads", "1", "--opt", "all", "--workers", "4", "--seed", "42"];

#[test]
fn gat_run_passes_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.json");
    let mut args = GAT_RUN.to_vec();
    args.extend(["--json", path.to_str().unwrap()]);
    let out = gnncg(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for key in ["version", "config", "graph", "results"] {
        assert!(doc.get(key).is_some(), "missing {key}");
    }
    assert_eq!(doc["graph"]["V"], 32);
    assert_eq!(doc["graph"]["E"], 128);
    assert_eq!(doc["graph"]["max_in"], 4);
    let r = &doc["results"][0];
    for key in ["opt", "mapping", "flops", "io_units", "peak_mem_units", "wall_ms", "checks"] {
        assert!(r.get(key).is_some(), "missing results.{key}");
    }
    let checks = statuses(&doc);
    assert!(checks.iter().all(|(_, s)| s == "pass"), "{checks:?}");
    assert!(checks.iter().any(|(n, _)| n == "grad_check"));
}

#[test]
fn reports_are_deterministic_apart_from_wall_time() {
    let (_, mut a) = report(GAT_RUN);
    let (_, mut b) = report(GAT_RUN);
    strip_wall(&mut a);
    strip_wall(&mut b);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn reorganization_flops_ratio_on_gat() {
    let base = ["run", "--model", "gat", "--synthetic", "erdos_renyi:40:0.1:3", "--feat-dim", "6", "--inference"];
    let (_, none) = report(&[&base[..], &["--opt", "none"]].concat());
    let (_, reorg) = report(&[&base[..], &["--opt", "reorg"]].concat());
    let (v, e, f) = (none["graph"]["V"].as_u64().unwrap(), none["graph"]["E"].as_u64().unwrap(), 6);
    let naive = none["results"][0]["tag_flops"]["forward/attention"].as_u64().unwrap();
    let fast = reorg["results"][0]["tag_flops"]["forward/attention"].as_u64().unwrap();
    // Two layers of equal width.
    assert_eq!(naive, 2 * (6 * e * f + e));
    assert_eq!(fast, 2 * (4 * v * f + 2 * e));
}

#[test]
fn edge_override_on_gat_is_a_plan_error() {
    let out = gnncg(&["run", "--model", "gat", "--synthetic", "erdos_renyi:20:0.2", "--mapping", "edge"]);
    assert_eq!(out.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&out.stderr).contains("plan error"));
}

#[test]
fn compare_edgeconv_none_against_all() {
    let (code, doc) = report(&["compare", "--model", "edgeconv", "--synthetic", "erdos_renyi:24:0.2", "--opts", "none,all"]);
    assert_eq!(code, 0);
    let io: Vec<u64> = doc["results"].as_array().unwrap().iter().map(|r| r["io_units"].as_u64().unwrap()).collect();
    assert!(io[1] < io[0], "{io:?}");
    let cmp = doc["comparison"].as_array().unwrap();
    assert!(!cmp.is_empty() && cmp.iter().all(|c| c["status"] == "pass"));
}

#[test]
fn compare_mappings_on_a_star() {
    let (code, doc) = report(&["compare", "--model", "gcn", "--synthetic", "star:30", "--opts", "all", "--mappings", "vertex,edge", "--workers", "3"]);
    assert_eq!(code, 0);
    let maps: Vec<&str> = doc["results"].as_array().unwrap().iter().map(|r| r["mapping"].as_str().unwrap()).collect();
    assert_eq!(maps, ["vertex_balanced", "edge_balanced"]);
}

#[test]
fn single_config_compare_passes() {
    let (code, doc) = report(&["compare", "--model", "monet", "--synthetic", "erdos_renyi:10:0.3", "--opts", "all"]);
    assert_eq!(code, 0);
    assert!(doc.get("comparison").is_none());
}

#[test]
fn thread_count_from_environment() {
    let out = Command::new(env!("CARGO_BIN_EXE_gnncg"))
        .args(["run", "--synthetic", "star:6", "--inference"])
        .env("GNNCG_THREADS", "3")
        .output()
        .unwrap();
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["config"]["workers"], 3);
}

#[test]
fn training_steps_lower_the_loss() {
    let (code, doc) = report(&["run", "--model", "gcn", "--synthetic", "erdos_renyi:12:0.3", "--steps", "3", "--lr", "0.01"]);
    assert_eq!(code, 0);
    let losses: Vec<f64> = doc["results"][0]["losses"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(losses.len(), 3);
    assert!(losses[2] < losses[0], "{losses:?}");
}

#[test]
fn dump_ir_lists_every_stage() {
    let out = gnncg(&["dump-ir", "--model", "gat", "--synthetic", "star:5", "--layers", "1"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for stage in ["== model ==", "== decomposed ==", "== reorganized", "== backward ==", "== forward plan ==", "== backward plan =="] {
        assert!(text.contains(stage), "missing {stage}");
    }
}

#[test]
fn error_exit_codes() {
    assert_eq!(gnncg(&["run", "--model", "gcn"]).status.code(), Some(4));
    assert_eq!(gnncg(&["run", "--synthetic", "bogus:1"]).status.code(), Some(4));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "0 1\n1 x\n").unwrap();
    assert_eq!(gnncg(&["run", "--graph", bad.to_str().unwrap()]).status.code(), Some(3));
    let missing = dir.path().join("missing.txt");
    assert_eq!(gnncg(&["run", "--graph", missing.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(gnncg(&["run", "--synthetic", "star:4", "--opt", "turbo"]).status.code(), Some(1));
}

#[test]
fn edge_list_file_input() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g3.txt");
    std::fs::write(&path, "# G3\n0 2\n1 2\n0 1\n").unwrap();
    let (code, doc) = report(&["run", "--graph", path.to_str().unwrap(), "--model", "edgeconv", "--feat-dim", "3"]);
    assert_eq!(code, 0);
    assert_eq!(doc["graph"]["E"], 3);
}
