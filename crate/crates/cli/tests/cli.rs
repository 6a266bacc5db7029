//! End-to-end runs of the `meshplan` binary: exit codes, published JSON
//! schemas and byte-identical output across runs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn meshplan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meshplan")).args(args).current_dir(root()).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}); stderr: {}", stderr(o)))
}

fn assert_valid(schema: &str, doc: &Value) {
    let text = std::fs::read_to_string(root().join("schemas").join(format!("{schema}.schema.json"))).unwrap();
    let schema: Value = serde_json::from_str(&text).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

const MLP: &str = "mlp:layers=3,batch=8,hidden=8";
const MLP_BWD: &str = "mlp:layers=3,batch=8,hidden=8,backward=true";

fn plan_to(dir: &Path, name: &str, args: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut all = vec!["plan"];
    all.extend_from_slice(args);
    all.extend_from_slice(&["--out", out.to_str().unwrap()]);
    let o = meshplan(&all);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

#[test]
fn plan_smoke_validates_against_the_schema() {
    let o = meshplan(&["plan", "--builder", MLP, "--cluster", "configs/cluster-1x2.toml", "--b", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = json(&o);
    assert_valid("plan", &doc);
    assert_eq!(doc["plan"]["b"], 4);
    assert!(stderr(&o).contains("T*"), "the human-readable report goes to stderr");
}

#[test]
fn plan_from_graph_file_and_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let g = meshplan::graph::build_mlp(2, 8, 4).unwrap();
    let graph_path = dir.path().join("g.json");
    std::fs::write(&graph_path, meshplan::graph::serialize(&g)).unwrap();
    assert_valid("graph", &serde_json::from_slice(&std::fs::read(&graph_path).unwrap()).unwrap());

    let cluster = root().join("configs/cluster-1x2.toml");
    let toml_cfg = dir.path().join("run.toml");
    std::fs::write(&toml_cfg, format!("graph = {:?}\ncluster = {:?}\nb = 2\n", graph_path, cluster)).unwrap();
    let json_cfg = dir.path().join("run.json");
    std::fs::write(&json_cfg, serde_json::json!({"graph": graph_path, "cluster": cluster, "b": 2}).to_string()).unwrap();
    let a = meshplan(&["plan", "--config", toml_cfg.to_str().unwrap()]);
    let b = meshplan(&["plan", "--config", json_cfg.to_str().unwrap()]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    assert_valid("plan", &json(&a));
    // command-line flags win over the file
    let c = meshplan(&["plan", "--config", toml_cfg.to_str().unwrap(), "--b", "3"]);
    assert_eq!(json(&c)["plan"]["b"], 3);
}

#[test]
fn infeasible_memory_exits_two_and_names_the_check() {
    let o = meshplan(&["plan", "--builder", MLP, "--cluster", "configs/cluster-tiny-memory.json"]);
    assert_eq!(code(&o), 2);
    let e = stderr(&o);
    assert!(e.contains("mem_stage + s*mem_act <= mem_device"), "{e}");
    assert!(e.contains("64 are available"), "{e}");
    assert!(o.stdout.is_empty());
}

#[test]
fn bad_usage_and_config_exit_one() {
    let cases: &[&[&str]] = &[
        &["bogus"],
        &["plan", "--builder", MLP],
        &["plan", "--builder", MLP, "--graph", "g.json", "--cluster", "configs/cluster-1x2.toml"],
        &["plan", "--cluster", "configs/cluster-1x2.toml"],
        &["plan", "--builder", MLP, "--cluster", "configs/cluster-1x2.toml", "--b", "0"],
        &["plan", "--builder", MLP, "--cluster", "configs/cluster-1x2.toml", "--epsilon", "-1"],
        &["plan", "--builder", "conv:layers=2", "--cluster", "configs/cluster-1x2.toml"],
        &["plan", "--builder", MLP, "--cluster", "configs/missing.toml"],
        &["plan", "--builder", MLP, "--cluster", "configs/cluster-1x2.toml", "--layers", "50"],
        &["simulate", "--plan", "configs/cluster-1x2.toml"],
        &["cover", "--hosts", "2", "--devices-per-host", "3", "--shapes", "2x3"],
        &["cover", "--hosts", "1", "--devices-per-host", "2", "--shapes", "1by1"],
    ];
    for args in cases {
        let o = meshplan(args);
        assert_eq!(code(&o), 1, "{args:?}: {}", stderr(&o));
        assert!(!stderr(&o).is_empty(), "{args:?}");
    }
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "builder = 'mlp'\nmicrobatches = 4\n").unwrap();
    let o = meshplan(&["plan", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("microbatches"), "{}", stderr(&o));
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&meshplan(&["--help"])), 0);
    assert_eq!(code(&meshplan(&["--version"])), 0);
    assert_eq!(code(&meshplan(&["plan", "--help"])), 0);
}

#[test]
fn simulate_reports_the_planned_latency() {
    let dir = tempfile::tempdir().unwrap();
    let plan = plan_to(dir.path(), "plan.json", &["--builder", MLP, "--cluster", "configs/cluster-2x4.toml", "--b", "4", "--epsilon", "0"]);
    let gantt = dir.path().join("gantt.json");
    let o = meshplan(&[
        "simulate",
        "--plan",
        plan.to_str().unwrap(),
        "--schedule",
        "gpipe",
        "--zero-transfer",
        "--gantt",
        gantt.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sim = json(&o);
    assert_valid("sim", &sim);
    assert_eq!(sim["difference"], 0, "forward-only GPipe without transfer cost runs at T*");
    assert_eq!(sim["makespan"], sim["t_star"]);
    assert!(stderr(&o).contains("difference    +0.000000000000s"), "{}", stderr(&o));
    let g: Value = serde_json::from_slice(&std::fs::read(&gantt).unwrap()).unwrap();
    assert_valid("gantt", &g);
    assert!(!g["rows"].as_object().unwrap().is_empty());

    let o = meshplan(&["simulate", "--plan", plan.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sim = json(&o);
    assert_valid("sim", &sim);
    assert!(sim["makespan"].as_u64() >= sim["t_star"].as_u64());
}

#[test]
fn simulate_rejects_a_mismatched_cluster() {
    let dir = tempfile::tempdir().unwrap();
    let plan = plan_to(dir.path(), "plan.json", &["--builder", MLP, "--cluster", "configs/cluster-1x2.toml"]);
    let o = meshplan(&["simulate", "--plan", plan.to_str().unwrap(), "--cluster", "configs/cluster-2x4.toml"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("does not match"), "{}", stderr(&o));
}

#[test]
fn simulated_out_of_memory_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let plan = plan_to(dir.path(), "plan.json", &["--builder", MLP_BWD, "--cluster", "configs/cluster-1x2.toml", "--b", "8"]);
    let mut doc: Value = serde_json::from_slice(&std::fs::read(&plan).unwrap()).unwrap();
    doc["plan"]["cluster"]["device_memory"] = 1.into();
    std::fs::write(&plan, doc.to_string()).unwrap();
    let o = meshplan(&["simulate", "--plan", plan.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("out of memory on device"), "{}", stderr(&o));
}

#[test]
fn cover_examples() {
    let o = meshplan(&["cover", "--hosts", "3", "--devices-per-host", "4", "--shapes", "2x4,1x4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = json(&o);
    assert_valid("cover", &doc);
    let pieces = doc["pieces"].as_array().unwrap();
    assert_eq!(pieces[0]["hosts"], serde_json::json!([0, 2]));
    assert_eq!(pieces[1]["hosts"], serde_json::json!([2, 3]));

    let o = meshplan(&["cover", "--hosts", "2", "--devices-per-host", "4", "--shapes", "1x4,1x2,1x1,1x1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = json(&o);
    assert_valid("cover", &doc);
    assert_eq!(doc["verified"], true);
    let mut ids: Vec<u64> = doc["pieces"].as_array().unwrap().iter().flat_map(|p| p["device_ids"].as_array().unwrap().clone()).map(|v| v.as_u64().unwrap()).collect();
    ids.sort_unstable();
    assert_eq!(ids, (0..8).collect::<Vec<_>>());

    let o = meshplan(&["cover", "--hosts", "1", "--devices-per-host", "2", "--shapes", "1x1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("1 devices but the cluster has 2"), "{}", stderr(&o));
}

#[test]
fn config_paths_resolve_against_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = root().join("configs/transformer-2x4.toml");
    let o = Command::new(env!("CARGO_BIN_EXE_meshplan"))
        .args(["sweep-b", "--config", cfg.to_str().unwrap(), "--builder", MLP, "--b-list", "2"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_valid("sweep", &json(&o));
}

#[test]
fn sweep_b_lists_every_microbatch_count() {
    let o = meshplan(&["sweep-b", "--builder", MLP, "--cluster", "configs/cluster-1x2.toml", "--b-list", "1,2,4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = json(&o);
    assert_valid("sweep", &doc);
    let bs: Vec<u64> = doc["entries"].as_array().unwrap().iter().map(|e| e["b"].as_u64().unwrap()).collect();
    assert_eq!(bs, vec![1, 2, 4]);

    let o = meshplan(&["sweep-b", "--builder", MLP, "--cluster", "configs/cluster-tiny-memory.json", "--b-list", "1,2"]);
    assert_eq!(code(&o), 2);
    let doc = json(&o);
    assert_valid("sweep", &doc);
    assert!(doc["entries"][0]["error"].is_string());
}

#[test]
fn report_reads_a_saved_plan() {
    let dir = tempfile::tempdir().unwrap();
    let plan = plan_to(dir.path(), "plan.json", &["--builder", MLP, "--cluster", "configs/cluster-1x2.toml"]);
    let o = meshplan(&["report", "--plan", plan.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains(MLP) && text.contains("T*"), "{text}");
}

#[test]
fn plans_are_byte_identical_across_runs_and_worker_counts() {
    let args = ["plan", "--builder", "transformer:blocks=1,batch=2,seq=4,hidden=8,heads=2", "--cluster", "configs/cluster-2x4.toml", "--b", "4"];
    let first = meshplan(&args);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    assert_eq!(first.stdout, meshplan(&args).stdout);
    for workers in ["1", "3"] {
        let mut a = args.to_vec();
        a.extend(["--workers", workers]);
        assert_eq!(first.stdout, meshplan(&a).stdout, "workers = {workers}");
    }
}
