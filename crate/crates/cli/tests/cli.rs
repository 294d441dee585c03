use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dgcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgcn")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_then_load_check() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = dgcn(&["generate", "--kind", "sbm", "--seed", "3", "--out", p(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = dgcn(&["load-check", p(&data)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("nodes=300"), "{}", stdout(&o));
    let o = dgcn(&["load-check", p(&data), "--expect", "cora"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn load_check_missing_file_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("edges.tsv"), "0\t1\n").unwrap();
    let o = dgcn(&["load-check", p(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("features.csv"));
}

#[test]
fn partition_and_design_topology() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&dgcn(&["generate", "--out", p(&data)])), 0);
    let part = dir.path().join("part");
    let o = dgcn(&["partition", "--data", p(&data), "--agents", "5", "--seed", "1", "--out", p(&part)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let assign = fs::read_to_string(part.join("assign.csv")).unwrap();
    assert_eq!(assign.lines().count(), 301);
    let c = dir.path().join("c.csv");
    let o = dgcn(&[
        "design-topology",
        "--forbidden",
        p(&part.join("forbidden.csv")),
        "--gamma",
        "0.5",
        "--out",
        p(&c),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("converged=true"));
    let rows: Vec<Vec<f64>> = fs::read_to_string(&c)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 5);
    for r in &rows {
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

const CONFIG: &str = r#"
agents = 3
models = ["dgcn", "gcn", "nn"]

[data.synthetic]
kind = "sbm_classification"
nodes = 60
p_in = 0.25
p_out = 0.02

[model]
hidden = [4]

[train]
iterations = 15
eval_every = 5
schedule = { kind = "constant", eta0 = 0.5 }
"#;

#[test]
fn train_baseline_report_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("out");
    let o = dgcn(&[
        "train",
        "--config",
        p(&cfg),
        "--output-dir",
        p(&out),
        "--iterations",
        "7",
        "--period",
        "never",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(out.join("runs/main/dgcn_rep0.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 8);
    assert!(!out.join("runs/main/gcn_rep0.jsonl").exists());
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["messages_consensus"], 0);

    let o = dgcn(&["baseline", "--config", p(&cfg), "--output-dir", p(&out)]);
    assert_eq!(code(&o), 0);
    let o = dgcn(&["report", p(&out)]);
    assert_eq!(code(&o), 0);
    let s = stdout(&o);
    assert!(s.contains("dgcn") && s.contains("gcn") && s.contains("nn"), "{s}");
    assert!(out.join("plots/main_loss.svg").is_file());
}

#[test]
fn sweep_needs_a_kind() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("out");
    let o = dgcn(&["sweep", "--config", p(&cfg), "--output-dir", p(&out)]);
    assert_eq!(code(&o), 1);
    let o = dgcn(&[
        "sweep",
        "--config",
        p(&cfg),
        "--output-dir",
        p(&out),
        "--kind",
        "order",
        "--iterations",
        "5",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for v in ["linear", "order1", "order2"] {
        assert!(out.join("runs").join(v).join("dgcn_rep0.jsonl").is_file(), "{v}");
    }
}

#[test]
fn bad_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, "agents = 0\n[data.synthetic]\nkind = \"sbm_classification\"\n").unwrap();
    let o = dgcn(&["train", "--config", p(&cfg), "--output-dir", p(&dir.path().join("o"))]);
    assert_eq!(code(&o), 1);
    let o = dgcn(&["train", "--config", p(&dir.path().join("missing.toml"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn unwritable_output_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let o = dgcn(&["train", "--config", p(&cfg), "--output-dir", p(&blocker.join("out"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn shipped_configs_run() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["sbm.toml", "sensor_grid.toml"] {
        let dir = tempfile::tempdir().unwrap();
        let o = dgcn(&[
            "train",
            "--config",
            p(&configs.join(name)),
            "--iterations",
            "3",
            "--repetitions",
            "1",
            "--output-dir",
            p(dir.path()),
        ]);
        assert_eq!(code(&o), 0, "{name}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(dir.path().join("summary.json").exists());
    }
}
