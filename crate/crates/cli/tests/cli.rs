use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const DESK: &str =
    r#"{"H":{"form":"linear","base":[[0.5,0],[0,-0.5]],"slope":"sx"},"C":{"form":"constant","value":"sm"},"control":[-1,1]}"#;
const COST: &str =
    r#"{"running":{"form":"quadratic_control","weight":0.01},"terminal":{"form":"one_minus_bloch","target":[1,0,0]}}"#;

fn qtraj(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qtraj")).args(args).env_remove("QTRAJ_SEED").output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn out_dir(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn simulate_discrete_writes_trajectories_and_run_record() {
    let tmp = tempfile::tempdir().unwrap();
    let model = write(tmp.path(), "m.json", DESK);
    let out = out_dir(tmp.path(), "o");
    let o = qtraj(&[
        "simulate-discrete", "--model", &model, "--obs", "nondiagonal", "--strategy", "det:const:0.3", "--n", "16",
        "--t", "1", "--samples", "3", "--seed", "9", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("trajectories.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "sample,step,t,x,y,z,u,outcome");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3 * 17);
    for row in &rows {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 8);
        let v: Vec<f64> = cols[3..6].iter().map(|c| c.parse().unwrap()).collect();
        assert!(v.iter().map(|x| x * x).sum::<f64>() <= 1.0 + 1e-9);
    }
    let run = read_json(&out.join("run.json"));
    assert_eq!(run["config"]["seed"], 9);
    assert_eq!(run["config"]["subcommand"], "simulate-discrete");
    assert!(run["config"].get("out").is_none());
}

#[test]
fn seed_controls_output_and_env_overrides_it() {
    let tmp = tempfile::tempdir().unwrap();
    let model = write(tmp.path(), "m.json", DESK);
    let run = |name: &str, seed: &str, env: Option<&str>| {
        let out = out_dir(tmp.path(), name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_qtraj"));
        cmd.args([
            "simulate-diffusive", "--model", &model, "--obs", "nondiagonal", "--strategy", "markov:bloch_x_gain",
            "--dt", "1e-3", "--t", "0.5", "--samples", "4", "--record-every", "50", "--seed", seed, "--out",
        ])
        .arg(&out)
        .env_remove("QTRAJ_SEED");
        if let Some(s) = env {
            cmd.env("QTRAJ_SEED", s);
        }
        assert!(cmd.status().unwrap().success());
        fs::read(out.join("trajectories.csv")).unwrap()
    };
    let a = run("a", "1", None);
    let b = run("b", "1", None);
    let c = run("c", "2", None);
    let d = run("d", "1", Some("2"));
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(c, d);
    assert_eq!(read_json(&tmp.path().join("d/run.json"))["config"]["seed"], 2);
}

#[test]
fn jump_run_writes_jump_times() {
    let tmp = tempfile::tempdir().unwrap();
    let model = write(tmp.path(), "m.json", DESK);
    let out = out_dir(tmp.path(), "j");
    let o = qtraj(&[
        "simulate-jump", "--model", &model, "--obs", "diagonal", "--strategy", "det:const:0", "--dt", "1e-3", "--t", "2",
        "--samples", "20", "--record-every", "100", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let jumps = fs::read_to_string(out.join("jumps.csv")).unwrap();
    assert_eq!(jumps.lines().next().unwrap(), "sample,jump_time");
    // Starting excited with C = σ⁻, each path jumps at most once.
    let mut per_sample = std::collections::HashMap::new();
    for row in jumps.lines().skip(1) {
        let (s, t) = row.split_once(',').unwrap();
        let t: f64 = t.parse().unwrap();
        assert!((0.0..=2.0).contains(&t));
        *per_sample.entry(s.to_string()).or_insert(0) += 1;
    }
    assert!(per_sample.values().all(|&c| c == 1));
    assert!(!per_sample.is_empty());
}

#[test]
fn hjb_reports_matching_tree_values() {
    let tmp = tempfile::tempdir().unwrap();
    let model = write(tmp.path(), "m.json", DESK);
    let cost = write(tmp.path(), "c.json", COST);
    let value = |flag: &str, name: &str| {
        let out = out_dir(tmp.path(), name);
        let o = qtraj(&[
            "hjb", "--model", &model, "--obs", "diagonal", "--cost", &cost, "--horizon", "3", "--controls", "2", flag,
            "--out", out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let text = String::from_utf8(o.stdout).unwrap();
        text.lines().find_map(|l| l.strip_prefix("V0 ")).unwrap().trim().parse::<f64>().unwrap()
    };
    let tree = value("--exact-tree", "t");
    let brute = value("--brute-force", "b");
    assert!((tree - brute).abs() <= 1e-12, "{tree} vs {brute}");
}

#[test]
fn hjb_grid_writes_value_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let model = write(tmp.path(), "m.json", DESK);
    let cost = write(tmp.path(), "c.json", COST);
    let out = out_dir(tmp.path(), "g");
    let o = qtraj(&[
        "hjb", "--model", &model, "--obs", "diagonal", "--cost", &cost, "--horizon", "2", "--delta", "0.25",
        "--controls", "3", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let grid = fs::read_to_string(out.join("value_grid.csv")).unwrap();
    assert_eq!(grid.lines().next().unwrap(), "k,x,y,z,V,u");
    assert!(grid.lines().count() > 10);
}

#[test]
fn fluorescence_writes_photon_statistics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(tmp.path(), "f");
    let o = qtraj(&[
        "fluorescence", "--laser", "const:0", "--n", "64", "--t", "3", "--samples", "200", "--record-every", "64",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stats = read_json(&out.join("photon_stats.json"));
    assert_eq!(stats["runs"], 200);
    // Without the laser, at most one photon per run.
    let hist = stats["histogram"].as_object().unwrap();
    assert!(hist.keys().all(|k| k == "0" || k == "1"));
}

#[test]
fn bad_configuration_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let model = write(tmp.path(), "m.json", DESK);
    let out = tmp.path().join("x");
    let out = out.to_str().unwrap();
    for args in [
        vec!["simulate-diffusive", "--model", &model, "--strategy", "det:const:0", "--dt", "0.5", "--t", "1", "--out", out],
        vec!["simulate-discrete", "--model", &model, "--strategy", "det:const:7", "--n", "4", "--t", "1", "--out", out],
        vec!["simulate-discrete", "--model", "/nonexistent.json", "--strategy", "det:const:0", "--n", "4", "--t", "1", "--out", out],
        vec!["simulate-discrete", "--model", &model, "--strategy", "nonsense", "--n", "4", "--t", "1", "--out", out],
        vec!["no-such-command"],
    ] {
        let o = qtraj(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn numerical_drift_exits_with_code_3() {
    // A strong coupling at the largest allowed diffusive step cannot keep the state positive.
    let tmp = tempfile::tempdir().unwrap();
    let model = write(
        tmp.path(),
        "strong.json",
        r#"{"H":{"form":"constant","value":[[0,0],[0,0]]},"C":{"form":"constant","value":[[0,40],[0,0]]},"control":[-1,1]}"#,
    );
    let out = tmp.path().join("d");
    let o = qtraj(&[
        "simulate-diffusive", "--model", &model, "--obs", "nondiagonal", "--strategy", "det:const:0", "--dt", "1e-2",
        "--t", "1", "--samples", "5", "--rho0", "mixed", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
