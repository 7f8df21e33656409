use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_broncholoc"))
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#"{
    "tree": {"kind": "generated", "spec": {"max_generation": 2}},
    "filter": {"n_particles": 24},
    "suite": {"seeds": 1, "trajectories_per_seed": 2},
    "sweep": {"n_particles": [8, 24], "seeds": 1, "trajectories_per_seed": 1}
}"#;

#[test]
fn missing_tree_file_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"tree": {"kind": "file", "path": "absent.json"}}"#);
    let out = dir.path().join("out");
    let status = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("absent.json"));
    assert!(!out.exists());
}

#[test]
fn run_twice_gives_identical_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    for name in ["a", "b"] {
        let status = bin()
            .args(["run", "--seed", "7", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join(name))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = fs::read(dir.path().join("a/estimate.csv")).unwrap();
    let b = fs::read(dir.path().join("b/estimate.csv")).unwrap();
    assert_eq!(a, b);
    assert!(String::from_utf8(a).unwrap().starts_with("t,x,y,z,qw,qx,qy,qz\n"));
    for f in ["report.json", "errors.csv", "diag.jsonl", "config.json"] {
        assert!(dir.path().join("a").join(f).is_file(), "{f}");
    }
    let errors = fs::read_to_string(dir.path().join("a/errors.csv")).unwrap();
    assert!(errors.starts_with("t,err_mm,generation\n"));
}

#[test]
fn gen_tree_then_run_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let sim_dir = dir.path().join("sim");
    assert!(bin()
        .args(["sim-traj", "--seed", "3", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&sim_dir)
        .status()
        .unwrap()
        .success());
    let tree_dir = dir.path().join("tree");
    assert!(bin()
        .args(["gen-tree", "--seed", "3", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&tree_dir)
        .status()
        .unwrap()
        .success());
    assert_eq!(
        fs::read(sim_dir.join("tree.json")).unwrap(),
        fs::read(tree_dir.join("tree.json")).unwrap()
    );

    let file_cfg = write_config(
        &sim_dir,
        r#"{"tree": {"kind": "file", "path": "tree.json"},
            "trajectory": {"kind": "file", "path": "ground_truth.csv"},
            "filter": {"n_particles": 16}}"#,
    );
    let out = dir.path().join("run");
    let res = bin().args(["run", "--config"]).arg(&file_cfg).arg("--out").arg(&out).output().unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let frames = fs::read_to_string(sim_dir.join("ground_truth.csv")).unwrap().lines().count();
    let est = fs::read_to_string(out.join("estimate.csv")).unwrap().lines().count();
    assert_eq!(frames, est);
}

#[test]
fn ablation_and_sweep_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("ablation");
    assert!(bin().args(["ablation", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap().success());
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let methods: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["full", "no_bsa", "no_dvr", "dead_reckoning"]);

    let out = dir.path().join("sweep");
    assert!(bin().args(["sweep", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap().success());
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(sweep.starts_with("n_particles,ate_mean,accuracy_pct,steps_per_second\n"));
    assert_eq!(sweep.lines().count(), 3);
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"filter": {"n_particles": 0}}"#);
    let res = bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert!(!res.status.success());
    let cfg = write_config(dir.path(), r#"{"unknown_key": 1}"#);
    let res = bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert!(!res.status.success());
    assert!(!dir.path().join("o").exists());
}

#[test]
fn shipped_configs_run() {
    let dir = tempfile::tempdir().unwrap();
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let out = dir.path().join("zero");
    let res = bin()
        .args(["run", "--seed", "2", "--config"])
        .arg(configs.join("zero_noise.json"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    let ate = report["ate_mean"].as_f64().unwrap();
    assert!(ate < 1e-3, "zero-noise ATE {ate}");

    let echoed = fs::read_to_string(dir.path().join("zero/config.json")).unwrap();
    let default = fs::read_to_string(configs.join("default.json")).unwrap();
    let a: serde_json::Value = serde_json::from_str(&default).unwrap();
    let b: serde_json::Value = serde_json::from_str(&echoed).unwrap();
    assert_eq!(a["tree"], b["tree"]);
    assert_eq!(a["suite"], b["suite"]);

    let res = bin()
        .args(["gen-tree", "--config"])
        .arg(configs.join("default.json"))
        .arg("--out")
        .arg(dir.path().join("tree"))
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
}
