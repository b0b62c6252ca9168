use std::fs;
use std::process::Command;

fn udpfl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_udpfl"))
}

const CONFIG: &str = r#"
name = "cli"
U = 4
K = 2
T_init = 10
epsilon_p = 6.0
delta_p = 0.001
eta = 0.02
clip_C = 1.0
seeds = [1, 2]

[model]
kind = "svm"
hinge = "textbook"

[data]
source = { kind = "synthetic", dim = 6, margin = 1.0 }
partition = { mode = "iid", shard_size = 20 }
test_size = 50
"#;

#[test]
fn calibrate_table_prints_csv() {
    let out = udpfl()
        .args([
            "accountant",
            "calibrate",
            "--epsilon",
            "8",
            "--q",
            "0.5,1",
            "--rounds",
            "100",
            "--sensitivity",
            "0.01",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epsilon,delta,q,T,sensitivity,sigma");
    assert_eq!(lines.len(), 3);
    let sigma: f64 = lines[2].rsplit(',').next().unwrap().parse().unwrap();
    let expected = 0.01 * (2.0 * 100.0 * (1e5f64).ln()).sqrt() / 8.0;
    assert!((sigma - expected).abs() < 1e-15);
}

#[test]
fn run_with_overrides_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let out_dir = tmp.path().join("out");
    let status = udpfl()
        .args([
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--scheduler",
            "fixed",
            "--t-init",
            "7",
            "--seeds",
            "5",
        ])
        .args(["--output", out_dir.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    let rounds = fs::read_to_string(out_dir.join("seed_5/rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 8);
    assert!(out_dir.join("seed_5/summary.json").is_file());
    assert!(out_dir.join("manifest.json").is_file());
}

#[test]
fn sweep_over_t_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let out_dir = tmp.path().join("sweep");
    let out = udpfl()
        .args(["sweep", "--config", cfg.to_str().unwrap(), "--t-grid", "2:6:2"])
        .args(["--output", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("sweep_T.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
}

#[test]
fn invalid_flags_fail() {
    let out = udpfl()
        .args(["run", "--config", "x.toml", "--scheduler", "bogus"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = udpfl().args(["fetch-mnist", "--dest", "/tmp/never"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--yes"));
}
