use std::fs;
use std::io::Write;

use udpfl::harness::{self, Experiment, ExperimentConfig, RunSummary, SweepAxis};
use udpfl::Error;

const BASE: &str = r#"
name = "it"
U = 6
K = 3
T_init = 12
epsilon_p = 6.0
delta_p = 0.001
eta = 0.02
clip_C = 1.0
scheduler = "crd"
zeta = 0.01
seeds = [3, 4]

[model]
kind = "svm"
hinge = "textbook"

[data]
source = { kind = "synthetic", dim = 8, margin = 1.0 }
partition = { mode = "iid", shard_size = 32 }
test_size = 100
"#;

fn config(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(BASE).unwrap();
    cfg.output_dir = Some(dir.to_path_buf());
    cfg
}

#[test]
fn run_writes_consistent_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let m = harness::run_experiment(config(tmp.path())).unwrap();
    assert_eq!(m.outputs.len(), 2);
    assert_eq!(m.config_hash.len(), 64);
    let manifest: harness::RunManifest =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.config_hash, manifest.config.content_hash());
    for o in &m.outputs {
        assert!(o.error.is_none());
        assert!(o.ledger_max_ratio.unwrap() <= 1.0 + 1e-9);
        let summary: RunSummary =
            serde_json::from_str(&fs::read_to_string(o.summary_json.as_ref().unwrap()).unwrap()).unwrap();
        let mut rdr = csv::Reader::from_path(o.rounds_csv.as_ref().unwrap()).unwrap();
        assert_eq!(
            rdr.headers().unwrap().iter().collect::<Vec<_>>(),
            harness::ROUNDS_HEADER
        );
        let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
        assert_eq!(rows.len() as u32, summary.realized_t);
        let sigmas: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
        assert_eq!(sigmas, summary.sigma_trajectory);
        let triggers = rows.iter().filter(|r| &r[8] == "true").count();
        assert_eq!(triggers, summary.triggers);
        let last: f64 = rows.last().unwrap()[5].parse().unwrap();
        assert_eq!(Some(last), summary.final_test_loss);
        for r in &rows {
            assert_eq!(r[7].split(';').count(), 3);
            assert_eq!(r[0].parse::<u64>().unwrap(), o.seed);
        }
    }
}

#[test]
fn sweep_records_failures_without_aborting() {
    let tmp = tempfile::tempdir().unwrap();
    let exp = Experiment::prepare(config(tmp.path())).unwrap();
    let r = harness::sweep(&exp, SweepAxis::T, &[4.0, 2.5, 8.0]).unwrap();
    assert_eq!(r.rows.len(), 6);
    assert!(r.rows[2].error.is_some() && r.rows[3].error.is_some());
    assert_eq!(r.points[1].ok_seeds, 0);
    assert_eq!(r.points[0].mean_rounds, 4.0);
    assert!(r.best_value == Some(4.0) || r.best_value == Some(8.0));
    let csv = String::from_utf8(harness::sweep_csv(&r, 2).unwrap()).unwrap();
    assert_eq!(csv.lines().count(), 7);

    let r = harness::sweep(&exp, SweepAxis::Epsilon, &[3.0, -1.0]).unwrap();
    assert!(r.rows[0].error.is_none());
    assert!(r.rows[2].error.as_ref().unwrap().contains("epsilon_p"));
}

#[test]
fn decay_and_fixed_schedulers_run() {
    let tmp = tempfile::tempdir().unwrap();
    for kind in ["fixed", "decay"] {
        let mut cfg = config(&tmp.path().join(kind));
        cfg.scheduler = kind.parse().unwrap();
        let m = harness::run_experiment(cfg.resolved()).unwrap();
        for o in &m.outputs {
            assert!(o.error.is_none(), "{kind}: {:?}", o.error);
            assert!(o.ledger_max_ratio.unwrap() <= 1.0 + 1e-9);
        }
    }
}

#[test]
fn pilot_norms_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.pilot_rounds = 2;
    let path = tmp.path().join("norms.txt");
    let r = harness::pilot_clip(cfg, 3, &path).unwrap();
    assert_eq!(r.norms.len(), 2 * 6 * 32);
    let back = harness::read_norms(&path).unwrap();
    assert_eq!(back, r.norms);
    assert_eq!(harness::median(&back), r.clip);
    assert!(r.clip > 0.0);
}

#[test]
fn pilot_clip_setting_resolves_to_a_value() {
    let tmp = tempfile::tempdir().unwrap();
    let text = BASE.replace("clip_C = 1.0", "clip_C = \"pilot\"");
    let mut cfg = ExperimentConfig::from_toml(&text).unwrap();
    cfg.output_dir = Some(tmp.path().to_path_buf());
    let exp = Experiment::prepare(cfg).unwrap();
    assert_eq!(exp.config.clip_c, harness::ClipSetting::Value(exp.clip));
    assert!(exp.notes.iter().any(|n| n.contains("pilot")));
}

#[test]
fn csv_source_trains_logistic() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("d.csv");
    let mut f = fs::File::create(&path).unwrap();
    writeln!(f, "a,b,label").unwrap();
    for i in 0..300 {
        let x = (i as f64 * 0.37).sin();
        let y = (i as f64 * 0.11).cos();
        writeln!(f, "{x},{y},{}", if x + y > 0.0 { 1 } else { -1 }).unwrap();
    }
    drop(f);
    let text = BASE
        .replace("kind = \"svm\"\nhinge = \"textbook\"", "kind = \"logistic\"")
        .replace(
            "source = { kind = \"synthetic\", dim = 8, margin = 1.0 }",
            &format!("source = {{ kind = \"csv\", path = {:?} }}", path.to_str().unwrap()),
        )
        .replace("test_size = 100", "test_size = 20")
        .replace("eta = 0.02", "eta = 0.5");
    let mut cfg = ExperimentConfig::from_toml(&text).unwrap();
    cfg.output_dir = Some(tmp.path().join("out"));
    let m = harness::run_experiment(cfg).unwrap();
    assert!(m.outputs.iter().all(|o| o.error.is_none()), "{:?}", m.outputs);
}

#[test]
fn bad_configs_are_reported() {
    assert!(matches!(
        ExperimentConfig::from_toml(&BASE.replace("zeta = 0.01", "zeta = 0.01\nbogus = 1")),
        Err(Error::Config(_))
    ));
    let mut cfg = ExperimentConfig::from_toml(BASE).unwrap();
    cfg.model.kind = udpfl::models::ModelKind::Mlp;
    cfg.data.source = harness::DataSource::Mnist {
        dir: Some("/nonexistent/mnist".into()),
    };
    assert!(Experiment::prepare(cfg).is_err());
}
