use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gde_core::tasks::particles::{ParticleModel, ParticleModelKind};
use gde_core::{ParamSet, SolverConfig};
use tempfile::TempDir;

const SMALL_SIM: &str = "[sim]\nn = 4\nT = 0.5\nseed = 3\n";

fn gde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gde"))
        .args(args)
        .output()
        .expect("gde runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn particle_config(dir: &Path, model: &str, epochs: usize) -> PathBuf {
    write_config(
        dir,
        &format!("{model}.toml"),
        &format!("task = \"particles\"\nmodel = \"{model}\"\n{SMALL_SIM}[particles]\nepochs = {epochs}\n"),
    )
}

#[test]
fn simulate_is_byte_identical_for_a_seed() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "sim.toml", SMALL_SIM);
    for run in ["a", "b"] {
        let out = gde(&["simulate", "--config", s(&cfg), "--out", s(&tmp.path().join(run))]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["rollout.csv", "edges.csv", "rollout.json"] {
        let a = fs::read(tmp.path().join("a").join(file)).unwrap();
        let b = fs::read(tmp.path().join("b").join(file)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{file} differs");
    }
    assert!(tmp.path().join("a/manifest.json").is_file());
}

#[test]
fn invalid_configuration_exits_2() {
    let tmp = TempDir::new().unwrap();
    let bad_dt = write_config(tmp.path(), "dt.toml", "task = \"particles\"\nmodel = \"gcde\"\n[sim]\ndt = -0.1\n");
    let out = gde(&["train", "--config", s(&bad_dt), "--out", s(tmp.path())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sim.dt"));

    let unknown = write_config(tmp.path(), "unknown.toml", "task = \"particles\"\nlearning_rate = 1\n");
    assert_eq!(code(&gde(&["train", "--config", s(&unknown), "--out", s(tmp.path())])), 2);

    let wrong_model = write_config(tmp.path(), "model.toml", "task = \"node-class\"\nmodel = \"gcde-ii\"\n");
    assert_eq!(code(&gde(&["train", "--config", s(&wrong_model), "--out", s(tmp.path())])), 2);
}

#[test]
fn missing_files_exit_4() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope.toml");
    assert_eq!(code(&gde(&["train", "--config", s(&missing), "--out", s(tmp.path())])), 4);

    let no_data = write_config(
        tmp.path(),
        "data.toml",
        "task = \"node-class\"\nmodel = \"gcn\"\n[data]\npath = \"absent\"\n",
    );
    assert_eq!(code(&gde(&["train", "--config", s(&no_data), "--out", s(tmp.path())])), 4);
}

#[test]
fn zero_epochs_checkpoint_is_the_initialization() {
    let tmp = TempDir::new().unwrap();
    let cfg = particle_config(tmp.path(), "gcde", 0);
    let out_dir = tmp.path().join("run");
    let out = gde(&["train", "--config", s(&cfg), "--out", s(&out_dir), "--seeds", "7"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let ck: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("seed_7/checkpoint.json")).unwrap()).unwrap();
    let saved = ParamSet::from_json(&ck["params"].to_string()).unwrap();
    let init = ParticleModel::new(ParticleModelKind::Gcde, 4, 1.95e-3, SolverConfig::default(), 7).params;
    assert_eq!(saved, init);
}

#[test]
fn particle_training_reduces_loss_and_evaluates() {
    let tmp = TempDir::new().unwrap();
    let cfg = particle_config(tmp.path(), "gcde", 50);
    let run = tmp.path().join("run");
    let out = gde(&["train", "--config", s(&cfg), "--out", s(&run), "--seeds", "0..1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    for seed in 0..2 {
        let curve = fs::read_to_string(run.join(format!("seed_{seed}/curve.csv"))).unwrap();
        let mut rdr = csv::Reader::from_reader(curve.as_bytes());
        let losses: Vec<f64> = rdr.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
        assert_eq!(losses.len(), 50);
        assert!(losses[49] < losses[0], "loss did not decrease: {} -> {}", losses[0], losses[49]);

        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(run.join(format!("seed_{seed}/manifest.json"))).unwrap()).unwrap();
        assert_eq!(manifest["nfe"]["scheme"], "rk4");
        assert_eq!(manifest["nfe"]["per_epoch"].as_array().unwrap().len(), 50);
        assert!(manifest["wall_clock_seconds"].as_f64().unwrap() >= 0.0);
    }

    let eval = tmp.path().join("eval");
    let out = gde(&["eval", "--config", s(&cfg), "--checkpoint", s(&run), "--out", s(&eval), "--horizons", "1,5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(eval.join("report.csv")).unwrap();
    assert!(report.contains("gcde,0,5,mape,"));
    assert!(report.contains("gcde,1,1,rmse,"));
    assert!(report.contains("gcde,mean,5,mape,"));

    let other = particle_config(tmp.path(), "static", 1);
    let out = gde(&["eval", "--config", s(&other), "--checkpoint", s(&run), "--out", s(&eval)]);
    assert_eq!(code(&out), 2, "checkpoint of another model must be rejected");
}

#[test]
fn repeated_eval_is_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = particle_config(tmp.path(), "neural-ode", 2);
    let run = tmp.path().join("run");
    assert_eq!(code(&gde(&["train", "--config", s(&cfg), "--out", s(&run)])), 0);
    let mut reports = Vec::new();
    for name in ["e1", "e2"] {
        let dir = tmp.path().join(name);
        let out = gde(&["eval", "--config", s(&cfg), "--checkpoint", s(&run.join("seed_0")), "--out", s(&dir)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        reports.push(fs::read(dir.join("report.csv")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn oracle_has_zero_error_and_report_lists_every_horizon() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "oracle.toml", &format!("task = \"particles\"\n{SMALL_SIM}"));
    let eval = tmp.path().join("eval");
    let out = gde(&["eval", "--config", s(&cfg), "--checkpoint", "oracle", "--out", s(&eval)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    for row in report["rows"].as_array().unwrap() {
        assert_eq!(row["value"].as_f64().unwrap(), 0.0, "{row}");
    }

    let merged = tmp.path().join("merged.csv");
    let out = gde(&["report", s(&eval), "--out", s(&merged)]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("| model | mape_1 | mape_3 | mape_5 | mape_10 | mape_15 | mape_20 | mape_50 |"),
        "{stdout}"
    );
    assert!(fs::read_to_string(merged).unwrap().starts_with("model,seed,horizon,metric,value"));
}

#[test]
fn node_classification_and_forecast_round_trip() {
    let tmp = TempDir::new().unwrap();
    let node = write_config(tmp.path(), "node.toml", "task = \"node-class\"\nmodel = \"gcde-rk2\"\n[node_class]\nepochs = 4\nhidden = 8\n");
    let forecast = write_config(
        tmp.path(),
        "forecast.toml",
        "task = \"forecast\"\nmodel = \"gcde-gru\"\n[data]\nkeep_prob = 0.7\n[traffic]\nsteps = 60\nnodes = 5\n[forecast]\nepochs = 2\nwindow = 3\ngcgru_hidden = 6\nhead_hidden = 6\n",
    );
    for (cfg, metric) in [(node, "test_acc"), (forecast, "rmse")] {
        let run = tmp.path().join(format!("{metric}_run"));
        let eval = tmp.path().join(format!("{metric}_eval"));
        let out = gde(&["train", "--config", s(&cfg), "--out", s(&run)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let out = gde(&["eval", "--config", s(&cfg), "--checkpoint", s(&run), "--out", s(&eval)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(fs::read_to_string(eval.join("report.csv")).unwrap().contains(metric));
    }
    assert!(tmp.path().join("rmse_eval/predictions_seed_0.csv").is_file());
}

#[test]
fn gradcheck_passes_and_flags_a_corrupted_gradient() {
    let out = gde(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let out = gde(&["gradcheck", "--inject-fault"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
