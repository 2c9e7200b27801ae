use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nextloc::harness::config::ExperimentConfig;
use nextloc::harness::report::RunReport;
use nextloc::harness::synth::SynthCitySpec;
use nextloc::ingest::WindowSpec;

fn nextloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nextloc")).args(args).output().expect("binary runs")
}

fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::default();
    cfg.synth = SynthCitySpec { grid_rows: 4, grid_cols: 4, n_agents: 12, n_days: 14, ..SynthCitySpec::toybench() };
    cfg.window = WindowSpec { history_len: 6, current_len: 2, stride: 1 };
    cfg.model.prompt_text = "predict the next place".into();
    cfg.backbone.d_model = 16;
    cfg.backbone.heads = 2;
    cfg.backbone.d_ff = 32;
    cfg.backbone.max_seq = 32;
    cfg.features.d_model = 16;
    cfg.poi.desc_len = 8;
    cfg.train.max_steps = 8;
    cfg.train.max_epochs = 2;
    cfg.train.batch_size = 32;
    let path = dir.join("small.toml");
    std::fs::write(&path, cfg.to_text()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_evaluate_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let city = tmp.path().join("city");
    let run = tmp.path().join("run");
    let eval = tmp.path().join("eval");

    let o = nextloc(&["synth", "--config", s(&cfg), "--out", s(&city)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = nextloc(&["train", "--config", s(&cfg), "--data", s(&city), "--out", s(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trained = RunReport::read(&run.join("report.toml")).unwrap();
    trained.validate().unwrap();
    assert!(std::fs::read_to_string(run.join("metrics.csv")).unwrap().starts_with("#nextloc-report v1\n"));

    let ckpt = run.join("model.nxll");
    let o = nextloc(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--data", s(&city), "--out", s(&eval)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let evaluated = RunReport::read(&eval.join("report.toml")).unwrap();
    assert_eq!(evaluated.cities[0].splits, trained.cities[0].splits);

    let o = nextloc(&["predict", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--data", s(&city), "--out", s(&eval)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(eval.join("predictions.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("#nextloc-format v1"));
    assert_eq!(lines.next().unwrap().split(',').count(), 4 + 10);
    let mut rows = 0;
    for line in lines {
        let ids: Vec<&str> = line.split(',').skip(4).collect();
        assert_eq!(ids.len(), 10);
        assert!(ids.iter().all(|id| id.parse::<u32>().is_ok()));
        rows += 1;
    }
    assert_eq!(rows, trained.cities[0].splits.iter().find(|s| s.split == "test").unwrap().queries);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(nextloc(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(nextloc(&["predict", "--checkpoint", "x", "--k", "0"]).status.code(), Some(1));
}

#[test]
fn bad_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "[window]\nhistory_len = 6\nbogus = 1\n").unwrap();
    assert_eq!(nextloc(&["synth", "--config", s(&path), "--out", s(tmp.path())]).status.code(), Some(1));
}

#[test]
fn missing_data_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let o = nextloc(&["train", "--data", s(&missing), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let o = nextloc(&["gradcheck", "--config", s(&cfg), "--pairs", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn preprocess_writes_grid_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let pings = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/staypoints_12_pings.csv");
    let o = nextloc(&["preprocess", "--pings", s(&pings), "--out", s(tmp.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let visits = std::fs::read_to_string(tmp.path().join("visits.csv")).unwrap();
    // header lines plus one row per staypoint
    assert_eq!(visits.lines().filter(|l| l.starts_with("walker,")).count(), 3);
    assert!(tmp.path().join("locations.csv").exists());
}
