use std::path::Path;
use std::process::{Command, Output};

use anchorseg_bench::ablate::HEADER;
use anchorseg_bench::report::parse_pgm;
use anchorseg_core::config::RunConfig;

fn anchorseg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anchorseg"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path) {
    let mut cfg = RunConfig::default();
    cfg.steps = 4;
    cfg.data.n_samples = 10;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()).unwrap();
}

#[test]
fn train_eval_and_dump_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_config(dir);
    let out = stdout(&anchorseg(&["gen-data", "--config", "config.toml", "--seed", "3", "--out", "data.asg"], dir));
    assert!(out.contains("10 samples"));

    let trained = stdout(&anchorseg(&["train", "--config", "config.toml", "--data", "data.asg", "--out-dir", "run"], dir));
    for file in ["checkpoint.asgc", "config.toml", "loss.csv", "metrics.csv"] {
        assert!(dir.join("run").join(file).exists(), "{file}");
    }
    let losses = std::fs::read_to_string(dir.join("run/loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 5);

    // evaluation of the stored checkpoint reproduces the training-time scores
    let evaluated = stdout(&anchorseg(&["eval", "--checkpoint", "run/checkpoint.asgc", "--data", "data.asg"], dir));
    let giou = |text: &str| text.lines().find(|l| l.starts_with("giou")).map(str::to_owned);
    assert_eq!(giou(&trained), giou(&evaluated));

    std::fs::write(
        dir.join("metrics.csv"),
        format!("{HEADER}\nexp1-s0,exp1,0,0.5,0.5,0.5,\nexp5-s0,exp5,0,0.75,0.7,0.8,1.0\n"),
    )
    .unwrap();
    let report = stdout(&anchorseg(
        &[
            "report", "--metrics", "metrics.csv", "--svg", "chart.svg", "--dump-prior", "maps",
            "--checkpoint", "run/checkpoint.asgc", "--data", "data.asg",
        ],
        dir,
    ));
    assert!(report.contains("exp5"));

    let svg = std::fs::read_to_string(dir.join("chart.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let bars: Vec<_> = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("bar"))
        .map(|n| n.attribute("data-ablation").unwrap().to_owned())
        .collect();
    assert_eq!(bars, ["exp1", "exp5"]);

    let mut data_cfg = RunConfig::default().data;
    data_cfg.n_samples = 10;
    let n_eval = 10 - data_cfg.n_train();
    let maps: Vec<_> = std::fs::read_dir(dir.join("maps")).unwrap().collect();
    assert_eq!(maps.len(), 3 * n_eval);
    for entry in maps {
        let path = entry.unwrap().path();
        let (h, w, levels) = parse_pgm(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let side = if path.to_string_lossy().ends_with("_grid.pgm") { 8 } else { 96 };
        assert_eq!((h, w, levels.len()), (side, side, side * side));
        assert!(levels.iter().all(|&v| v <= 65535));
    }
}

#[test]
fn eval_without_a_config_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("lonely.asgc"), b"ASGC").unwrap();
    let out = anchorseg(&["eval", "--checkpoint", "lonely.asgc", "--data", "none.asg"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config.toml"));
}

#[test]
fn malformed_metrics_name_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("m.csv"), format!("{HEADER}\nexp1-s0,exp1,0,0.5,0.5\n")).unwrap();
    let out = anchorseg(&["report", "--metrics", "m.csv"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn grad_check_reports_one_line_per_check() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stdout(&anchorseg(&["grad-check", "--module", "imaging"], tmp.path()));
    assert!(out.lines().count() >= 1);
    assert!(out.lines().all(|l| l.starts_with("ok")));
}

#[test]
fn dump_prior_requires_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("m.csv"), format!("{HEADER}\n")).unwrap();
    let out = anchorseg(&["report", "--metrics", "m.csv", "--dump-prior", "maps"], tmp.path());
    assert!(!out.status.success());
}
