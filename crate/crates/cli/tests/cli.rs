use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sycam::dataset::load_dataset;
use sycam::metrics::{evaluate_metric, MetricKind};
use sycam::parse_expr;

fn sycam(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sycam"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Planted dataset under `dir/ds`; returns the manifest path.
fn planted(dir: &Path, plant: &str) -> PathBuf {
    let o = sycam(
        &["make-synthetic", "--out", "ds", "--plant", plant, "--per-class", "12", "--k", "6", "--seed", "5"],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("ds/manifest.json")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn synth_on_planted_ablation_prints_best_last() {
    let dir = tempfile::tempdir().unwrap();
    planted(dir.path(), "AblScores");
    write_config(
        dir.path(),
        r#"{"dataset": "ds/manifest.json", "metric": "mgt", "budget_secs": 60, "timing": false, "workers": 1}"#,
    );
    let o = sycam(&["synth", "--config", "cfg.json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().last(), Some("best: AblScores"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["best_expr"], "AblScores");
    assert_eq!(summary["metric"], "mgt");
    assert_eq!(summary["mean"], 1.0);
    assert!(dir.path().join("trace.jsonl").exists());
}

#[test]
fn missing_gt_mask_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    planted(dir.path(), "AblScores");
    for rec in std::fs::read_dir(dir.path().join("ds/records")).unwrap() {
        std::fs::remove_file(rec.unwrap().path().join("gt_mask.syct")).unwrap();
    }
    write_config(dir.path(), r#"{"dataset": "ds/manifest.json", "metric": "mgt", "budget_secs": 5}"#);
    let o = sycam(&["synth", "--config", "cfg.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gt_mask"), "{}", stderr(&o));
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    planted(dir.path(), "AblScores");
    write_config(dir.path(), r#"{"dataset": "ds/manifest.json", "metric": "mgt", "budget_secs": -1}"#);
    let o = sycam(&["synth", "--config", "cfg.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("budget_secs"), "{}", stderr(&o));
    write_config(dir.path(), r#"{"dataset": "nowhere/manifest.json", "metric": "mgt"}"#);
    let o = sycam(&["synth", "--config", "cfg.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dataset"), "{}", stderr(&o));
}

#[test]
fn grammar_flag_restricts_terminals() {
    let dir = tempfile::tempdir().unwrap();
    planted(dir.path(), "AblScores");
    write_config(
        dir.path(),
        r#"{"dataset": "ds/manifest.json", "metric": "mgt", "budget_secs": 60, "max_generations": 1, "timing": false, "workers": 1}"#,
    );
    let o = sycam(&["synth", "--config", "cfg.json", "--grammar=G1"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&summary).unwrap();
    let best = v["best_expr"].as_str().unwrap();
    assert!(!best.contains("CICScores") && !best.contains("AblScores"), "{best}");
    let trace = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    assert!(!trace.contains("CICScores") && !trace.contains("AblScores"));
}

#[test]
fn synth_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    planted(dir.path(), "CICScores");
    write_config(
        dir.path(),
        r#"{"dataset": "ds/manifest.json", "metric": "sch", "budget_secs": 60, "max_candidates": 40, "timing": false, "workers": 1, "seed": 4}"#,
    );
    let run = |out: &str| {
        let o = sycam(&["synth", "--config", "cfg.json", "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        (
            std::fs::read(dir.path().join(out).join("trace.jsonl")).unwrap(),
            std::fs::read(dir.path().join(out).join("summary.json")).unwrap(),
        )
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn eval_csv_matches_printed_and_library_means() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = planted(dir.path(), "AblScores");
    let o = sycam(
        &["eval", "ReLU(Grads)", "--dataset", "ds/manifest.json", "--metric", "insertion:5", "--out", "e.csv", "--workers", "3"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let printed: f64 = stdout(&o).trim().rsplit(' ').next().unwrap().parse().unwrap();
    let text = std::fs::read_to_string(dir.path().join("e.csv")).unwrap();
    let rows = sycam::report::read_per_image_csv(&text).unwrap();
    let ds = load_dataset(&manifest).unwrap();
    assert_eq!(rows.len(), ds.len());
    let vals: Vec<f64> = rows.iter().map(|r| r.value.unwrap()).collect();
    let csv_mean = vals.iter().sum::<f64>() / vals.len() as f64;
    assert!((csv_mean - printed).abs() < 1e-9);

    let backend = sycam::backend::StubModel::load(ds.stub_model.as_ref().unwrap()).unwrap();
    let lib = evaluate_metric(MetricKind::Insertion(Some(5)), &parse_expr("ReLU(Grads)").unwrap(), &ds, Some(&backend), 1)
        .unwrap();
    assert_eq!(lib.value, printed);
}

#[test]
fn eval_records_expression_text_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    planted(dir.path(), "AblScores");
    let o = sycam(
        &["eval", "2*Grads + AblScores", "--dataset", "ds/manifest.json", "--metric", "mgt", "--out", "e.csv"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("e.csv")).unwrap();
    let rows = sycam::report::read_per_image_csv(&text).unwrap();
    assert!(rows.iter().all(|r| r.expr_text == "2*Grads + AblScores"));
    let bad = sycam(&["eval", "2*Grads +", "--dataset", "ds/manifest.json", "--metric", "mgt"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("position"), "{}", stderr(&bad));
}

#[test]
fn render_writes_identical_pngs_of_image_size() {
    let dir = tempfile::tempdir().unwrap();
    planted(dir.path(), "AblScores");
    for out in ["a.png", "b.png"] {
        let o = sycam(
            &["render", "AblScores", "--dataset", "ds/manifest.json", "--image-id", "img0003", "--out", out],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = std::fs::read(dir.path().join("a.png")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.png")).unwrap());
    assert_eq!(&a[..8], b"\x89PNG\r\n\x1a\n");
    // IHDR width and height, big-endian
    assert_eq!(u32::from_be_bytes(a[16..20].try_into().unwrap()), 12);
    assert_eq!(u32::from_be_bytes(a[20..24].try_into().unwrap()), 12);
    let o = sycam(
        &["render", "Grads", "--dataset", "ds/manifest.json", "--image-id", "nope", "--out", "c.png"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_lists_the_four_baselines() {
    let dir = tempfile::tempdir().unwrap();
    planted(dir.path(), "AblScores");
    let o = sycam(
        &["compare", "--dataset", "ds/manifest.json", "--steps", "9", "--out", "cmp.csv", "Grads*AblScores"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("cmp.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,expr_text,avgdrop,deletion:9,insertion:9,mgt,sch");
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["GradCAM", "GradCAM++", "ScoreCAM", "AblationCAM", "Grads*AblScores"]);
    assert!(lines[2].starts_with("GradCAM++,ReLU(Grads),"));
}

#[test]
fn classwise_synth_builds_a_guard() {
    let dir = tempfile::tempdir().unwrap();
    planted(dir.path(), "AblScores,CICScores");
    write_config(
        dir.path(),
        r#"{"dataset": "ds/manifest.json", "metric": "mgt", "budget_secs": 60, "timing": false, "workers": 1}"#,
    );
    let o = sycam(&["synth", "--config", "cfg.json", "--classwise"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().last(), Some("best: guard{0: AblScores; 1: CICScores}"));
    assert!(dir.path().join("trace_class0.jsonl").exists());
}
