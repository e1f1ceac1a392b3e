//! End-to-end runs of the `ssod` binary against the fixtures in
//! `tests/fixtures` and the recorded outputs in `tests/golden`.
//!
//! Set `SSOD_UPDATE_GOLDEN=1` to rewrite the golden files.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ssod"));
    c.env_remove("SSOD_MATCH_THREADS");
    c
}

fn here(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join(rel)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn golden(name: &str, actual: &[u8]) {
    let path = here("golden").join(name);
    if std::env::var_os("SSOD_UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
    }
    let want = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(want == actual, "{} differs from the recorded output", path.display());
}

#[test]
fn check_passes() {
    let o = run(&["check"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("4 of 4 checks passed"), "{}", stdout(&o));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_config_exits_1_with_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[stage]\n\ntau_s = 1.5\n").unwrap();
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("stage.tau_s") && err.contains("line 3"), "{err}");
}

#[test]
fn missing_input_is_internal_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["mine", "--predictions", "/nonexistent/preds.jsonl", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn bad_thread_count_rejected() {
    let o = bin().arg("check").env("SSOD_MATCH_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("SSOD_MATCH_THREADS"));
}

#[test]
fn simulate_writes_reports_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[scenario]\nnum_images = 40\n[cost]\nlambda_l1 = 5.0\n").unwrap();
    let out = dir.path().join("out");
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "11", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["filtering.csv", "assignment_quality.csv", "strategy_ablation.csv", "effective_config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let echo = ssod::config::load_config(out.join("effective_config.toml")).unwrap();
    assert_eq!((echo.scenario.seed, echo.scenario.num_images, echo.cost.lambda_l1), (11, 40, 5.0));

    let filtering = std::fs::read_to_string(out.join("filtering.csv")).unwrap();
    let lines: Vec<&str> = filtering.lines().collect();
    assert_eq!(lines[0], "strategy,precision,recall,kept,true_positives,num_gt,empty");
    assert_eq!(lines.len(), 5);
}

#[test]
fn simulate_json_embeds_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[scenario]\nnum_images = 20\n").unwrap();
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--format", "json", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("filtering.json")).unwrap()).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["rows"].as_array().unwrap().len(), 4);
    assert_eq!(v["config"]["scenario"]["num_images"], 20);
    assert_eq!(v["config"]["stage"]["tau_s"], 0.4);
}

#[test]
fn default_filtering_report_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--seed", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    golden("filtering_seed0.csv", &std::fs::read(dir.path().join("filtering.csv")).unwrap());
}

#[test]
fn mine_gmm_fixture_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let preds = here("fixtures/predictions.jsonl");
    let props = here("fixtures/proposals.jsonl");
    let o = run(&[
        "mine",
        "--predictions",
        preds.to_str().unwrap(),
        "--proposals",
        props.to_str().unwrap(),
        "--strategy",
        "gmm",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("kept 23/433"), "{}", stdout(&o));
    golden("mine_gmm.jsonl", &std::fs::read(dir.path().join("pseudo_labels.jsonl")).unwrap());
}

#[test]
fn mine_every_strategy_emits_subset() {
    let preds_path = here("fixtures/predictions.jsonl");
    let preds = ssod::ingest::ingest_predictions(&preds_path, true).unwrap();
    for s in ["fixed", "topk", "mean-std", "gmm"] {
        let dir = tempfile::tempdir().unwrap();
        let o = run(&["mine", "--predictions", preds_path.to_str().unwrap(), "--strategy", s, "--out", dir.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{s}: {}", stderr(&o));
        let kept = ssod::ingest::ingest_predictions(dir.path().join("pseudo_labels.jsonl"), true).unwrap();
        assert!(kept.kept() <= preds.kept());
        for g in &kept.groups {
            let src = preds.group(&g.image_id).unwrap();
            for r in &g.records {
                assert!(src.records.iter().any(|p| (p.bbox.x_min - r.bbox.x_min).abs() < 1e-12 && p.score == r.score));
            }
        }
    }
}

#[test]
fn mine_strict_and_lenient() {
    let dir = tempfile::tempdir().unwrap();
    let good = std::fs::read_to_string(here("fixtures/predictions.jsonl")).unwrap();
    let mut text: Vec<&str> = good.lines().take(20).collect();
    let bad = r#"{"image_id": "img_0000", "bbox": [50, 20, 10, 60], "width": 640, "height": 480, "score": 0.9, "category_id": 1}"#;
    text.insert(5, bad);
    let path = dir.path().join("mixed.jsonl");
    std::fs::write(&path, text.join("\n")).unwrap();
    let out = dir.path().join("out");

    let strict = run(&["mine", "--predictions", path.to_str().unwrap(), "--strict", "--out", out.to_str().unwrap()]);
    assert_eq!(strict.status.code(), Some(1));
    assert!(stderr(&strict).contains("line 6"), "{}", stderr(&strict));

    let lenient = run(&["mine", "--predictions", path.to_str().unwrap(), "--strategy", "fixed", "--out", out.to_str().unwrap()]);
    assert_eq!(lenient.status.code(), Some(0), "{}", stderr(&lenient));
    assert!(stdout(&lenient).contains("/20 boxes (1 skipped records"), "{}", stdout(&lenient));
}

#[test]
fn assign_strategies_write_diagnostics() {
    let preds = here("fixtures/proposals.jsonl");
    let gt = here("fixtures/gt.jsonl");
    for s in ["o2o", "o2m", "max-iou", "atss", "simota"] {
        let dir = tempfile::tempdir().unwrap();
        let o = run(&[
            "assign",
            "--predictions",
            preds.to_str().unwrap(),
            "--gt",
            gt.to_str().unwrap(),
            "--strategy",
            s,
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{s}: {}", stderr(&o));
        let targets = std::fs::read_to_string(dir.path().join("assignment.csv")).unwrap();
        assert_eq!(targets.lines().count(), 1 + 43, "{s}");
        let losses = std::fs::read_to_string(dir.path().join("assignment_losses.csv")).unwrap();
        assert_eq!(losses.lines().count(), 1 + 12, "{s}");
        if s == "o2o" {
            golden("assign_o2o.csv", targets.as_bytes());
            assert!(targets.lines().skip(1).all(|l| l.split(',').nth(3) == Some("1")));
        }
    }
}

#[test]
fn assign_infeasible_o2o_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let one = r#"{"image_id": "a", "bbox": [0, 0, 10, 10], "width": 100, "height": 100, "score": 0.9, "category_id": 0}"#;
    let two = format!("{one}\n{}\n", one.replace("[0, 0, 10, 10]", "[20, 20, 40, 40]"));
    let p = dir.path().join("p.jsonl");
    let g = dir.path().join("g.jsonl");
    std::fs::write(&p, one).unwrap();
    std::fs::write(&g, two).unwrap();
    let o = run(&["assign", "--predictions", p.to_str().unwrap(), "--gt", g.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn reports_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[scenario]\nnum_images = 50\n").unwrap();
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(threads);
        let o = bin()
            .args(["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .env("SSOD_MATCH_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        outputs.push(std::fs::read(out.join("strategy_ablation.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}
