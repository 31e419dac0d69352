use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_conformal-decode"));
    c.env("CONFORMAL_DECODE_THREADS", "2");
    c
}

struct Run {
    code: i32,
    summary: Value,
}

fn run(args: &[&str]) -> Run {
    let out = bin().args(args).output().expect("binary runs");
    let stdout = String::from_utf8(out.stdout).unwrap();
    let last = stdout.lines().last().unwrap_or_else(|| {
        panic!(
            "no summary; stderr: {}",
            String::from_utf8_lossy(&out.stderr)
        )
    });
    Run {
        code: out.status.code().unwrap(),
        summary: serde_json::from_str(last).expect("summary is JSON"),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_spec(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("spec.json");
    fs::write(&path, body).unwrap();
    path
}

fn synth_world(dir: &Path, name: &str, records: usize, seed: u64) -> PathBuf {
    let spec = write_spec(
        dir,
        &format!(r#"{{"kind":"dirichlet","vocab_size":30,"num_records":{records},"seed":{seed}}}"#),
    );
    let out = dir.join(name);
    let r = run(&["synth", p(&spec), p(&out)]);
    assert_eq!(r.code, 0, "{}", r.summary);
    out
}

#[test]
fn calibrate_writes_one_threshold_per_bin() {
    let dir = TempDir::new().unwrap();
    let data = synth_world(dir.path(), "cal.jsonl", 2_000, 1);
    let model = dir.path().join("model.json");
    let r = run(&[
        "calibrate",
        p(&data),
        p(&model),
        "--alpha",
        "0.1",
        "--bins",
        "10",
    ]);
    assert_eq!(r.code, 0);
    assert_eq!(r.summary["command"], "calibrate");
    assert_eq!(r.summary["status"], "ok");
    assert!(r.summary["elapsed_ms"].is_number());
    let saved: Value = serde_json::from_str(&fs::read_to_string(&model).unwrap()).unwrap();
    let qhats = saved["qhats"].as_array().unwrap();
    assert_eq!(qhats.len(), 10);
    assert!(qhats
        .iter()
        .all(|q| (0.0..=1.0).contains(&q.as_f64().unwrap())));
}

#[test]
fn out_of_range_alpha_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let data = synth_world(dir.path(), "cal.jsonl", 200, 1);
    let model = dir.path().join("model.json");
    let r = run(&["calibrate", p(&data), p(&model), "--alpha", "1.5"]);
    assert_eq!(r.code, 2);
    assert_eq!(r.summary["status"], "error");
    assert!(!model.exists());
}

#[test]
fn unknown_subcommand_exits_with_usage_code() {
    let r = run(&["frobnicate"]);
    assert_eq!(r.code, 2);
}

#[test]
fn missing_input_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let r = run(&[
        "calibrate",
        p(&dir.path().join("nope.jsonl")),
        p(&dir.path().join("m.json")),
    ]);
    assert_eq!(r.code, 2);
}

#[test]
fn identical_runs_produce_identical_artifacts() {
    let dir = TempDir::new().unwrap();
    let a = synth_world(dir.path(), "a.jsonl", 1_000, 9);
    let b = synth_world(dir.path(), "b.jsonl", 1_000, 9);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let m1 = dir.path().join("m1.json");
    let m2 = dir.path().join("m2.json");
    assert_eq!(run(&["calibrate", p(&a), p(&m1)]).code, 0);
    assert_eq!(run(&["calibrate", p(&a), p(&m2)]).code, 0);
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());

    let t1 = dir.path().join("t1.jsonl");
    let t2 = dir.path().join("t2.jsonl");
    assert_eq!(
        run(&["decode", p(&m1), p(&b), p(&t1), "--seed", "5"]).code,
        0
    );
    assert_eq!(
        run(&["decode", p(&m1), p(&b), p(&t2), "--seed", "5"]).code,
        0
    );
    assert_eq!(fs::read(&t1).unwrap(), fs::read(&t2).unwrap());
}

#[test]
fn synth_calibrate_evaluate_pipeline() {
    let dir = TempDir::new().unwrap();
    let cal = synth_world(dir.path(), "cal.jsonl", 2_000, 21);
    let test = synth_world(dir.path(), "test.jsonl", 5_000, 22);
    let model = dir.path().join("model.json");
    let report = dir.path().join("report.json");
    assert_eq!(
        run(&["calibrate", p(&cal), p(&model), "--bins", "1"]).code,
        0
    );
    let r = run(&["evaluate", p(&model), p(&test), p(&report)]);
    assert_eq!(r.code, 0);
    let cov = r.summary["coverage"].as_f64().unwrap();
    // one calibration draw: allow three standard errors of the threshold's spread
    let se = (0.09f64 / 2_000.0 + 0.09 / 5_000.0).sqrt();
    assert!(
        (0.9 - 3.0 * se..=0.9 + 1.0 / 2_001.0 + 3.0 * se).contains(&cov),
        "coverage {cov}"
    );
    let saved: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(saved["n_test"], 5_000);
}

#[test]
fn validate_reports_bad_rows() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("mixed.jsonl");
    fs::write(
        &data,
        concat!(
            r#"{"seq":0,"pos":0,"gold":0,"vocab":3,"probs":[0.5,0.3,0.2]}"#,
            "\n",
            r#"{"seq":0,"pos":1,"gold":0,"vocab":3,"probs":[0.5,0.6,0.2]}"#,
            "\n",
            r#"{"seq":0,"pos":2,"gold":7,"vocab":3,"probs":[0.5,0.3,0.2]}"#,
            "\n",
        ),
    )
    .unwrap();
    let r = run(&["validate", p(&data)]);
    assert_eq!(r.code, 3);
    assert_eq!(r.summary["valid"], 1);
    assert_eq!(r.summary["report"]["by_code"]["BAD_SUM"], 1);
    assert_eq!(r.summary["report"]["by_code"]["GOLD_OOB"], 1);

    let good = synth_world(dir.path(), "good.jsonl", 50, 2);
    assert_eq!(run(&["validate", p(&good)]).code, 0);
}

#[test]
fn malformed_line_is_an_error_naming_the_line() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("broken.jsonl");
    fs::write(
        &data,
        concat!(
            r#"{"seq":0,"pos":0,"gold":0,"vocab":2,"probs":[0.5,0.5]}"#,
            "\n",
            "not json\n"
        ),
    )
    .unwrap();
    let r = run(&["validate", p(&data)]);
    assert_eq!(r.code, 3);
    assert!(r.summary["error"].as_str().unwrap().starts_with("line 2:"));
}

#[test]
fn strict_calibration_rejects_bad_rows_and_lenient_drops_them() {
    let dir = TempDir::new().unwrap();
    let data = synth_world(dir.path(), "cal.jsonl", 300, 4);
    let mut text = fs::read_to_string(&data).unwrap();
    text.push_str(r#"{"seq":9999,"pos":0,"gold":0,"vocab":30,"probs":[-1.0]}"#);
    text.push('\n');
    fs::write(&data, text).unwrap();
    let model = dir.path().join("m.json");
    assert_eq!(run(&["calibrate", p(&data), p(&model)]).code, 3);
    assert!(!model.exists());
    let r = run(&["calibrate", p(&data), p(&model), "--lenient"]);
    assert_eq!(r.code, 0);
    assert_eq!(r.summary["dropped"], 1);
}

#[test]
fn decode_trace_has_one_line_per_step() {
    let dir = TempDir::new().unwrap();
    let cal = synth_world(dir.path(), "cal.jsonl", 1_000, 31);
    let stream = synth_world(dir.path(), "stream.jsonl", 40, 32);
    let model = dir.path().join("m.json");
    let trace = dir.path().join("trace.jsonl");
    assert_eq!(run(&["calibrate", p(&cal), p(&model)]).code, 0);
    let r = run(&[
        "decode",
        p(&model),
        p(&stream),
        p(&trace),
        "--max-steps",
        "25",
    ]);
    assert_eq!(r.code, 0);
    assert_eq!(r.summary["steps"], 25);
    let lines: Vec<Value> = fs::read_to_string(&trace)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 25);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["step"], i);
        assert!(l["set_size"].as_u64().unwrap() >= 1);
        assert!(l["token"].as_u64().unwrap() < 30);
    }
}

#[test]
fn curve_csv_has_header_and_points() {
    let dir = TempDir::new().unwrap();
    let data = synth_world(dir.path(), "cal.jsonl", 1_000, 41);
    let csv = dir.path().join("curve.csv");
    let r = run(&[
        "curve",
        p(&data),
        p(&csv),
        "--alphas",
        "0.1:0.3:0.1",
        "--bins",
        "1",
    ]);
    assert_eq!(r.code, 0);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,y,series"));
    assert_eq!(lines.count(), 3);

    let eff = dir.path().join("eff.csv");
    let r = run(&[
        "curve",
        p(&data),
        p(&eff),
        "--kind",
        "effective",
        "--bins",
        "5",
    ]);
    assert_eq!(r.code, 0);
    assert!(fs::read_to_string(&eff).unwrap().contains("top_p=0.9"));
}

#[test]
fn band_check_writes_report() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(
        dir.path(),
        r#"{"kind":"dirichlet","vocab_size":20,"seed":3}"#,
    );
    let report = dir.path().join("band.json");
    let r = run(&[
        "band-check",
        p(&spec),
        p(&report),
        "--n-cal",
        "199",
        "--n-test",
        "2000",
        "--trials",
        "20",
    ]);
    assert_eq!(r.code, 0, "{}", r.summary);
    let saved: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(saved["trials"], 20);
    assert!(saved["mean_coverage"].as_f64().unwrap() > 0.8);
}

#[test]
fn extractor_style_files_need_relaxed_eps() {
    // metadata header, then top-2 sparse rows whose mass is off by 5e-5
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("extracted.jsonl");
    fs::write(
        &data,
        concat!(
            r#"{"meta":{"model":"toy","vocab_size":50,"tokenizer":"toy","gold_in_top_k":1.0}}"#,
            "\n",
            r#"{"seq":0,"pos":1,"gold":3,"vocab":50,"ids":[3,9],"probs":[0.6,0.3],"tail":0.10005}"#,
            "\n",
            r#"{"seq":0,"pos":2,"gold":9,"vocab":50,"ids":[9,1],"probs":[0.5,0.4],"tail":0.09995}"#,
            "\n",
        ),
    )
    .unwrap();
    assert_eq!(run(&["validate", p(&data), "--strict"]).code, 3);
    let r = run(&["validate", p(&data), "--strict", "--eps", "1e-4"]);
    assert_eq!(r.code, 0, "{}", r.summary);
    assert_eq!(r.summary["valid"], 2);
}
