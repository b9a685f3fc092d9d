use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "rounds": 2,
  "dataset": {"kind": "synthetic", "samples_per_class": 120, "test_per_class": 20},
  "fleet": {"num_devices": 4, "participation": 0.5},
  "pretrain": {"epochs": 3},
  "enhance": {"finetune": {"epochs": 1}}
}"#;

fn eclm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eclm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn error_class(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().next().unwrap();
    line.strip_prefix("error[").and_then(|r| r.split(']').next()).unwrap().to_string()
}

#[test]
fn pretrain_run_inspect_and_derive() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), CONFIG).unwrap();
    ok(&eclm(&["--quiet", "pretrain", "--config", "cfg.json", "--out", "pre"], d));
    assert!(d.join("pre/model.ckpt").is_file() && d.join("pre/m_layer0.csv").is_file());

    for s in ["eclm", "no_adapt", "local_only", "fedavg"] {
        let out = ok(&eclm(
            &["run", "--config", "cfg.json", "--checkpoint", "pre", "--strategy", s, "--out", s],
            d,
        ));
        assert!(out.starts_with(&format!("{s} after 2 rounds")), "{out}");
        let metrics = std::fs::read_to_string(d.join(s).join("metrics.jsonl")).unwrap();
        assert_eq!(metrics.lines().count(), 2);
    }

    let report = ok(&eclm(&["inspect", "pre"], d));
    assert!(report.contains("design space: 2^32"));
    let report = ok(&eclm(&["inspect", "eclm/events.jsonl"], d));
    assert!(report.contains("bytes down"));

    let mut imp = vec![vec![0.0; 16]; 2];
    imp[0][3] = 1.0;
    imp[1][7] = 1.0;
    std::fs::write(d.join("p.json"), serde_json::json!({ "importance": imp }).to_string()).unwrap();
    let args = ["derive", "--checkpoint", "pre", "--profile", "p.json"];
    let big = [&args[..], &["--comm-bytes", "1000000", "--mem-bytes", "1000000", "--macs", "1000000"]].concat();
    let v: serde_json::Value = serde_json::from_str(&ok(&eclm(&big, d))).unwrap();
    let layers = v["spec"]["layers"].as_array().unwrap();
    assert!(layers[0].as_array().unwrap().contains(&3.into()));
    assert!(layers[1].as_array().unwrap().contains(&7.into()));
    assert!(v["utilization"]["comm"].as_f64().unwrap() <= 1.0);

    let tiny = [&args[..], &["--comm-bytes", "10", "--mem-bytes", "10", "--macs", "10"]].concat();
    assert_eq!(error_class(&eclm(&tiny, d)), "infeasible");
}

#[test]
fn derive_profiles_a_local_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), CONFIG).unwrap();
    ok(&eclm(&["--quiet", "pretrain", "--config", "cfg.json", "--out", "pre", "--no-enhance"], d));
    assert!(!d.join("pre/m_layer0.csv").exists());
    let mut csv = String::new();
    for r in 0..10 {
        let row: Vec<String> = (0..32).map(|c| format!("{}", ((r * 7 + c) % 5) as f64 * 0.3)).collect();
        csv.push_str(&format!("{},{}\n", row.join(","), r % 8));
    }
    std::fs::write(d.join("local.csv"), csv).unwrap();
    std::fs::write(d.join("p.json"), r#"{"dataset": "local.csv", "schema": {"has_header": false}}"#).unwrap();
    let out = ok(&eclm(
        &["derive", "--checkpoint", "pre", "--profile", "p.json", "--comm-bytes", "100000", "--mem-bytes", "400000", "--macs", "40000"],
        d,
    ));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let imp = v["importance"]["layers"][0].as_array().unwrap();
    let sum: f64 = imp.iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-9);
}

#[test]
fn failures_carry_an_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("notes.txt"), "x").unwrap();
    assert_eq!(error_class(&eclm(&["inspect", "notes.txt"], d)), "format");
    std::fs::write(d.join("bad.json"), r#"{"rounds": 1, "colour": "blue"}"#).unwrap();
    assert_eq!(error_class(&eclm(&["pretrain", "--config", "bad.json", "--out", "o"], d)), "json");
    std::fs::write(d.join("bad.json"), r#"{"fleet": {"participation": 0.0}}"#).unwrap();
    assert_eq!(error_class(&eclm(&["pretrain", "--config", "bad.json", "--out", "o"], d)), "config");
    assert_eq!(error_class(&eclm(&["inspect", "missing.ckpt"], d)), "io");
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), CONFIG).unwrap();
    ok(&eclm(&["--quiet", "--seed", "9", "pretrain", "--config", "cfg.json", "--out", "a"], d));
    let written = std::fs::read_to_string(d.join("a/config.json")).unwrap();
    assert!(written.contains("\"seed\": 9"));
}
