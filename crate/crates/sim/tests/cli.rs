//! Smoke tests of the `aot` binary.

use std::process::Command;

fn aot(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_aot"))
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn lists_scenarios() {
    let out = aot(&["scenarios"]);
    for name in ["blending", "failover", "tamper-l2", "determinism"] {
        assert!(out.contains(name), "{out}");
    }
}

#[test]
fn analyze_prints_json() {
    let v: serde_json::Value =
        serde_json::from_str(&aot(&["analyze", "--samples", "2000"])).unwrap();
    let lines = v.as_array().unwrap();
    assert!(lines.iter().any(|l| l["name"] == "sender_anonymity_set"));
}

#[test]
fn run_writes_a_jsonl_log() {
    let path = std::env::temp_dir().join(format!("aot-cli-{}.jsonl", std::process::id()));
    let out = aot(&[
        "run",
        "--clients",
        "20",
        "--messages",
        "20",
        "--seed",
        "3",
        "--out",
        path.to_str().unwrap(),
    ]);
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["summary"]["measured_delivered"], 20);
    let log = std::fs::read_to_string(&path).unwrap();
    std::fs::remove_file(&path).unwrap();
    let lines: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lines.len() > 20);
}

#[test]
fn bad_flags_fail() {
    let status = Command::new(env!("CARGO_BIN_EXE_aot"))
        .args(["run", "--q3", "1", "--alpha", "2"])
        .status()
        .unwrap();
    assert!(!status.success());
}
