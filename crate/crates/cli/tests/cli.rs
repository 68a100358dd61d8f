//! End-to-end checks of the binary surface: subcommands, exit codes and
//! artifact emission.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nashlab"))
}

#[test]
fn list_catalog_text_and_json() {
    let out = bin().args(["list-catalog"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for kind in ["hardy", "log_refined", "kato_slab", "checkerboard"] {
        assert!(text.contains(kind), "missing {kind} in listing");
    }

    let out = bin().args(["list-catalog", "--json"]).output().unwrap();
    assert!(out.status.success());
    let parsed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(parsed.as_array().unwrap().len() >= 10);

    // dimension filter drops the d=3-only entry
    let out = bin()
        .args(["list-catalog", "--json", "--dimension", "2"])
        .output()
        .unwrap();
    let parsed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(parsed.as_array().unwrap().iter().all(|e| e["name"] != "hardy"));
}

#[test]
fn validate_config_paths() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.toml");
    std::fs::write(
        &good,
        r#"
[grid]
dimension = 1
half_width = 2.0
points_per_axis = 33
[matrix]
kind = "identity"
[drift]
kind = "zero"
"#,
    )
    .unwrap();
    let out = bin().args(["validate-config"]).arg(&good).output().unwrap();
    assert!(out.status.success());

    let bad = dir.path().join("bad.toml");
    std::fs::write(
        &bad,
        r#"
[grid]
dimension = 1
half_width = 2.0
points_per_axis = 33
[matrix]
kind = "identity"
[drift]
kind = "whirlpool"
"#,
    )
    .unwrap();
    let out = bin().args(["validate-config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("drift.kind"), "stderr: {err}");
}

#[test]
fn run_minimal_and_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        r#"
seed = 11
[grid]
dimension = 1
half_width = 3.0
points_per_axis = 65
[matrix]
kind = "identity"
[drift]
kind = "constant"
amplitude = 0.5
[norms]
requests = [{ functional = "nash_e", horizon = 0.25 }]
"#,
    )
    .unwrap();
    let out1 = dir.path().join("out1");
    let out2 = dir.path().join("out2");
    for out in [&out1, &out2] {
        let res = bin().args(["run"]).arg(&cfg).args(["--out"]).arg(out).output().unwrap();
        assert!(
            res.status.success(),
            "stderr: {}",
            String::from_utf8_lossy(&res.stderr)
        );
    }
    let hash = |p: &Path| -> String {
        let m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(p.join("manifest.json")).unwrap())
                .unwrap();
        m["combined_hash"].as_str().unwrap().to_string()
    };
    assert_eq!(hash(&out1), hash(&out2));

    // reusing an owned output directory is refused
    let res = bin().args(["run"]).arg(&cfg).args(["--out"]).arg(&out1).output().unwrap();
    assert_eq!(res.status.code(), Some(2));

    // the norm artifact carries the constant-field value 2 c sqrt(h)
    let reports: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out1.join("norm_reports.json")).unwrap(),
    )
    .unwrap();
    let v = reports[0]["value"].as_f64().unwrap();
    let expect = 2.0 * 0.5 * 0.25f64.sqrt();
    assert!((v - expect).abs() < 1e-9, "norm value {v}");
}

#[test]
fn run_rejects_missing_config() {
    let dir = tempfile::tempdir().unwrap();
    let res = bin()
        .args(["run", "--out"])
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2));
}
